//! Line-oriented text formats: triplet records (one JSON object per line)
//! and word vectors (`token v1 ... vN`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ccnet_core::data::{tokenize, TripletRecord, WordVectorTable};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// On-disk triplet: captions are raw text, tokenized on load.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletLine {
    ref_id: String,
    trg_id: String,
    captions: Vec<String>,
    category: String,
}

pub fn triplets_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("triplets.{split}.jsonl"))
}

/// Order-preserving parse; blank lines are skipped, line numbers are 1-based.
pub fn parse_triplets(text: &str, path: &Path) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: TripletLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let record = TripletRecord {
            ref_id: raw.ref_id,
            trg_id: raw.trg_id,
            captions: raw.captions.iter().map(|c| tokenize(c)).collect(),
            category: raw.category,
        };
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_triplets(&text, path)
}

pub fn write_triplets(path: &Path, records: &[TripletRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = TripletLine {
            ref_id: r.ref_id.clone(),
            trg_id: r.trg_id.clone(),
            captions: r.captions.iter().map(|c| c.join(" ")).collect(),
            category: r.category.clone(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        writeln!(w, "{json}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses `token v1 ... vN` lines; `N` is taken from the first line.
/// Values are read at 32-bit precision.
pub fn parse_word_vectors(text: &str, path: &Path) -> Result<WordVectorTable> {
    let mut table: Option<WordVectorTable> = None;
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let values = fields
            .map(|f| f.parse::<f32>().map(f64::from))
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if values.is_empty() {
            return Err(parse_err(format!("token `{token}` has no vector")));
        }
        let t = table.get_or_insert_with(|| WordVectorTable::new(values.len()));
        t.insert(token, values).map_err(|e| parse_err(e.to_string()))?;
    }
    table.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "no word vectors".into(),
    })
}

pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_word_vectors(&text, path)
}

/// Writes every vector at 32-bit precision with round-trip formatting.
pub fn write_word_vectors(path: &Path, table: &WordVectorTable) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (token, v) in table.iter() {
        write!(w, "{token}").map_err(io_err(path))?;
        for x in v {
            write!(w, " {}", *x as f32).map_err(io_err(path))?;
        }
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
