//! Feature store on disk: `index.json` (dimensions and id -> byte offset)
//! next to `features.bin` (little-endian `f32` records, map then
//! intermediate vector).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ccnet_core::data::{FeatureDims, FeatureStore};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const DATA_FILE: &str = "features.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    h: usize,
    w: usize,
    c: usize,
    c_inter: usize,
    offsets: BTreeMap<String, u64>,
}

pub fn write_feature_store(dir: &Path, store: &FeatureStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let d = store.dims();
    let offsets = store
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), (i * d.record_bytes()) as u64))
        .collect();
    let index = IndexFile {
        h: d.h,
        w: d.w,
        c: d.c,
        c_inter: d.c_inter,
        offsets,
    };
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).map_err(|e| format_err(&index_path, e.to_string()))?;
    fs::write(&index_path, json).map_err(io_err(&index_path))?;

    let data_path = dir.join(DATA_FILE);
    let file = fs::File::create(&data_path).map_err(io_err(&data_path))?;
    let mut w = BufWriter::new(file);
    for v in store.raw_values() {
        w.write_all(&v.to_le_bytes()).map_err(io_err(&data_path))?;
    }
    w.flush().map_err(io_err(&data_path))
}

/// Reads the whole store into memory. Records are ordered by byte offset.
pub fn load_feature_store(dir: &Path) -> Result<FeatureStore> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index: IndexFile =
        serde_json::from_str(&text).map_err(|e| format_err(&index_path, e.to_string()))?;
    let dims = FeatureDims {
        h: index.h,
        w: index.w,
        c: index.c,
        c_inter: index.c_inter,
    };
    if dims.record_len() == 0 {
        return Err(format_err(&index_path, "feature dimensions must be positive"));
    }
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let rb = dims.record_bytes() as u64;
    let mut by_offset: Vec<(u64, String)> =
        index.offsets.into_iter().map(|(id, off)| (off, id)).collect();
    by_offset.sort();
    let mut store = FeatureStore::new(dims);
    let mut record = vec![0f32; dims.record_len()];
    let split = dims.h * dims.w * dims.c;
    for (off, id) in by_offset {
        let end = off.checked_add(rb).unwrap_or(u64::MAX);
        if end > bytes.len() as u64 {
            return Err(Error::SizeMismatch {
                path: data_path,
                expected: end,
                found: bytes.len() as u64,
            });
        }
        let raw = &bytes[off as usize..end as usize];
        for (v, chunk) in record.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        store.push(&id, &record[..split], &record[split..])?;
    }
    Ok(store)
}
