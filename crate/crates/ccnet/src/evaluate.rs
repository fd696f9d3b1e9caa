//! Split evaluation and report files.

use std::fs;
use std::path::Path;
use std::thread;

use ccnet_core::eval::{report, Evaluator, Scoring, ScoredQuery};
use ccnet_core::retrieval::RecallReport;
use ccnet_core::Ccnet;

use crate::dataset::{DataDir, Split};
use crate::error::{io_err, Result};

/// Scores every query of `split` with every model. Queries are spread over
/// the available cores; the result is in query order regardless.
pub fn score_split(models: &[&Ccnet], data: &DataDir, split: &Split) -> Result<Vec<ScoredQuery>> {
    let ev = Evaluator::new(models, &data.pooled, &split.queries, &split.galleries)?;
    let n = ev.num_queries();
    let workers = thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return Ok(ev.score_all()?);
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<ccnet_core::Result<Vec<ScoredQuery>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let ev = &ev;
                s.spawn(move || (start..(start + chunk).min(n)).map(|i| ev.score(i)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Recall of the ensemble of all models (geometric pooling when several).
pub fn evaluate(
    models: &[&Ccnet],
    data: &DataDir,
    split: &Split,
    ks: &[usize],
    scoring: Scoring,
) -> Result<RecallReport> {
    let scored = score_split(models, data, split)?;
    let members: Vec<usize> = (0..models.len()).collect();
    Ok(report(&scored, &members, scoring, ks)?)
}

/// Writes `<prefix>.txt` (table) and `<prefix>.kv` (key-value lines).
pub fn write_report(prefix: &Path, r: &RecallReport) -> Result<()> {
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    let txt = with_ext(".txt");
    fs::write(&txt, r.to_text()).map_err(io_err(&txt))?;
    let kv = with_ext(".kv");
    fs::write(&kv, r.to_key_values()).map_err(io_err(&kv))
}
