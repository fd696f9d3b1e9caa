//! Training driver: checkpoints, loss log and best-eval snapshot on disk.
//!
//! For an output checkpoint `model.ckpt` a run writes
//!
//! ```text
//! model.ckpt              final parameters and optimizer state
//! model.epoch-NNN.ckpt    end of epoch NNN (1-based)
//! model.best.ckpt         best overall recall on the eval split
//! model.loss.csv          one line per step
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ccnet_core::eval::Scoring;
use ccnet_core::optim::AdamState;
use ccnet_core::train::{StepLog, Trainer};
use ccnet_core::{Ccnet, ModelConfig, ModelParams};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::DataDir;
use crate::error::{io_err, Error, Result};
use crate::evaluate::evaluate;

pub const TRAIN_SPLIT: &str = "train";

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn epoch_checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    sibling(out, &format!(".epoch-{epoch:03}.ckpt"))
}

pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    sibling(out, ".best.ckpt")
}

pub fn loss_log_path(out: &Path) -> PathBuf {
    sibling(out, ".loss.csv")
}

pub struct TrainOutcome {
    /// Steps run by this invocation.
    pub logs: Vec<StepLog>,
    /// `(epoch, overall recall)` of the best snapshot.
    pub best: Option<(u64, f64)>,
    pub params: ModelParams,
    pub state: AdamState,
}

pub fn model_config(cfg: &RunConfig, data: &DataDir) -> ModelConfig {
    let d = data.store.dims();
    cfg.train.model_config(data.words.dim(), d.c, d.c_inter)
}

/// Trains from scratch, or continues `resume` (which must carry optimizer
/// state) up to the configured epoch count.
pub fn train_run(cfg: &RunConfig, data: &DataDir, out: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let split = data.split(TRAIN_SPLIT)?;
    let model = model_config(cfg, data);
    let log_path = loss_log_path(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut trainer = match resume {
        None => {
            fs::write(&log_path, format!("{}\n", StepLog::HEADER)).map_err(io_err(&log_path))?;
            Trainer::new(cfg.train.clone(), model, &data.pooled, &split.queries)?
        }
        Some(ck) => {
            let state = ck
                .optimizer
                .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
            if ModelConfig::infer(&ck.params)? != model {
                return Err(Error::Config("checkpoint shapes do not match the config and data".into()));
            }
            if !log_path.exists() {
                fs::write(&log_path, format!("{}\n", StepLog::HEADER)).map_err(io_err(&log_path))?;
            }
            Trainer::resume(cfg.train.clone(), ck.params, state, &data.pooled, &split.queries)?
        }
    };
    let eval = match &cfg.run.eval_split {
        Some(name) => Some(data.split(name)?),
        None => None,
    };

    let mut all = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    while (trainer.state.epoch as usize) < cfg.train.epochs {
        let logs = trainer.run_epoch()?;
        let epoch = trainer.state.epoch;
        let mut log = OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?;
        for l in &logs {
            writeln!(log, "{}", l.to_csv()).map_err(io_err(&log_path))?;
        }
        if cfg.run.checkpoint_every > 0 && epoch % cfg.run.checkpoint_every as u64 == 0 {
            save_checkpoint(&epoch_checkpoint_path(out, epoch), &trainer.params, Some(&trainer.state))?;
        }
        if let Some(split) = &eval {
            let every = cfg.run.eval_every.max(1) as u64;
            if epoch % every == 0 || epoch as usize == cfg.train.epochs {
                let m = Ccnet::new(trainer.params.clone())?;
                let r = evaluate(&[&m], data, split, &cfg.run.recall, Scoring::Ccnet)?;
                if best.is_none_or(|(_, b)| r.overall > b) {
                    best = Some((epoch, r.overall));
                    save_checkpoint(&best_checkpoint_path(out), &trainer.params, None)?;
                }
            }
        }
        all.extend(logs);
    }
    save_checkpoint(out, &trainer.params, Some(&trainer.state))?;
    Ok(TrainOutcome {
        logs: all,
        best,
        params: trainer.params,
        state: trainer.state,
    })
}
