//! Joint training loop.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PooledImages, PreparedQuery};
use crate::error::{contract, Error, Result};
use crate::experts::RawExperts;
use crate::model::{batch_losses, ModelConfig};
use crate::nn::{apply_batch_norm_stats, Forward, Mode, ParamGrads};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayUnit {
    #[default]
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden dimension `D`.
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_unit: DecayUnit,
    pub dropout: f64,
    pub fusion_rank: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub share_diff_fc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_decay: 0.95,
            decay_unit: DecayUnit::Epoch,
            dropout: 0.2,
            fusion_rank: 4,
            epochs: 10,
            seed: 0,
            lambda_r: 1.0,
            lambda_c: 1.0,
            share_diff_fc: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(contract("batch size must be at least 2"));
        }
        if self.hidden == 0 || self.fusion_rank == 0 {
            return Err(contract("hidden width and fusion rank must be positive"));
        }
        // A zero rate is allowed: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(contract("learning rate must be finite and non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(contract("decay factor must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract("dropout must lie in [0, 1)"));
        }
        if !(self.lambda_r >= 0.0 && self.lambda_c >= 0.0) {
            return Err(contract("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn model_config(&self, word_dim: usize, c: usize, c_inter: usize) -> ModelConfig {
        ModelConfig {
            word_dim,
            c,
            c_inter,
            hidden: self.hidden,
            fusion_rank: self.fusion_rank,
            share_diff_fc: self.share_diff_fc,
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub loss_r: f64,
    pub loss_c: f64,
    pub loss: f64,
    /// Rate used for this step.
    pub lr: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step,epoch,loss_r,loss_c,loss,lr";

    pub fn to_csv(&self) -> alloc::string::String {
        alloc::format!(
            "{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss_r,
            self.loss_c,
            self.loss,
            self.lr
        )
    }
}

/// Mean total loss of each epoch in `log`.
pub fn epoch_means(log: &[StepLog]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for s in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == s.epoch => {
                *sum += s.loss;
                *n += 1;
            }
            _ => out.push((s.epoch, s.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

const DROPOUT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains both pathways jointly with shared experts.
///
/// Shuffling and dropout draw from generators derived from the seed and the
/// epoch/step counters, so a run restored from a checkpoint at an epoch
/// boundary continues exactly as the uninterrupted run would.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub state: AdamState,
    pub hyper: AdamHyper,
    pooled: &'a PooledImages,
    queries: &'a [PreparedQuery],
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        model: ModelConfig,
        pooled: &'a PooledImages,
        queries: &'a [PreparedQuery],
    ) -> Result<Self> {
        config.validate()?;
        let params = model.init_params(config.seed)?;
        let state = AdamState::new(config.learning_rate);
        Self::resume(config, params, state, pooled, queries)
    }

    pub fn resume(
        config: TrainConfig,
        params: ModelParams,
        state: AdamState,
        pooled: &'a PooledImages,
        queries: &'a [PreparedQuery],
    ) -> Result<Self> {
        config.validate()?;
        if queries.len() < 2 {
            return Err(contract("training needs at least two triplets"));
        }
        Ok(Self {
            config,
            params,
            state,
            hyper: AdamHyper::default(),
            pooled,
            queries,
        })
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One forward/backward/update on the triplets `batch`.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepLog> {
        let refs: Vec<&RawExperts> = batch
            .iter()
            .map(|&i| &self.pooled.raws[self.queries[i].ref_pos])
            .collect();
        let trgs: Vec<&RawExperts> = batch
            .iter()
            .map(|&i| &self.pooled.raws[self.queries[i].trg_pos])
            .collect();
        let caps: Vec<&Tensor> = batch.iter().map(|&i| &self.queries[i].words).collect();
        let step = self.state.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ DROPOUT_STREAM_SALT);
        rng.set_stream(step);

        let (log, grads, stats) = {
            let mut f = Forward::new(&self.params, Mode::Train, self.config.dropout, rng, true);
            let losses = batch_losses(
                &mut f,
                &refs,
                &trgs,
                &caps,
                self.config.lambda_r,
                self.config.lambda_c,
            )?;
            let value = |v| f.graph.value(v).item();
            let log = StepLog {
                step,
                epoch: self.state.epoch,
                loss_r: value(losses.composition),
                loss_c: value(losses.correction),
                loss: value(losses.total),
                lr: self.state.lr,
            };
            let grads = f.param_grads(&f.graph.backward(losses.total)?);
            if !log.loss.is_finite() {
                return Err(non_finite(step, &grads));
            }
            (log, grads, f.batch_norm_stats().to_vec())
        };
        adam_step(&mut self.params, &grads, &mut self.state, &self.hyper)?;
        apply_batch_norm_stats(&mut self.params, &stats)?;
        if self.config.decay_unit == DecayUnit::Step {
            self.state.decay(self.config.lr_decay);
        }
        Ok(log)
    }

    /// One pass over the shuffled training set.
    pub fn run_epoch(&mut self) -> Result<Vec<StepLog>> {
        let order = self.epoch_order(self.state.epoch);
        let mut logs = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            logs.push(self.step(batch)?);
        }
        self.state.epoch += 1;
        if self.config.decay_unit == DecayUnit::Epoch {
            self.state.decay(self.config.lr_decay);
        }
        Ok(logs)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train<F>(&mut self, mut on_epoch: F) -> Result<Vec<StepLog>>
    where
        F: FnMut(&Trainer<'a>, &[StepLog]) -> Result<()>,
    {
        let mut all = Vec::new();
        while (self.state.epoch as usize) < self.config.epochs {
            let logs = self.run_epoch()?;
            on_epoch(self, &logs)?;
            all.extend(logs);
        }
        Ok(all)
    }
}

fn non_finite(step: u64, grads: &ParamGrads) -> Error {
    let norms: Vec<(&str, f64)> = grads
        .iter()
        .map(|(name, g)| (name.as_str(), libm::sqrt(g.iter().map(|v| v * v).sum::<f64>())))
        .collect();
    let worst = norms
        .iter()
        .find(|(_, n)| !n.is_finite())
        .or_else(|| norms.iter().max_by(|a, b| a.1.total_cmp(&b.1)))
        .copied()
        .unwrap_or(("", 0.0));
    Error::NonFinite {
        step,
        param: worst.0.to_string(),
        norm: worst.1,
    }
}
