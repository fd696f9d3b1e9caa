//! Layer primitives bound to a [`ModelParams`] registry.
//!
//! A [`Forward`] pass owns one [`Graph`], binds each named parameter into it
//! at most once, and collects the batch-norm statistics observed in training
//! mode so they can be folded into the running averages after the step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Grads, Graph, Var};
use crate::params::{ModelParams, ParamKind};

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, active dropout.
    Train,
    /// Running statistics, dropout is the identity.
    Eval,
}

/// Gradient per trainable parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Forward<'p> {
    pub graph: Graph,
    params: &'p ModelParams,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
    track: bool,
    bn_stats: Vec<BatchNormStats>,
}

impl<'p> Forward<'p> {
    /// `track` controls whether parameters receive gradients.
    pub fn new(params: &'p ModelParams, mode: Mode, dropout: f64, rng: ChaCha8Rng, track: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            mode,
            dropout,
            rng,
            track,
            bn_stats: Vec::new(),
        }
    }

    /// Inference pass: running statistics, no dropout, no gradients.
    pub fn inference(params: &'p ModelParams) -> Self {
        use rand::SeedableRng;
        Self::new(params, Mode::Eval, 0.0, ChaCha8Rng::seed_from_u64(0), false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let trainable = self.params.kind(name) == Some(ParamKind::Trainable);
        let v = if self.track && trainable {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `{prefix}.weight`, `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    pub fn conv1d(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.conv1d_same(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.graph.batch_norm_train(x, scale, shift)?;
                self.bn_stats.push(BatchNormStats {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.get(&format!("{prefix}.running_mean"))?;
                let rv = self.params.get(&format!("{prefix}.running_var"))?;
                self.graph.batch_norm_eval(x, scale, shift, rm.data(), rv.data())
            }
        }
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = self.graph.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.graph.mask_mul(x, mask)
    }

    /// `x ⊙ σ(W x + b)`.
    pub fn context_gating(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let z = self.linear(prefix, x)?;
        let gate = self.graph.sigmoid(z);
        self.graph.mul(x, gate)
    }

    /// Linear, batch norm, ReLU, dropout.
    pub fn hidden_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc"), x)?;
        let h = self.batch_norm(&format!("{prefix}.bn"), h)?;
        let h = self.graph.relu(h);
        self.dropout(h)
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.bn_stats
    }

    /// Gradients for every trainable parameter; unused ones get zeros.
    pub fn param_grads(&self, grads: &Grads) -> ParamGrads {
        self.params
            .trainable()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| alloc::vec![0.0; t.len()]);
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_batch_norm_stats(params: &mut ModelParams, stats: &[BatchNormStats]) -> Result<()> {
    for s in stats {
        let rm = params.get_mut(&format!("{}.running_mean", s.prefix))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * m;
        }
        let rv = params.get_mut(&format!("{}.running_var", s.prefix))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * v;
            // keep strictly positive for constant features
            *r = r.max(1e-12);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn gating_params(w: f64, b: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("cg.weight", Tensor::filled(&[2, 2], w)).unwrap();
        p.insert("cg.bias", Tensor::filled(&[2], b)).unwrap();
        p
    }

    #[test]
    fn context_gating_zero_params_halves() {
        let p = gating_params(0.0, 0.0);
        let mut f = Forward::inference(&p);
        let x = f.graph.constant(Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, -2.0]).unwrap());
        let y = f.context_gating("cg", x).unwrap();
        assert_eq!(f.graph.value(y).data(), &[0.5, -1.0]);
    }

    #[test]
    fn context_gating_saturated_passes_through() {
        let p = gating_params(0.0, 20.0);
        let mut f = Forward::inference(&p);
        let x = f.graph.constant(Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, -2.0]).unwrap());
        let y = f.context_gating("cg", x).unwrap();
        let d = f.graph.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && (d[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_identity_cases() {
        let p = ModelParams::new();
        let x = Tensor::new(alloc::vec![2, 3], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut f = Forward::new(&p, Mode::Train, 0.0, ChaCha8Rng::seed_from_u64(1), true);
        let v = f.graph.constant(x.clone());
        assert_eq!(f.dropout(v).unwrap(), v);
        let mut f = Forward::new(&p, Mode::Eval, 0.9, ChaCha8Rng::seed_from_u64(1), true);
        let v = f.graph.constant(x.clone());
        assert_eq!(f.dropout(v).unwrap(), v);
        let mut f = Forward::new(&p, Mode::Train, 0.5, ChaCha8Rng::seed_from_u64(1), true);
        let v = f.graph.constant(x);
        let y = f.dropout(v).unwrap();
        for (a, b) in f.graph.value(y).data().iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut p = ModelParams::new();
        crate::params::init_batch_norm(&mut p, "bn", 2).unwrap();
        let stats = [BatchNormStats {
            prefix: "bn".into(),
            mean: alloc::vec![1.0, 2.0],
            var: alloc::vec![3.0, 0.0],
        }];
        apply_batch_norm_stats(&mut p, &stats).unwrap();
        assert_eq!(p.get("bn.running_mean").unwrap().data(), &[0.1, 0.2]);
        let rv = p.get("bn.running_var").unwrap().data();
        assert!((rv[0] - 1.2).abs() < 1e-15 && (rv[1] - 0.9).abs() < 1e-15);
    }
}
