//! Analytic gradients against central finite differences.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experts::{pool_image, RawExperts, DEFAULT_SLICES};
use crate::graph::Var;
use crate::model::{batch_losses, ModelConfig};
use crate::nn::{Forward, Mode};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::Tensor;

/// Worst disagreement within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    /// `max_i |analytic_i - numeric_i| / max(max_i max(|analytic_i|, |numeric_i|), SCALE_FLOOR)`.
    pub relative: f64,
    pub max_abs_diff: f64,
    pub analytic_norm: f64,
}

/// Below this gradient magnitude a group counts as exactly flat (e.g. a bias
/// that cancels in a difference) and differences are judged absolutely;
/// central-difference round-off at `h = 1e-5` is around `1e-11`.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Relative disagreement that triggers a smaller-step re-measurement.
const KINK_RETRY: f64 = 5e-5;

fn group_scale(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max)
}

fn group_error(group: &str, analytic: &[f64], numeric: &[f64]) -> GroupError {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = group_scale(analytic, numeric);
    GroupError {
        group: group.to_string(),
        relative: diff / scale.max(SCALE_FLOOR),
        max_abs_diff: diff,
        analytic_norm: libm::sqrt(analytic.iter().map(|v| v * v).sum()),
    }
}

/// Compares backprop through `loss` with central differences of step `h`
/// for every trainable parameter. `loss` must be deterministic: run it in
/// eval mode or with dropout disabled.
pub fn check_gradients<F>(params: &ModelParams, h: f64, loss: F) -> Result<Vec<GroupError>>
where
    F: Fn(&mut Forward<'_>) -> Result<Var>,
{
    let analytic = {
        let mut f = eval_forward(params, true);
        let l = loss(&mut f)?;
        let grads = f.graph.backward(l)?;
        f.param_grads(&grads)
    };
    let eval = |p: &ModelParams| -> Result<f64> {
        let mut f = eval_forward(p, false);
        let l = loss(&mut f)?;
        Ok(f.graph.value(l).item())
    };
    let mut probe = params.clone();
    let mut central = |name: &str, i: usize, step: f64| -> Result<f64> {
        let orig = probe.get(name)?.data()[i];
        probe.get_mut(name)?.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * step))
    };
    let mut out = Vec::new();
    for (name, a) in &analytic {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            numeric.push(central(name, i, h)?);
        }
        // A ReLU hinge inside [x - h, x + h] biases the central difference.
        // Coordinates that disagree are re-measured once with a step ten
        // times smaller and the closer estimate is kept: a hinge crossing
        // rarely survives the smaller step, a wrong analytic gradient
        // disagrees with both.
        let scale = group_scale(a, &numeric).max(SCALE_FLOOR);
        for (i, num) in numeric.iter_mut().enumerate() {
            if (a[i] - *num).abs() > KINK_RETRY * scale {
                let fine = central(name, i, h / 10.0)?;
                if (a[i] - fine).abs() < (a[i] - *num).abs() {
                    *num = fine;
                }
            }
        }
        out.push(group_error(name, a, &numeric));
    }
    Ok(out)
}

fn eval_forward(params: &ModelParams, track: bool) -> Forward<'_> {
    Forward::new(params, Mode::Eval, 0.0, ChaCha8Rng::seed_from_u64(0), track)
}

/// Size of the randomized model used by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub hidden: usize,
    pub batch: usize,
    pub tokens: usize,
    pub fusion_rank: usize,
    pub word_dim: usize,
    pub channels: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub share_diff_fc: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            batch: 4,
            tokens: 3,
            fusion_rank: 2,
            word_dim: 6,
            channels: 4,
            seed: 7,
            step: 1e-5,
            tolerance: 1e-4,
            share_diff_fc: true,
        }
    }
}

/// Randomized micro model and batch for gradient checking.
pub struct MicroProblem {
    pub params: ModelParams,
    pub references: Vec<RawExperts>,
    pub targets: Vec<RawExperts>,
    pub captions: Vec<Tensor>,
}

impl MicroProblem {
    pub fn new(cfg: &GradCheckConfig) -> Result<Self> {
        let model = ModelConfig {
            word_dim: cfg.word_dim,
            c: cfg.channels,
            c_inter: cfg.channels,
            hidden: cfg.hidden,
            fusion_rank: cfg.fusion_rank,
            share_diff_fc: cfg.share_diff_fc,
        };
        let mut params = model.init_params(cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        // Move every parameter off its structured init (zero biases, unit
        // batch-norm scale) so no term is trivially zero.
        let names: Vec<String> = params.names().map(ToString::to_string).collect();
        for name in names {
            let kind = params.kind(&name);
            for v in params.get_mut(&name)?.data_mut() {
                *v = match kind {
                    Some(ParamKind::Buffer) if name.ends_with("running_var") => {
                        rng.random_range(0.5..1.5)
                    }
                    Some(ParamKind::Buffer) => rng.random_range(-0.2..0.2),
                    _ if name.ends_with(".scale") => rng.random_range(0.5..1.5),
                    _ => *v + rng.random_range(-0.1..0.1),
                };
            }
        }
        let image = |rng: &mut ChaCha8Rng| -> Result<RawExperts> {
            let c = cfg.channels;
            let map: Vec<f32> = (0..49 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inter: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            pool_image(&map, &inter, (7, 7, c), &DEFAULT_SLICES)
        };
        let references = (0..cfg.batch).map(|_| image(&mut rng)).collect::<Result<_>>()?;
        let targets = (0..cfg.batch).map(|_| image(&mut rng)).collect::<Result<_>>()?;
        let captions = (0..cfg.batch)
            .map(|_| {
                let data = (0..cfg.tokens * cfg.word_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                Tensor::new(alloc::vec![cfg.tokens, cfg.word_dim], data)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            references,
            targets,
            captions,
        })
    }

    /// Joint loss of the micro batch.
    pub fn loss(&self, f: &mut Forward<'_>) -> Result<Var> {
        let r: Vec<&RawExperts> = self.references.iter().collect();
        let t: Vec<&RawExperts> = self.targets.iter().collect();
        let c: Vec<&Tensor> = self.captions.iter().collect();
        Ok(batch_losses(f, &r, &t, &c, 1.0, 1.0)?.total)
    }
}

/// Full joint model, dropout off, batch norm on running statistics.
/// Fails on the first group above tolerance.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<Vec<GroupError>> {
    let problem = MicroProblem::new(cfg)?;
    let groups = check_gradients(&problem.params, cfg.step, |f| problem.loss(f))?;
    if let Some(bad) = groups.iter().find(|g| !(g.relative <= cfg.tolerance)) {
        return Err(Error::GradCheck {
            group: bad.group.clone(),
            error: bad.relative,
            tolerance: cfg.tolerance,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::filled(&[2, 2], 0.3)).unwrap();
        let groups = check_gradients(&p, 1e-5, |f| {
            let _ = f.param("a.weight")?;
            Ok(f.graph.constant(Tensor::scalar(4.2)))
        })
        .unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].analytic_norm, 0.0);
        assert_eq!(groups[0].max_abs_diff, 0.0);
    }

    #[test]
    fn linear_fixture_is_exact() {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        crate::params::init_linear(&mut p, &mut rng, "lin", 3, 4).unwrap();
        let x = Tensor::new(alloc::vec![2, 4], (0..8).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let groups = check_gradients(&p, 1e-5, |f| {
            let xv = f.graph.constant(x.clone());
            let y = f.linear("lin", xv)?;
            Ok(f.graph.sum_all(y))
        })
        .unwrap();
        for g in groups {
            assert!(g.max_abs_diff < 1e-10, "{g:?}");
        }
    }
}
