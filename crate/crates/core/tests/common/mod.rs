#![allow(dead_code)]

use ccnet_core::graph::{Graph, Var};
use ccnet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], amp: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(rng, n, amp)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[i] = sum_j w[i][j] x[j] + b[i]`.
pub fn matvec(w: &Tensor, x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    (0..w.rows())
        .map(|i| dot(w.row(i), x) + b.map_or(0.0, |b| b[i]))
        .collect()
}

/// Relative error of analytic gradients of `sum(out ⊙ probe)` against central
/// differences, over every input in `inputs`.
pub fn fd_relative_error<F>(inputs: &[Tensor], build: F, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let h = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let probe = random_tensor(&mut rng(seed), g.value(out).shape(), 1.0);
    let loss_of = |g: &mut Graph, out: Var| {
        let p = g.constant(probe.clone());
        let m = g.mul(out, p).unwrap();
        g.sum_all(m)
    };
    let loss = loss_of(&mut g, out);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let l = loss_of(&mut g, out);
        g.value(l).item()
    };
    let mut worst_diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        for i in 0..inputs[k].len() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= h;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
            worst_diff = worst_diff.max((numeric - analytic[i]).abs());
            scale = scale.max(numeric.abs()).max(analytic[i].abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        worst_diff / scale
    }
}

use ccnet_core::model::ModelConfig;
use ccnet_core::params::{ModelParams, ParamKind};

pub fn micro_config(hidden: usize, word_dim: usize, channels: usize, share_diff_fc: bool) -> ModelConfig {
    ModelConfig {
        word_dim,
        c: channels,
        c_inter: channels,
        hidden,
        fusion_rank: 2,
        share_diff_fc,
    }
}

/// Initialized parameters pushed off their structured init: nonzero biases,
/// non-unit batch-norm scales and running statistics.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = cfg.init_params(seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for name in names {
        let kind = p.kind(&name).unwrap();
        for v in p.get_mut(&name).unwrap().data_mut() {
            if name.ends_with(".running_var") {
                *v = r.random_range(0.5..1.5);
            } else if kind == ParamKind::Buffer {
                *v = r.random_range(-0.2..0.2);
            } else {
                *v += r.random_range(-0.1..0.1);
            }
        }
    }
    p
}

// Plain-loop reference layers over one row, independent of the graph engine.

pub fn lin(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = p.get(&format!("{prefix}.weight")).unwrap();
    let b = p.get(&format!("{prefix}.bias")).unwrap();
    matvec(w, x, Some(b.data()))
}

pub fn bn_eval(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = |s: &str| p.get(&format!("{prefix}.{s}")).unwrap().data().to_vec();
    let (scale, shift, mean, var) = (g("scale"), g("shift"), g("running_mean"), g("running_var"));
    (0..x.len())
        .map(|j| scale[j] * (x[j] - mean[j]) / (var[j] + 1e-5).sqrt() + shift[j])
        .collect()
}

pub fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

pub fn hidden_block(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
    relu(bn_eval(p, &format!("{prefix}.bn"), &lin(p, &format!("{prefix}.fc"), x)))
}

pub fn gating(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
    let z = lin(p, prefix, x);
    x.iter().zip(&z).map(|(a, b)| a * sigmoid(*b)).collect()
}

pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}
