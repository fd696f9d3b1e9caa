mod common;

use ccnet_core::composition::{compose, composition_scores, mutan_fusion, score_composition};
use ccnet_core::correction::{
    correction_scores, correction_scores_direct, difference_embed, score_correction,
};
use ccnet_core::experts::Bank;
use ccnet_core::graph::batch_softmax_loss;
use ccnet_core::nn::Forward;
use ccnet_core::params::ModelParams;
use ccnet_core::tensor::Tensor;
use ccnet_core::NUM_EXPERTS;
use common::*;
use rand::Rng;

const D: usize = 8;

fn fusion(p: &ModelParams, e: usize, x: &[f64], t: &[f64]) -> Vec<f64> {
    let mut f = Forward::inference(p);
    let xv = f.graph.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
    let tv = f.graph.constant(Tensor::new(vec![1, t.len()], t.to_vec()).unwrap());
    let y = mutan_fusion(&mut f, e, xv, tv).unwrap();
    f.graph.value(y).data().to_vec()
}

fn fusion_oracle(p: &ModelParams, e: usize, x: &[f64], t: &[f64]) -> Vec<f64> {
    let g = |s: &str| p.get(&format!("composition.{e}.fusion.{s}")).unwrap();
    let ux = matvec(g("u"), x, None);
    let vt = matvec(g("v"), t, None);
    let prod: Vec<f64> = ux.iter().zip(&vt).map(|(a, b)| a * b).collect();
    matvec(g("out"), &prod, None)
}

#[test]
fn fusion_matches_explicit_bilinear_form() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(31);
    for trial in 0..100 {
        let p = random_model(&cfg, 3000 + trial);
        let e = trial as usize % NUM_EXPERTS;
        let (x, t) = (uniform_vec(&mut r, D, 1.0), uniform_vec(&mut r, D, 1.0));
        assert!(max_abs_diff(&fusion(&p, e, &x, &t), &fusion_oracle(&p, e, &x, &t)) <= 1e-12);
    }
}

#[test]
fn fusion_hand_sized_case() {
    // D = 2, R = 1: U = [[1,2],[0,1]], V = [[1,0],[1,1]], out = [[1,1],[2,-1]].
    let mut p = ModelParams::new();
    p.insert("composition.0.fusion.u", Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap()).unwrap();
    p.insert("composition.0.fusion.v", Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
    p.insert("composition.0.fusion.out", Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, -1.0]).unwrap()).unwrap();
    // Ux = [1+4, 2] = [5, 2]; Vt = [3, 3+(-1)] = [3, 2]; prod = [15, 4]; out = [19, 26]
    let y = fusion(&p, 0, &[1.0, 2.0], &[3.0, -1.0]);
    assert!(max_abs_diff(&y, &[19.0, 26.0]) <= 1e-12);
}

#[test]
fn fusion_is_bilinear_and_vanishes_with_zero_factors() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(32);
    let p = random_model(&cfg, 7);
    for _ in 0..100 {
        let (x, t) = (uniform_vec(&mut r, D, 1.0), uniform_vec(&mut r, D, 1.0));
        let a: f64 = r.random_range(-3.0..3.0);
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let at: Vec<f64> = t.iter().map(|v| a * v).collect();
        let base: Vec<f64> = fusion(&p, 2, &x, &t).iter().map(|v| a * v).collect();
        assert!(max_abs_diff(&fusion(&p, 2, &ax, &t), &base) <= 1e-9);
        assert!(max_abs_diff(&fusion(&p, 2, &x, &at), &base) <= 1e-9);
    }
    let mut z = p.clone();
    for s in ["u", "v", "out"] {
        z.get_mut(&format!("composition.3.fusion.{s}")).unwrap().data_mut().fill(0.0);
    }
    assert!(fusion(&z, 3, &uniform_vec(&mut r, D, 1.0), &uniform_vec(&mut r, D, 1.0))
        .iter()
        .all(|&v| v == 0.0));
}

fn bank(f: &mut Forward<'_>, rows: &[Vec<Vec<f64>>]) -> Bank {
    // rows[e][i] is item i of expert e
    Bank {
        experts: rows
            .iter()
            .map(|m| f.graph.constant(Tensor::from_rows(m).unwrap()))
            .collect(),
    }
}

fn random_bank<R: Rng>(r: &mut R, n: usize) -> Vec<Vec<Vec<f64>>> {
    (0..NUM_EXPERTS)
        .map(|_| (0..n).map(|_| uniform_vec(r, D, 1.0)).collect())
        .collect()
}

fn composed(p: &ModelParams, x: &[Vec<Vec<f64>>], t: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let mut f = Forward::inference(p);
    let xb = bank(&mut f, x);
    let tb = bank(&mut f, t);
    let c = compose(&mut f, &xb, &tb).unwrap();
    let n = x[0].len();
    c.experts
        .iter()
        .map(|&v| (0..n).map(|i| f.graph.value(v).row(i).to_vec()).collect())
        .collect()
}

fn compose_oracle(p: &ModelParams, e: usize, x: &[f64], t: &[f64]) -> Vec<f64> {
    let fused = fusion_oracle(p, e, x, t);
    let z = concat(&[x, t, &fused]);
    let gate_logit = lin(p, "composition.gate.out", &hidden_block(p, "composition.gate", &z));
    let res = lin(p, "composition.res.out", &hidden_block(p, "composition.res", &z));
    let w_g = p.get("composition.w_g").unwrap().item();
    let w_r = p.get("composition.w_r").unwrap().item();
    (0..x.len())
        .map(|i| w_g * sigmoid(gate_logit[i]) * x[i] + w_r * res[i])
        .collect()
}

#[test]
fn compose_matches_primitive_oracle() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(33);
    for trial in 0..100 {
        let p = random_model(&cfg, 4000 + trial);
        let (x, t) = (random_bank(&mut r, 2), random_bank(&mut r, 2));
        let c = composed(&p, &x, &t);
        for e in 0..NUM_EXPERTS {
            for i in 0..2 {
                let want = compose_oracle(&p, e, &x[e][i], &t[e][i]);
                assert!(max_abs_diff(&c[e][i], &want) <= 1e-12);
            }
        }
    }
}

#[test]
fn pure_gate_never_exceeds_reference() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(34);
    for trial in 0..50 {
        let mut p = random_model(&cfg, trial);
        *p.get_mut("composition.w_g").unwrap() = Tensor::scalar(1.0);
        *p.get_mut("composition.w_r").unwrap() = Tensor::scalar(0.0);
        let (x, t) = (random_bank(&mut r, 3), random_bank(&mut r, 3));
        let c = composed(&p, &x, &t);
        for e in 0..NUM_EXPERTS {
            for i in 0..3 {
                for (ci, xi) in c[e][i].iter().zip(&x[e][i]) {
                    assert!(ci.abs() <= xi.abs());
                }
            }
        }
    }
}

#[test]
fn switched_off_gate_ignores_gate_stack() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(35);
    let mut p = random_model(&cfg, 3);
    *p.get_mut("composition.w_g").unwrap() = Tensor::scalar(0.0);
    let (x, t) = (random_bank(&mut r, 2), random_bank(&mut r, 2));
    let before = composed(&p, &x, &t);
    for name in ["composition.gate.fc.weight", "composition.gate.out.bias"] {
        for v in p.get_mut(name).unwrap().data_mut() {
            *v += r.random_range(-1.0..1.0);
        }
    }
    assert_eq!(composed(&p, &x, &t), before);
}

#[test]
fn saturated_gate_transports_reference() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(36);
    let mut p = random_model(&cfg, 4);
    *p.get_mut("composition.w_g").unwrap() = Tensor::scalar(1.0);
    *p.get_mut("composition.w_r").unwrap() = Tensor::scalar(0.0);
    p.get_mut("composition.gate.out.weight").unwrap().data_mut().fill(0.0);
    p.get_mut("composition.gate.out.bias").unwrap().data_mut().fill(60.0);
    let (x, t) = (random_bank(&mut r, 1), random_bank(&mut r, 1));
    let targets = random_bank(&mut r, 5);
    let mut f = Forward::inference(&p);
    let (xb, tb, gb) = (bank(&mut f, &x), bank(&mut f, &t), bank(&mut f, &targets));
    let c = compose(&mut f, &xb, &tb).unwrap();
    let s = composition_scores(&mut f, &c, &gb).unwrap();
    let want: Vec<f64> = (0..5)
        .map(|j| (0..NUM_EXPERTS).map(|e| dot(&x[e][0], &targets[e][j])).sum())
        .collect();
    assert!(max_abs_diff(f.graph.value(s).data(), &want) <= 1e-12);
}

#[test]
fn composition_scores_are_expert_summed_dots() {
    let mut r = rng(37);
    for _ in 0..100 {
        let (c, x) = (random_bank(&mut r, 3), random_bank(&mut r, 4));
        let p = ModelParams::new();
        let mut f = Forward::inference(&p);
        let (cb, xb) = (bank(&mut f, &c), bank(&mut f, &x));
        let s = composition_scores(&mut f, &cb, &xb).unwrap();
        let mut want = Vec::new();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for e in 0..NUM_EXPERTS {
                    for k in 0..D {
                        acc += c[e][i][k] * x[e][j][k];
                    }
                }
                want.push(acc);
            }
        }
        assert!(max_abs_diff(f.graph.value(s).data(), &want) <= 1e-12);
        // single-query matrix form agrees
        let ci = Tensor::from_rows(&(0..NUM_EXPERTS).map(|e| c[e][1].clone()).collect::<Vec<_>>()).unwrap();
        let xj = Tensor::from_rows(&(0..NUM_EXPERTS).map(|e| x[e][2].clone()).collect::<Vec<_>>()).unwrap();
        assert!((score_composition(&ci, &xj).unwrap() - want[4 + 2]).abs() <= 1e-12);
    }
}

#[test]
fn score_examples() {
    let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(score_composition(&a, &b).unwrap(), 0.0);
    let mut c = vec![0.0; NUM_EXPERTS * 2];
    c[0] = 1.0;
    c[1] = 2.0;
    let c = Tensor::new(vec![NUM_EXPERTS, 2], c).unwrap();
    assert_eq!(score_composition(&c, &c).unwrap(), 5.0);
    let d = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let t = Tensor::new(vec![1, 2], vec![3.0, 7.0]).unwrap();
    assert_eq!(score_correction(&d, &t).unwrap(), 6.0);
    assert_eq!(score_correction(&Tensor::zeros(&[NUM_EXPERTS, 2]), &c).unwrap(), 0.0);
    assert!(score_composition(&a, &c).is_err());
}

fn loss_oracle(s: &[f64], b: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let row = &s[i * b..(i + 1) * b];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[i].exp() / z).ln();
    }
    total / b as f64
}

#[test]
fn batch_loss_matches_row_oracle() {
    let mut r = rng(38);
    for _ in 0..100 {
        let s = uniform_vec(&mut r, 16, 4.0);
        let l = batch_softmax_loss(&Tensor::new(vec![4, 4], s.clone()).unwrap()).unwrap();
        assert!((l - loss_oracle(&s, 4)).abs() <= 1e-12);
    }
}

#[test]
fn batch_loss_analytic_cases() {
    let uniform = |b: usize| batch_softmax_loss(&Tensor::filled(&[b, b], 0.3)).unwrap();
    assert!((uniform(32) - 3.465736).abs() <= 1e-6);
    assert!((uniform(8) - 2.079442).abs() <= 1e-6);
    let mut s = vec![0.0; 16];
    for i in 0..4 {
        s[i * 5] = 20.0;
    }
    let l = batch_softmax_loss(&Tensor::new(vec![4, 4], s).unwrap()).unwrap();
    assert!(l < 1e-6 && (l - 3.0 * (-20.0f64).exp()).abs() < 1e-12);
    assert!(batch_softmax_loss(&Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn both_loss_entry_points_agree() {
    let mut r = rng(39);
    for _ in 0..20 {
        let s = random_tensor(&mut r, &[4, 4], 3.0);
        let p = ModelParams::new();
        let mut f = Forward::inference(&p);
        let v = f.graph.constant(s.clone());
        let l = f.graph.batch_softmax_loss(v).unwrap();
        assert!((f.graph.value(l).item() - batch_softmax_loss(&s).unwrap()).abs() <= 1e-15);
    }
}

fn diff_embed(p: &ModelParams, x_ref: &[f64], x_trg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut f = Forward::inference(p);
    let r = f.graph.constant(Tensor::new(vec![1, D], x_ref.to_vec()).unwrap());
    let t = f.graph.constant(Tensor::new(vec![1, D], x_trg.to_vec()).unwrap());
    let d = difference_embed(&mut f, r, t).unwrap();
    (
        f.graph.value(d.diff).data().to_vec(),
        f.graph.value(d.embedding).data().to_vec(),
    )
}

fn diff_oracle(p: &ModelParams, x_ref: &[f64], x_trg: &[f64], shared: bool) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = x_ref.iter().zip(x_trg).map(|(a, b)| a * b).collect();
    let (tf, rf) = if shared {
        ("correction.diff", "correction.diff")
    } else {
        ("correction.diff_trg", "correction.diff_ref")
    };
    let trg_bar = lin(p, tf, &concat(&[&h, x_trg]));
    let ref_bar = lin(p, rf, &concat(&[&h, x_ref]));
    let diff: Vec<f64> = trg_bar.iter().zip(&ref_bar).map(|(a, b)| a - b).collect();
    let z = concat(&[x_ref, x_trg, &diff]);
    let out = lin(p, "correction.out.fc2", &relu(lin(p, "correction.out.fc1", &z)));
    (diff, out)
}

#[test]
fn difference_embedding_matches_primitive_oracle() {
    let mut r = rng(40);
    for shared in [true, false] {
        let cfg = micro_config(D, 5, 4, shared);
        for trial in 0..100 {
            let p = random_model(&cfg, 5000 + trial);
            let (a, b) = (uniform_vec(&mut r, D, 1.0), uniform_vec(&mut r, D, 1.0));
            let (diff, emb) = diff_embed(&p, &a, &b);
            let (want_diff, want_emb) = diff_oracle(&p, &a, &b, shared);
            assert!(max_abs_diff(&diff, &want_diff) <= 1e-12);
            assert!(max_abs_diff(&emb, &want_emb) <= 1e-12);
        }
    }
}

#[test]
fn shared_difference_is_antisymmetric_and_null_on_identity() {
    let cfg = micro_config(D, 5, 4, true);
    let mut r = rng(41);
    for trial in 0..100 {
        let p = random_model(&cfg, trial);
        let (a, b) = (uniform_vec(&mut r, D, 2.0), uniform_vec(&mut r, D, 2.0));
        let (same, _) = diff_embed(&p, &a, &a);
        assert!(same.iter().all(|&v| v == 0.0));
        let (ab, _) = diff_embed(&p, &a, &b);
        let (ba, _) = diff_embed(&p, &b, &a);
        let neg: Vec<f64> = ba.iter().map(|v| -v).collect();
        assert!(max_abs_diff(&ab, &neg) <= 1e-12);
    }
}

#[test]
fn correction_scores_match_summation_oracle() {
    let mut r = rng(42);
    for shared in [true, false] {
        let cfg = micro_config(D, 5, 4, shared);
        for trial in 0..20 {
            let p = random_model(&cfg, 6000 + trial);
            let (x, y, t) = (random_bank(&mut r, 2), random_bank(&mut r, 3), random_bank(&mut r, 2));
            let mut f = Forward::inference(&p);
            let (xb, yb, tb) = (bank(&mut f, &x), bank(&mut f, &y), bank(&mut f, &t));
            let fast = correction_scores(&mut f, &xb, &yb, &tb).unwrap();
            let slow = correction_scores_direct(&mut f, &xb, &yb, &tb).unwrap();
            let mut want = Vec::new();
            for i in 0..2 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for e in 0..NUM_EXPERTS {
                        s += dot(&diff_oracle(&p, &x[e][i], &y[e][j], shared).1, &t[e][i]);
                    }
                    want.push(s);
                }
            }
            assert!(max_abs_diff(f.graph.value(fast).data(), &want) <= 1e-10);
            assert!(max_abs_diff(f.graph.value(slow).data(), &want) <= 1e-12);
        }
    }
}
