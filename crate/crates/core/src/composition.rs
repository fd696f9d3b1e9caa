//! Forward pathway: (reference, caption) -> composed target embedding.
//!
//! Per expert, the caption vector is fused with the reference by a
//! rank-constrained bilinear map, then a sigmoid gate on the reference and a
//! free residual are mixed by two learnable scalars. The score of a
//! candidate is the sum over experts of composed-vs-candidate dot products.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::experts::Bank;
use crate::graph::Var;
use crate::nn::Forward;
use crate::params::{self, ModelParams};
use crate::tensor::Tensor;
use crate::NUM_EXPERTS;

pub fn init_composition<R: Rng>(
    p: &mut ModelParams,
    rng: &mut R,
    d: usize,
    rank: usize,
) -> Result<()> {
    if rank == 0 {
        return Err(contract("fusion rank must be positive"));
    }
    for e in 0..NUM_EXPERTS {
        let prefix = format!("composition.{e}.fusion");
        p.insert(&format!("{prefix}.u"), params::fan_in_uniform(rng, &[rank * d, d], d))?;
        p.insert(&format!("{prefix}.v"), params::fan_in_uniform(rng, &[rank * d, d], d))?;
        p.insert(
            &format!("{prefix}.out"),
            params::fan_in_uniform(rng, &[d, rank * d], rank * d),
        )?;
    }
    for branch in ["gate", "res"] {
        params::init_linear(p, rng, &format!("composition.{branch}.fc"), d, 3 * d)?;
        params::init_batch_norm(p, &format!("composition.{branch}.bn"), d)?;
        params::init_linear(p, rng, &format!("composition.{branch}.out"), d, d)?;
    }
    p.insert("composition.w_g", Tensor::scalar(1.0))?;
    p.insert("composition.w_r", Tensor::scalar(1.0))
}

/// `W_o [ (U_1 x) ⊙ (V_1 t) ; ... ; (U_R x) ⊙ (V_R t) ]` for expert `e`.
/// Bilinear: linear in `x` for fixed `t` and vice versa.
pub fn mutan_fusion(f: &mut Forward<'_>, e: usize, x: Var, t: Var) -> Result<Var> {
    let (xv, tv) = (f.graph.value(x), f.graph.value(t));
    if xv.shape() != tv.shape() {
        return Err(Error::Dimension {
            op: "mutan_fusion",
            left: xv.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    let prefix = format!("composition.{e}.fusion");
    let u = f.param(&format!("{prefix}.u"))?;
    let v = f.param(&format!("{prefix}.v"))?;
    let out = f.param(&format!("{prefix}.out"))?;
    let ux = f.graph.linear(x, u, None)?;
    let vt = f.graph.linear(t, v, None)?;
    let prod = f.graph.mul(ux, vt)?;
    f.graph.linear(prod, out, None)
}

/// Two-layer stack `out(dropout(relu(bn(fc(z)))))`.
fn branch(f: &mut Forward<'_>, name: &str, z: Var) -> Result<Var> {
    let prefix = format!("composition.{name}");
    let h = f.hidden_block(&prefix, z)?;
    f.linear(&format!("{prefix}.out"), h)
}

/// Composed embedding `c_e = w_g f_gate + w_r f_res` for every expert.
///
/// `reference` and `text` must have the same number of rows; row `i` of
/// the result composes reference `i` with caption `i`.
pub fn compose(f: &mut Forward<'_>, reference: &Bank, text: &Bank) -> Result<Bank> {
    if reference.experts.len() != NUM_EXPERTS || text.experts.len() != NUM_EXPERTS {
        return Err(contract("compose needs full expert banks"));
    }
    let n = reference.rows(f);
    if text.rows(f) != n {
        return Err(Error::Dimension {
            op: "compose",
            left: f.graph.value(reference.experts[0]).shape().to_vec(),
            right: f.graph.value(text.experts[0]).shape().to_vec(),
        });
    }
    let mut inputs = Vec::with_capacity(NUM_EXPERTS);
    for e in 0..NUM_EXPERTS {
        let (x, t) = (reference.experts[e], text.experts[e]);
        let fused = mutan_fusion(f, e, x, t)?;
        inputs.push(f.graph.concat_cols(&[x, t, fused])?);
    }
    // Shared gate and residual stacks run once over all experts' rows.
    let z = f.graph.concat_rows(&inputs)?;
    let x_all = f.graph.concat_rows(&reference.experts)?;
    let gate_logits = branch(f, "gate", z)?;
    let gate = f.graph.sigmoid(gate_logits);
    let gated = f.graph.mul(gate, x_all)?;
    let residual = branch(f, "res", z)?;
    let w_g = f.param("composition.w_g")?;
    let w_r = f.param("composition.w_r")?;
    let a = f.graph.scale_by(gated, w_g)?;
    let b = f.graph.scale_by(residual, w_r)?;
    let c = f.graph.add(a, b)?;
    let experts = (0..NUM_EXPERTS)
        .map(|e| f.graph.slice_rows(c, e * n, n))
        .collect::<Result<_>>()?;
    Ok(Bank { experts })
}

/// `scores[i][j] = sum_e c_e[i] · x_e[j]`.
pub fn composition_scores(f: &mut Forward<'_>, composed: &Bank, target: &Bank) -> Result<Var> {
    if composed.experts.len() != target.experts.len() {
        return Err(contract("expert count mismatch"));
    }
    let mut total: Option<Var> = None;
    for (&c, &x) in composed.experts.iter().zip(&target.experts) {
        let s = f.graph.matmul_nt(c, x)?;
        total = Some(match total {
            Some(t) => f.graph.add(t, s)?,
            None => s,
        });
    }
    total.ok_or(Error::EmptyInput("composition_scores"))
}

/// `s^r = sum_e c_e · x^trg_e` on plain `E x D` matrices.
pub fn score_composition(composed: &Tensor, target: &Tensor) -> Result<f64> {
    if composed.rows() != target.rows() {
        return Err(contract("expert count mismatch"));
    }
    if composed.cols() != target.cols() {
        return Err(Error::Dimension {
            op: "score_composition",
            left: composed.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok((0..composed.rows())
        .map(|e| crate::math::dot(composed.row(e), target.row(e)))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let c = Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, 0.0]).unwrap();
        let x = Tensor::new(alloc::vec![1, 2], alloc::vec![0.0, 1.0]).unwrap();
        assert_eq!(score_composition(&c, &x).unwrap(), 0.0);

        let mut c = Tensor::zeros(&[NUM_EXPERTS, 2]);
        c.data_mut()[..2].copy_from_slice(&[1.0, 2.0]);
        assert_eq!(score_composition(&c, &c).unwrap(), 5.0);

        let short = Tensor::zeros(&[3, 2]);
        assert!(matches!(score_composition(&c, &short), Err(Error::Contract(_))));
    }
}
