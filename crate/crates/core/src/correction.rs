//! Inverse pathway: (reference, target) -> caption.
//!
//! The reference/target difference is embedded per expert and matched
//! against the text experts. With the shared difference projection,
//! identical images give an exactly zero difference and swapping the two
//! images negates it.

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

pub const SHARED_DIFF: &str = "correction.diff";
pub const TARGET_DIFF: &str = "correction.diff_trg";
pub const REFERENCE_DIFF: &str = "correction.diff_ref";

pub fn init_correction<R: Rng>(
    p: &mut ModelParams,
    rng: &mut R,
    d: usize,
    share_diff_fc: bool,
) -> Result<()> {
    if share_diff_fc {
        params::init_linear(p, rng, SHARED_DIFF, d, 2 * d)?;
    } else {
        params::init_linear(p, rng, TARGET_DIFF, d, 2 * d)?;
        params::init_linear(p, rng, REFERENCE_DIFF, d, 2 * d)?;
    }
    params::init_linear(p, rng, "correction.out.fc1", d, 3 * d)?;
    params::init_linear(p, rng, "correction.out.fc2", d, d)
}

/// Whether `params` hold the shared difference projection.
pub fn shares_diff_fc(params: &ModelParams) -> bool {
    params.contains(&format!("{SHARED_DIFF}.weight"))
}

/// Output of [`difference_embed`] on matching rows of two image matrices.
#[derive(Debug, Clone, Copy)]
pub struct Difference {
    /// `x̄^trg - x̄^ref`.
    pub diff: Var,
    /// Final difference embedding `d`.
    pub embedding: Var,
}

/// Row-wise difference embedding of `reference` and `target` (both `n x D`).
pub fn difference_embed(f: &mut Forward<'_>, reference: Var, target: Var) -> Result<Difference> {
    let (rv, tv) = (f.graph.value(reference), f.graph.value(target));
    if rv.shape() != tv.shape() {
        return Err(Error::Dimension {
            op: "difference_embed",
            left: rv.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    let (trg_fc, ref_fc) = if shares_diff_fc(f.params()) {
        (SHARED_DIFF, SHARED_DIFF)
    } else {
        (TARGET_DIFF, REFERENCE_DIFF)
    };
    let joint = f.graph.mul(target, reference)?;
    let trg_in = f.graph.concat_cols(&[joint, target])?;
    let ref_in = f.graph.concat_cols(&[joint, reference])?;
    let trg_bar = f.linear(trg_fc, trg_in)?;
    let ref_bar = f.linear(ref_fc, ref_in)?;
    let diff = f.graph.sub(trg_bar, ref_bar)?;
    let z = f.graph.concat_cols(&[reference, target, diff])?;
    let h = f.linear("correction.out.fc1", z)?;
    let h = f.graph.relu(h);
    let h = f.dropout(h)?;
    let embedding = f.linear("correction.out.fc2", h)?;
    Ok(Difference { diff, embedding })
}

fn check_banks(f: &Forward<'_>, reference: &Bank, target: &Bank, text: &Bank) -> Result<(usize, usize)> {
    if reference.experts.len() != NUM_EXPERTS
        || target.experts.len() != NUM_EXPERTS
        || text.experts.len() != NUM_EXPERTS
    {
        return Err(contract("expert count mismatch"));
    }
    let nq = reference.rows(f);
    if text.rows(f) != nq {
        return Err(contract("reference and text rows must align"));
    }
    Ok((nq, target.rows(f)))
}

/// Sums the `E` consecutive blocks of `pairs` rows of a column and shapes
/// the result `nq x nc`.
fn sum_expert_blocks(f: &mut Forward<'_>, per_row: Var, nq: usize, nc: usize) -> Result<Var> {
    let pairs = nq * nc;
    let mut total = f.graph.slice_rows(per_row, 0, pairs)?;
    for e in 1..NUM_EXPERTS {
        let s = f.graph.slice_rows(per_row, e * pairs, pairs)?;
        total = f.graph.add(total, s)?;
    }
    f.graph.reshape(total, &[nq, nc])
}

/// `scores[i][j] = sum_e d_e(reference_i, target_j) · t_e[i]`.
///
/// `reference` and `text` are row-aligned queries; `target` holds the
/// candidates. Every linear map that touches only one image is applied per
/// image and broadcast over the pair grid, and the output projection is
/// moved onto the text side (`fc2(h) · t = h · (W2^T t) + b2 · t`), so a
/// pair costs `O(D)` per expert with the shared difference projection.
/// [`correction_scores_direct`] evaluates the same function pair by pair.
pub fn correction_scores(
    f: &mut Forward<'_>,
    reference: &Bank,
    target: &Bank,
    text: &Bank,
) -> Result<Var> {
    let (nq, nc) = check_banks(f, reference, target, text)?;
    let d = f.graph.value(reference.experts[0]).cols();
    let r = f.graph.concat_rows(&reference.experts)?;
    let t = f.graph.concat_rows(&target.experts)?;
    let txt = f.graph.concat_rows(&text.experts)?;

    let shared = shares_diff_fc(f.params());
    let (trg_fc, ref_fc) = if shared {
        (SHARED_DIFF, SHARED_DIFF)
    } else {
        (TARGET_DIFF, REFERENCE_DIFF)
    };
    let wt = f.param(&format!("{trg_fc}.weight"))?;
    let bt = f.param(&format!("{trg_fc}.bias"))?;
    let wr = f.param(&format!("{ref_fc}.weight"))?;
    let br = f.param(&format!("{ref_fc}.bias"))?;
    let wt_x = f.graph.slice_cols(wt, d, d)?;
    let wr_x = f.graph.slice_cols(wr, d, d)?;
    // x̄ without the Hadamard half.
    let ut = f.graph.linear(t, wt_x, Some(bt))?;
    let ur = f.graph.linear(r, wr_x, Some(br))?;

    let w1 = f.param("correction.out.fc1.weight")?;
    let b1 = f.param("correction.out.fc1.bias")?;
    let w1_ref = f.graph.slice_cols(w1, 0, d)?;
    let w1_trg = f.graph.slice_cols(w1, d, d)?;
    let w1_diff = f.graph.slice_cols(w1, 2 * d, d)?;
    let pr = f.graph.linear(r, w1_ref, Some(b1))?;
    let pd = f.graph.linear(ur, w1_diff, None)?;
    let per_ref = f.graph.sub(pr, pd)?;
    let qt = f.graph.linear(t, w1_trg, None)?;
    let qd = f.graph.linear(ut, w1_diff, None)?;
    let per_trg = f.graph.add(qt, qd)?;

    // Pair rows ordered (expert, query, candidate).
    let mut ri = Vec::with_capacity(NUM_EXPERTS * nq * nc);
    let mut tj = Vec::with_capacity(NUM_EXPERTS * nq * nc);
    for e in 0..NUM_EXPERTS {
        for i in 0..nq {
            for j in 0..nc {
                ri.push(e * nq + i);
                tj.push(e * nc + j);
            }
        }
    }
    let a = f.graph.gather_rows(per_ref, &ri)?;
    let b = f.graph.gather_rows(per_trg, &tj)?;
    let mut h = f.graph.add(a, b)?;
    if !shared {
        let wt_h = f.graph.slice_cols(wt, 0, d)?;
        let wr_h = f.graph.slice_cols(wr, 0, d)?;
        let w_h = f.graph.sub(wt_h, wr_h)?;
        let tg = f.graph.gather_rows(t, &tj)?;
        let rg = f.graph.gather_rows(r, &ri)?;
        let joint = f.graph.mul(tg, rg)?;
        let jd = f.graph.linear(joint, w_h, None)?;
        let jh = f.graph.linear(jd, w1_diff, None)?;
        h = f.graph.add(h, jh)?;
    }
    let h = f.graph.relu(h);
    let h = f.dropout(h)?;

    let w2 = f.param("correction.out.fc2.weight")?;
    let b2 = f.param("correction.out.fc2.bias")?;
    let tau = f.graph.matmul(txt, w2)?;
    let b2_row = f.graph.reshape(b2, &[1, d])?;
    let offset = f.graph.linear(txt, b2_row, None)?;
    let tau = f.graph.gather_rows(tau, &ri)?;
    let offset = f.graph.gather_rows(offset, &ri)?;
    let prod = f.graph.mul(h, tau)?;
    let per_row = f.graph.row_sum(prod);
    let per_row = f.graph.add(per_row, offset)?;
    sum_expert_blocks(f, per_row, nq, nc)
}

/// [`correction_scores`] computed literally: every (query, candidate,
/// expert) triple goes through [`difference_embed`].
pub fn correction_scores_direct(
    f: &mut Forward<'_>,
    reference: &Bank,
    target: &Bank,
    text: &Bank,
) -> Result<Var> {
    let (nq, nc) = check_banks(f, reference, target, text)?;
    let qi: Vec<usize> = (0..nq).flat_map(|i| core::iter::repeat_n(i, nc)).collect();
    let cj: Vec<usize> = (0..nq).flat_map(|_| 0..nc).collect();
    let mut refs = Vec::with_capacity(NUM_EXPERTS);
    let mut trgs = Vec::with_capacity(NUM_EXPERTS);
    let mut txts = Vec::with_capacity(NUM_EXPERTS);
    for e in 0..NUM_EXPERTS {
        refs.push(f.graph.gather_rows(reference.experts[e], &qi)?);
        trgs.push(f.graph.gather_rows(target.experts[e], &cj)?);
        txts.push(f.graph.gather_rows(text.experts[e], &qi)?);
    }
    let r = f.graph.concat_rows(&refs)?;
    let t = f.graph.concat_rows(&trgs)?;
    let txt = f.graph.concat_rows(&txts)?;
    let d = difference_embed(f, r, t)?.embedding;
    let prod = f.graph.mul(d, txt)?;
    let per_row = f.graph.row_sum(prod);
    sum_expert_blocks(f, per_row, nq, nc)
}

/// `s^c = sum_e d_e · t_e` on plain `E x D` matrices.
pub fn score_correction(diff: &Tensor, text: &Tensor) -> Result<f64> {
    crate::composition::score_composition(diff, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert_eq!(
            score_correction(&Tensor::zeros(&[NUM_EXPERTS, 3]), &Tensor::filled(&[NUM_EXPERTS, 3], 2.0))
                .unwrap(),
            0.0
        );
        let d = Tensor::new(alloc::vec![1, 2], alloc::vec![2.0, 0.0]).unwrap();
        let t = Tensor::new(alloc::vec![1, 2], alloc::vec![3.0, 7.0]).unwrap();
        assert_eq!(score_correction(&d, &t).unwrap(), 6.0);
    }

    fn random_bank<R: Rng>(f: &mut Forward<'_>, rng: &mut R, n: usize, d: usize) -> Bank {
        Bank {
            experts: (0..NUM_EXPERTS)
                .map(|_| f.graph.variable(params::normal(rng, &[n, d], 1.0)))
                .collect(),
        }
    }

    #[test]
    fn factorized_scores_match_direct() {
        use rand::SeedableRng;
        for share in [true, false] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut p = ModelParams::new();
            init_correction(&mut p, &mut rng, 5, share).unwrap();
            let mut f = Forward::inference(&p);
            let r = random_bank(&mut f, &mut rng, 3, 5);
            let t = random_bank(&mut f, &mut rng, 4, 5);
            let x = random_bank(&mut f, &mut rng, 3, 5);
            let fast = correction_scores(&mut f, &r, &t, &x).unwrap();
            let slow = correction_scores_direct(&mut f, &r, &t, &x).unwrap();
            let (a, b) = (f.graph.value(fast), f.graph.value(slow));
            assert_eq!(a.shape(), &[3, 4]);
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v} (share {share})");
            }
        }
    }
}
