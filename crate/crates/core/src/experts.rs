//! Image and text experts.
//!
//! Seven image views (global pool, intermediate layer, five 3x3 slices of
//! the 7x7 map) each get their own projection and context gating. Captions
//! are encoded once per token and pooled seven times, each pooling steered
//! by a learnable per-expert characterize embedding.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::Forward;
use crate::params::{self, ModelParams};
use crate::tensor::Tensor;
use crate::NUM_EXPERTS;

/// Rows `r0..r1`, columns `c0..c1` of the spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRegion {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl SliceRegion {
    pub const fn new(r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        Self { r0, r1, c0, c1 }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

/// Top, left, center, right, bottom on a 7x7 map.
pub const DEFAULT_SLICES: [SliceRegion; 5] = [
    SliceRegion::new(0, 3, 2, 5),
    SliceRegion::new(2, 5, 0, 3),
    SliceRegion::new(2, 5, 2, 5),
    SliceRegion::new(2, 5, 4, 7),
    SliceRegion::new(4, 7, 2, 5),
];

/// Index of each expert in a bank.
pub mod expert {
    pub const GLOBAL: usize = 0;
    pub const INTERMEDIATE: usize = 1;
    pub const FIRST_SLICE: usize = 2;
}

/// Pooled, pre-projection input of each image expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExperts {
    pub vectors: Vec<Vec<f64>>,
}

/// Average pools a `h x w x c` map (row-major) over the given region.
pub fn pool_region(map: &[f32], w: usize, c: usize, region: &SliceRegion) -> Vec<f64> {
    let mut acc = alloc::vec![0.0; c];
    for r in region.r0..region.r1 {
        for col in region.c0..region.c1 {
            let cell = &map[(r * w + col) * c..(r * w + col + 1) * c];
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a += v as f64;
            }
        }
    }
    let n = ((region.r1 - region.r0) * (region.c1 - region.c0)) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Global pool, intermediate vector, then one pool per slice.
pub fn pool_image(
    map: &[f32],
    inter: &[f32],
    (h, w, c): (usize, usize, usize),
    slices: &[SliceRegion],
) -> Result<RawExperts> {
    if map.len() != h * w * c {
        return Err(Error::Dimension {
            op: "pool_image",
            left: alloc::vec![h, w, c],
            right: alloc::vec![map.len()],
        });
    }
    if slices.len() != NUM_EXPERTS - 2 {
        return Err(crate::error::contract("slice table must hold five regions"));
    }
    for s in slices {
        if s.r1 > h || s.c1 > w || s.r0 >= s.r1 || s.c0 >= s.c1 {
            return Err(Error::SliceOutOfRange {
                r0: s.r0,
                r1: s.r1,
                c0: s.c0,
                c1: s.c1,
                h,
                w,
            });
        }
    }
    let mut vectors = Vec::with_capacity(NUM_EXPERTS);
    vectors.push(pool_region(map, w, c, &SliceRegion::new(0, h, 0, w)));
    vectors.push(inter.iter().map(|&v| v as f64).collect());
    for s in slices {
        vectors.push(pool_region(map, w, c, s));
    }
    Ok(RawExperts { vectors })
}

/// Per-expert embeddings for `n` items: `experts[e]` is `n x D`.
#[derive(Debug, Clone)]
pub struct Bank {
    pub experts: Vec<Var>,
}

impl Bank {
    pub fn rows(&self, f: &Forward<'_>) -> usize {
        f.graph.value(self.experts[0]).rows()
    }

    /// Selects rows of every expert.
    pub fn gather(&self, f: &mut Forward<'_>, idx: &[usize]) -> Result<Bank> {
        let experts = self
            .experts
            .iter()
            .map(|&v| f.graph.gather_rows(v, idx))
            .collect::<Result<_>>()?;
        Ok(Bank { experts })
    }

    /// Plain copies of each expert matrix.
    pub fn to_tensors(&self, f: &Forward<'_>) -> Vec<Tensor> {
        self.experts.iter().map(|&v| f.graph.value(v).clone()).collect()
    }
}

pub fn init_image_experts<R: Rng>(
    p: &mut ModelParams,
    rng: &mut R,
    c: usize,
    c_inter: usize,
    d: usize,
) -> Result<()> {
    for e in 0..NUM_EXPERTS {
        let inp = if e == expert::INTERMEDIATE { c_inter } else { c };
        let prefix = format!("experts.image.{e}");
        params::init_linear(p, rng, &format!("{prefix}.fc"), d, inp)?;
        params::init_batch_norm(p, &format!("{prefix}.bn"), d)?;
        params::init_linear(p, rng, &format!("{prefix}.gate"), d, d)?;
    }
    Ok(())
}

pub fn init_text_experts<R: Rng>(
    p: &mut ModelParams,
    rng: &mut R,
    word_dim: usize,
    d: usize,
) -> Result<()> {
    params::init_conv1d(p, rng, "experts.text.conv", word_dim, word_dim, 3)?;
    params::init_linear(p, rng, "experts.text.fc", d, 2 * word_dim)?;
    params::init_linear(p, rng, "experts.text.attn.fc1", d, d)?;
    params::init_linear(p, rng, "experts.text.attn.fc2", 1, d)?;
    p.insert(
        "experts.text.characterize",
        params::normal(rng, &[NUM_EXPERTS, d], 1.0 / crate::math::sqrt(d as f64)),
    )?;
    for e in 0..NUM_EXPERTS {
        let prefix = format!("experts.text.{e}");
        params::init_linear(p, rng, &format!("{prefix}.fc"), d, d)?;
        params::init_batch_norm(p, &format!("{prefix}.bn"), d)?;
        params::init_linear(p, rng, &format!("{prefix}.gate"), d, d)?;
    }
    Ok(())
}

/// Projects pooled image views into an expert bank; reference and target
/// images go through the same parameters.
pub fn image_bank(f: &mut Forward<'_>, raws: &[&RawExperts]) -> Result<Bank> {
    if raws.is_empty() {
        return Err(Error::EmptyInput("image_bank"));
    }
    let mut experts = Vec::with_capacity(NUM_EXPERTS);
    for e in 0..NUM_EXPERTS {
        let rows: Vec<Vec<f64>> = raws.iter().map(|r| r.vectors[e].clone()).collect();
        let x = f.graph.constant(Tensor::from_rows(&rows)?);
        let prefix = format!("experts.image.{e}");
        let h = f.hidden_block(&prefix, x)?;
        experts.push(f.context_gating(&format!("{prefix}.gate"), h)?);
    }
    Ok(Bank { experts })
}

/// Token embeddings `w = FC([Conv1d(w*) ; w*])`, `l x D`.
pub fn encode_caption(f: &mut Forward<'_>, words: &Tensor) -> Result<Var> {
    if words.is_empty() {
        return Err(Error::EmptyInput("encode_caption"));
    }
    let raw = f.graph.constant(words.clone());
    let conv = f.conv1d("experts.text.conv", raw)?;
    let cat = f.graph.concat_cols(&[conv, raw])?;
    f.linear("experts.text.fc", cat)
}

/// Attended pooling of `w (l x D)` for every expert at once.
///
/// Returns `alpha (E x l)` and `t* (E x D)`.
pub fn attend(f: &mut Forward<'_>, w: Var) -> Result<(Var, Var)> {
    let (l, d) = {
        let wv = f.graph.value(w);
        (wv.rows(), wv.cols())
    };
    if l == 0 {
        return Err(Error::EmptyInput("attend"));
    }
    let m = f.param("experts.text.characterize")?;
    if f.graph.value(m).cols() != d {
        return Err(Error::Dimension {
            op: "attend",
            left: f.graph.value(m).shape().to_vec(),
            right: f.graph.value(w).shape().to_vec(),
        });
    }
    let token_idx: Vec<usize> = (0..NUM_EXPERTS).flat_map(|_| 0..l).collect();
    let expert_idx: Vec<usize> = (0..NUM_EXPERTS).flat_map(|e| core::iter::repeat_n(e, l)).collect();
    let w_rep = f.graph.gather_rows(w, &token_idx)?;
    let m_rep = f.graph.gather_rows(m, &expert_idx)?;
    let modulated = f.graph.mul(m_rep, w_rep)?;
    let h = f.linear("experts.text.attn.fc1", modulated)?;
    let h = f.graph.relu(h);
    let h = f.dropout(h)?;
    let s = f.linear("experts.text.attn.fc2", h)?;
    let s = f.graph.reshape(s, &[NUM_EXPERTS, l])?;
    let alpha = f.graph.softmax_rows(s);
    let t_star = f.graph.matmul(alpha, w)?;
    Ok((alpha, t_star))
}

/// Text expert bank for a batch of captions (each `l_i x word_dim`).
pub fn text_bank(f: &mut Forward<'_>, captions: &[&Tensor]) -> Result<Bank> {
    if captions.is_empty() {
        return Err(Error::EmptyInput("text_bank"));
    }
    let mut pooled = Vec::with_capacity(captions.len());
    for words in captions {
        let w = encode_caption(f, words)?;
        pooled.push(attend(f, w)?.1);
    }
    let stacked = f.graph.concat_rows(&pooled)?;
    let n = captions.len();
    let mut experts = Vec::with_capacity(NUM_EXPERTS);
    for e in 0..NUM_EXPERTS {
        let idx: Vec<usize> = (0..n).map(|b| b * NUM_EXPERTS + e).collect();
        let t = f.graph.gather_rows(stacked, &idx)?;
        let prefix = format!("experts.text.{e}");
        let h = f.hidden_block(&prefix, t)?;
        experts.push(f.context_gating(&format!("{prefix}.gate"), h)?);
    }
    Ok(Bank { experts })
}

/// Inference-mode view of one caption's encoding.
#[derive(Debug, Clone)]
pub struct CaptionEncoding {
    /// Token embeddings, `l x D`.
    pub tokens: Tensor,
    /// Attention weights, `E x l`.
    pub alpha: Tensor,
    /// Attended vectors before the expert projection, `E x D`.
    pub attended: Tensor,
    /// Final text expert vectors, `E x D`.
    pub experts: Tensor,
}

pub fn encode_text(params: &ModelParams, words: &Tensor) -> Result<CaptionEncoding> {
    let mut f = Forward::inference(params);
    let w = encode_caption(&mut f, words)?;
    let (alpha, t_star) = attend(&mut f, w)?;
    let bank = text_bank(&mut f, &[words])?;
    let rows: Vec<Vec<f64>> = bank
        .experts
        .iter()
        .map(|&v| f.graph.value(v).data().to_vec())
        .collect();
    Ok(CaptionEncoding {
        tokens: f.graph.value(w).clone(),
        alpha: f.graph.value(alpha).clone(),
        attended: f.graph.value(t_star).clone(),
        experts: Tensor::from_rows(&rows)?,
    })
}

/// Inference-mode image bank for one image, `E x D`.
pub fn extract_image_experts(params: &ModelParams, raw: &RawExperts) -> Result<Tensor> {
    let mut f = Forward::inference(params);
    let bank = image_bank(&mut f, &[raw])?;
    let rows: Vec<Vec<f64>> = bank
        .experts
        .iter()
        .map(|&v| f.graph.value(v).data().to_vec())
        .collect();
    Tensor::from_rows(&rows)
}
