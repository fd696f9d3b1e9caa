//! The combined network: shared experts, both pathways, joint objective.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{self, compose, composition_scores};
use crate::correction::{self, correction_scores};
use crate::error::{contract, Error, Result};
use crate::experts::{self, image_bank, text_bank, Bank, RawExperts};
use crate::graph::Var;
use crate::nn::Forward;
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::NUM_EXPERTS;

/// Widths that determine every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    /// Channels of the spatial map.
    pub c: usize,
    /// Width of the intermediate-layer vector.
    pub c_inter: usize,
    /// Hidden dimension `D`.
    pub hidden: usize,
    pub fusion_rank: usize,
    pub share_diff_fc: bool,
}

impl ModelConfig {
    /// Fresh parameters: fan-in uniform weights, zero biases, unit batch-norm
    /// scale, characterize embeddings `N(0, 1/D)`, `w_g = w_r = 1`.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        if self.hidden == 0 || self.word_dim == 0 || self.c == 0 || self.c_inter == 0 {
            return Err(contract("model widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        experts::init_image_experts(&mut p, &mut rng, self.c, self.c_inter, self.hidden)?;
        experts::init_text_experts(&mut p, &mut rng, self.word_dim, self.hidden)?;
        composition::init_composition(&mut p, &mut rng, self.hidden, self.fusion_rank)?;
        correction::init_correction(&mut p, &mut rng, self.hidden, self.share_diff_fc)?;
        Ok(p)
    }

    /// Recovers the widths from parameter shapes (e.g. after loading a checkpoint).
    pub fn infer(params: &ModelParams) -> Result<Self> {
        let shape = |name: &str| params.get(name).map(|t| t.shape().to_vec());
        let img = shape("experts.image.0.fc.weight")?;
        let inter = shape(&format!("experts.image.{}.fc.weight", experts::expert::INTERMEDIATE))?;
        let conv = shape("experts.text.conv.weight")?;
        let fusion = shape("composition.0.fusion.u")?;
        let hidden = img[0];
        Ok(Self {
            word_dim: conv[1],
            c: img[1],
            c_inter: inter[1],
            hidden,
            fusion_rank: fusion[0] / hidden,
            share_diff_fc: correction::shares_diff_fc(params),
        })
    }
}

/// Scalar losses of one batch, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub composition: Var,
    pub correction: Var,
    pub total: Var,
}

/// Runs both pathways on a batch and builds `λ_r L^r + λ_c L^c`.
///
/// Row `i` of `references`, `targets` and `captions` is one triplet; the
/// other targets of the batch serve as negatives.
pub fn batch_losses(
    f: &mut Forward<'_>,
    references: &[&RawExperts],
    targets: &[&RawExperts],
    captions: &[&Tensor],
    lambda_r: f64,
    lambda_c: f64,
) -> Result<BatchLosses> {
    let b = references.len();
    if b < 2 || targets.len() != b || captions.len() != b {
        return Err(contract("a batch needs B >= 2 aligned triplets"));
    }
    let images: Vec<&RawExperts> = references.iter().chain(targets).copied().collect();
    let bank = image_bank(f, &images)?;
    let ref_idx: Vec<usize> = (0..b).collect();
    let trg_idx: Vec<usize> = (b..2 * b).collect();
    let reference = bank.gather(f, &ref_idx)?;
    let target = bank.gather(f, &trg_idx)?;
    let text = text_bank(f, captions)?;

    let composed = compose(f, &reference, &text)?;
    let s_r = composition_scores(f, &composed, &target)?;
    let l_r = f.graph.batch_softmax_loss(s_r)?;

    let s_c = correction_scores(f, &reference, &target, &text)?;
    let l_c = f.graph.batch_softmax_loss(s_c)?;

    let a = f.graph.scale(l_r, lambda_r);
    let c = f.graph.scale(l_c, lambda_c);
    let total = f.graph.add(a, c)?;
    Ok(BatchLosses {
        composition: l_r,
        correction: l_c,
        total,
    })
}

/// Trained model ready for inference.
#[derive(Debug, Clone)]
pub struct Ccnet {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Inference-mode expert embeddings of a set of images: `E` matrices `n x D`.
#[derive(Debug, Clone)]
pub struct EmbeddedImages {
    pub experts: Vec<Tensor>,
}

impl EmbeddedImages {
    pub fn len(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of every expert.
    pub fn select(&self, idx: &[usize]) -> Result<EmbeddedImages> {
        let mut experts = Vec::with_capacity(self.experts.len());
        for t in &self.experts {
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= t.rows() {
                    return Err(Error::MissingId(format!("image row {i}")));
                }
                data.extend_from_slice(t.row(i));
            }
            experts.push(Tensor::new(alloc::vec![idx.len(), c], data)?);
        }
        Ok(EmbeddedImages { experts })
    }

    fn bind(&self, f: &mut Forward<'_>) -> Bank {
        Bank {
            experts: self
                .experts
                .iter()
                .map(|t| f.graph.constant(t.clone()))
                .collect(),
        }
    }
}

/// Raw scores of one query against a gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub composition: Vec<f64>,
    pub correction: Vec<f64>,
}

impl Ccnet {
    pub fn new(params: ModelParams) -> Result<Self> {
        Ok(Self {
            config: ModelConfig::infer(&params)?,
            params,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config,
            params: config.init_params(seed)?,
        })
    }

    /// Embeds images in chunks to bound graph size.
    pub fn embed_images(&self, raws: &[&RawExperts]) -> Result<EmbeddedImages> {
        const CHUNK: usize = 256;
        if raws.is_empty() {
            return Err(Error::EmptyInput("embed_images"));
        }
        let mut parts: Vec<Vec<f64>> = alloc::vec![Vec::new(); NUM_EXPERTS];
        for chunk in raws.chunks(CHUNK) {
            let mut f = Forward::inference(&self.params);
            let bank = image_bank(&mut f, chunk)?;
            for (e, &v) in bank.experts.iter().enumerate() {
                parts[e].extend_from_slice(f.graph.value(v).data());
            }
        }
        let d = self.config.hidden;
        let experts = parts
            .into_iter()
            .map(|data| Tensor::new(alloc::vec![raws.len(), d], data))
            .collect::<Result<_>>()?;
        Ok(EmbeddedImages { experts })
    }

    /// Text expert vectors of one caption, `E x D`.
    pub fn embed_caption(&self, words: &Tensor) -> Result<Tensor> {
        let mut f = Forward::inference(&self.params);
        let bank = text_bank(&mut f, &[words])?;
        let rows: Vec<Vec<f64>> = bank
            .experts
            .iter()
            .map(|&v| f.graph.value(v).data().to_vec())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Composition and correction scores of one query against `gallery`.
    /// `reference` is the query image's own embedding (one row per expert).
    pub fn score_query(
        &self,
        reference: &EmbeddedImages,
        words: &Tensor,
        gallery: &EmbeddedImages,
    ) -> Result<QueryScores> {
        if reference.len() != 1 {
            return Err(contract("score_query takes a single reference image"));
        }
        let mut f = Forward::inference(&self.params);
        let text = text_bank(&mut f, &[words])?;
        let r = reference.bind(&mut f);
        let g = gallery.bind(&mut f);
        let composed = compose(&mut f, &r, &text)?;
        let s_r = composition_scores(&mut f, &composed, &g)?;
        let s_c = correction_scores(&mut f, &r, &g, &text)?;
        Ok(QueryScores {
            composition: f.graph.value(s_r).data().to_vec(),
            correction: f.graph.value(s_c).data().to_vec(),
        })
    }
}
