//! In-memory datasets: feature store, triplets, word vectors.
//!
//! The on-disk encodings of these types live in the `ccnet` crate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Token joining the two captions of a query.
pub const CAPTION_SEPARATOR: &str = "<and>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub h: usize,
    pub w: usize,
    /// Channels of the spatial map.
    pub c: usize,
    /// Width of the intermediate-layer vector.
    pub c_inter: usize,
}

impl FeatureDims {
    /// Values stored per image: the `h x w x c` map then the intermediate vector.
    pub fn record_len(&self) -> usize {
        self.h * self.w * self.c + self.c_inter
    }

    pub fn record_bytes(&self) -> usize {
        4 * self.record_len()
    }
}

/// Precomputed backbone features per image id, stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dims: FeatureDims,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures<'a> {
    pub dims: FeatureDims,
    /// Row-major `h x w x c`.
    pub map: &'a [f32],
    pub inter: &'a [f32],
}

impl FeatureStore {
    pub fn new(dims: FeatureDims) -> Self {
        Self {
            dims,
            ids: Vec::new(),
            index: BTreeMap::new(),
            values: Vec::new(),
        }
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn push(&mut self, id: &str, map: &[f32], inter: &[f32]) -> Result<()> {
        let d = self.dims;
        if map.len() != d.h * d.w * d.c || inter.len() != d.c_inter {
            return Err(Error::Dimension {
                op: "feature_store",
                left: alloc::vec![d.h * d.w * d.c, d.c_inter],
                right: alloc::vec![map.len(), inter.len()],
            });
        }
        if self.index.contains_key(id) {
            return Err(Error::Integrity(alloc::format!("duplicate image id `{id}`")));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.values.extend_from_slice(map);
        self.values.extend_from_slice(inter);
        Ok(())
    }

    /// Ids in insertion (storage) order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Storage position of `id`.
    pub fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingId(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<ImageFeatures<'_>> {
        Ok(self.at(self.position(id)?))
    }

    pub fn at(&self, pos: usize) -> ImageFeatures<'_> {
        let d = self.dims;
        let start = pos * d.record_len();
        let split = start + d.h * d.w * d.c;
        ImageFeatures {
            dims: d,
            map: &self.values[start..split],
            inter: &self.values[split..start + d.record_len()],
        }
    }

    /// All values in storage order.
    pub fn raw_values(&self) -> &[f32] {
        &self.values
    }
}

/// One (reference, caption, target) example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub ref_id: String,
    pub trg_id: String,
    /// One or two tokenized captions.
    pub captions: Vec<Vec<String>>,
    pub category: String,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.ref_id == self.trg_id {
            return Err(contract(alloc::format!(
                "reference and target are both `{}`",
                self.ref_id
            )));
        }
        if self.captions.is_empty() || self.captions.len() > 2 {
            return Err(contract("a triplet carries one or two captions"));
        }
        if self.captions.iter().all(|c| c.is_empty()) {
            return Err(contract("captions are empty"));
        }
        Ok(())
    }

    /// Both images must resolve in `store`.
    pub fn validate_against(&self, store: &FeatureStore) -> Result<()> {
        self.validate()?;
        store.position(&self.ref_id)?;
        store.position(&self.trg_id)?;
        Ok(())
    }

    pub fn merged_tokens(&self) -> Result<Vec<String>> {
        merge_captions(&self.captions)
    }
}

/// Lowercase, split on whitespace, strip punctuation; empty tokens vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation() && !c.is_ascii_control())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Joins one or two captions with [`CAPTION_SEPARATOR`], in order.
pub fn merge_captions(captions: &[Vec<String>]) -> Result<Vec<String>> {
    match captions {
        [] => Err(contract("merge_captions needs at least one caption")),
        [a] => Ok(a.clone()),
        [a, b] => {
            let mut out = Vec::with_capacity(a.len() + b.len() + 1);
            out.extend_from_slice(a);
            out.push(CAPTION_SEPARATOR.to_string());
            out.extend_from_slice(b);
            Ok(out)
        }
        _ => Err(contract("merge_captions takes at most two captions")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Unknown tokens embed as the zero vector.
    #[default]
    Zero,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    pub oov: OovPolicy,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            oov: OovPolicy::Zero,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, token: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                op: "word_vectors",
                left: alloc::vec![self.dim],
                right: alloc::vec![v.len()],
            });
        }
        self.vectors.insert(token.to_string(), v);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Tokens in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// `l x dim` matrix of the token vectors.
    pub fn lookup(&self, tokens: &[String]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("word lookup"));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            match (self.vectors.get(t), self.oov) {
                (Some(v), _) => data.extend_from_slice(v),
                (None, OovPolicy::Zero) => data.extend(core::iter::repeat_n(0.0, self.dim)),
                (None, OovPolicy::Error) => return Err(Error::OutOfVocabulary(t.clone())),
            }
        }
        Tensor::new(alloc::vec![tokens.len(), self.dim], data)
    }
}
