//! Triplets resolved against a feature store and word table, ready for
//! training and evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{FeatureStore, TripletRecord, WordVectorTable};
use crate::error::{contract, Result};
use crate::experts::{pool_image, RawExperts, SliceRegion, DEFAULT_SLICES};
use crate::tensor::Tensor;

/// Pooled expert inputs for every image of a store, by storage position.
#[derive(Debug, Clone)]
pub struct PooledImages {
    pub raws: Vec<RawExperts>,
}

impl PooledImages {
    pub fn from_store(store: &FeatureStore) -> Result<Self> {
        Self::with_slices(store, &DEFAULT_SLICES)
    }

    pub fn with_slices(store: &FeatureStore, slices: &[SliceRegion]) -> Result<Self> {
        let d = store.dims();
        let raws = (0..store.len())
            .map(|i| {
                let f = store.at(i);
                pool_image(f.map, f.inter, (d.h, d.w, d.c), slices)
            })
            .collect::<Result<_>>()?;
        Ok(Self { raws })
    }
}

/// One triplet with its images as store positions and its merged caption
/// looked up in the word table.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub ref_pos: usize,
    pub trg_pos: usize,
    /// `l x word_dim`.
    pub words: Tensor,
    pub category: String,
}

pub fn prepare_queries(
    store: &FeatureStore,
    words: &WordVectorTable,
    triplets: &[TripletRecord],
) -> Result<Vec<PreparedQuery>> {
    triplets
        .iter()
        .map(|t| {
            t.validate_against(store)?;
            Ok(PreparedQuery {
                ref_pos: store.position(&t.ref_id)?,
                trg_pos: store.position(&t.trg_id)?,
                words: words.lookup(&t.merged_tokens()?)?,
                category: t.category.clone(),
            })
        })
        .collect()
}

/// Candidate pool of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GalleryPolicy {
    /// Every image the catalog assigns to the query's category.
    Catalog,
    /// Every image referenced by the split's triplets of that category.
    SplitImages,
}

/// Per-category candidate positions, sorted by image id.
pub fn build_galleries(
    store: &FeatureStore,
    queries: &[PreparedQuery],
    policy: GalleryPolicy,
    catalog: Option<&BTreeMap<String, String>>,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match policy {
        GalleryPolicy::Catalog => {
            let catalog = catalog.ok_or_else(|| contract("catalog gallery needs a category map"))?;
            let wanted: alloc::collections::BTreeSet<&str> =
                queries.iter().map(|q| q.category.as_str()).collect();
            for (id, cat) in catalog {
                if wanted.contains(cat.as_str()) {
                    out.entry(cat.clone()).or_default().push(store.position(id)?);
                }
            }
        }
        GalleryPolicy::SplitImages => {
            for q in queries {
                let g = out.entry(q.category.clone()).or_default();
                g.push(q.ref_pos);
                g.push(q.trg_pos);
            }
        }
    }
    let ids = store.ids();
    for g in out.values_mut() {
        g.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        g.dedup();
    }
    Ok(out)
}
