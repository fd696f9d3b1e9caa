//! A dataset directory:
//!
//! ```text
//! index.json  features.bin     feature store
//! wordvec.txt                  word vectors
//! triplets.<split>.jsonl       one file per split
//! categories.json              optional: image id -> category (the catalog)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ccnet_core::data::{FeatureStore, TripletRecord, WordVectorTable};
use ccnet_core::dataset::{build_galleries, prepare_queries, GalleryPolicy, PooledImages, PreparedQuery};
use ccnet_core::synth::SyntheticDataset;

use crate::error::{format_err, io_err, Result};
use crate::store::{load_feature_store, write_feature_store};
use crate::text::{load_triplets, load_word_vectors, triplets_path, write_triplets, write_word_vectors};

pub const WORDS_FILE: &str = "wordvec.txt";
pub const CATEGORIES_FILE: &str = "categories.json";

pub struct DataDir {
    pub root: PathBuf,
    pub store: FeatureStore,
    pub words: WordVectorTable,
    pub catalog: Option<BTreeMap<String, String>>,
    pub pooled: PooledImages,
}

/// One split resolved against a data directory.
pub struct Split {
    pub records: Vec<TripletRecord>,
    pub queries: Vec<PreparedQuery>,
    /// Per category, gallery positions sorted by id.
    pub galleries: BTreeMap<String, Vec<usize>>,
}

impl DataDir {
    pub fn load(root: &Path) -> Result<Self> {
        let store = load_feature_store(root)?;
        let words = load_word_vectors(&root.join(WORDS_FILE))?;
        let cat_path = root.join(CATEGORIES_FILE);
        let catalog = if cat_path.exists() {
            let text = fs::read_to_string(&cat_path).map_err(io_err(&cat_path))?;
            let map: BTreeMap<String, String> =
                serde_json::from_str(&text).map_err(|e| format_err(&cat_path, e.to_string()))?;
            for id in map.keys() {
                store.position(id)?;
            }
            Some(map)
        } else {
            None
        };
        let pooled = PooledImages::from_store(&store)?;
        Ok(Self {
            root: root.to_path_buf(),
            store,
            words,
            catalog,
            pooled,
        })
    }

    /// Catalog galleries when a category map exists, otherwise the images
    /// referenced by the split.
    pub fn gallery_policy(&self) -> GalleryPolicy {
        if self.catalog.is_some() {
            GalleryPolicy::Catalog
        } else {
            GalleryPolicy::SplitImages
        }
    }

    pub fn split(&self, name: &str) -> Result<Split> {
        self.split_with(name, self.gallery_policy())
    }

    pub fn split_with(&self, name: &str, policy: GalleryPolicy) -> Result<Split> {
        let records = load_triplets(&triplets_path(&self.root, name))?;
        let queries = prepare_queries(&self.store, &self.words, &records)?;
        let galleries = build_galleries(&self.store, &queries, policy, self.catalog.as_ref())?;
        Ok(Split {
            records,
            queries,
            galleries,
        })
    }

    /// Category of an image according to the catalog.
    pub fn category_of(&self, id: &str) -> Option<&str> {
        self.catalog.as_ref()?.get(id).map(String::as_str)
    }
}

pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    write_feature_store(dir, &data.store)?;
    write_word_vectors(&dir.join(WORDS_FILE), &data.words)?;
    for (split, records) in &data.splits {
        write_triplets(&triplets_path(dir, split), records)?;
    }
    let cat_path = dir.join(CATEGORIES_FILE);
    let json = serde_json::to_string_pretty(&data.categories).map_err(|e| format_err(&cat_path, e.to_string()))?;
    fs::write(&cat_path, json).map_err(io_err(&cat_path))
}
