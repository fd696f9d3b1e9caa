//! Attribute-structured synthetic benchmark.
//!
//! Image `i` enumerates one attribute vector of `V^A` (mixed radix, attribute
//! 0 least significant). Each attribute value owns a fixed random pattern
//! that is written into the spatial region of its attribute:
//!
//! | attribute | name     | region                  |
//! |-----------|----------|-------------------------|
//! | 0         | style    | intermediate vector     |
//! | 1         | color    | every cell (background) |
//! | 2         | neckline | top slice               |
//! | 3         | hem      | bottom slice            |
//! | 4         | sleeve   | left slice              |
//! | 5         | pattern  | right slice             |
//! | 6         | fit      | center slice            |
//!
//! The category is `style mod categories`, so flipping the style keeps an
//! image inside its gallery.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDims, FeatureStore, TripletRecord, WordVectorTable, CAPTION_SEPARATOR};
use crate::error::{Error, Result};
use crate::experts::{SliceRegion, DEFAULT_SLICES};
use crate::math;

pub const MAP_SIDE: usize = 7;
pub const MAX_ATTRIBUTES: usize = 7;

const ATTRIBUTE_NAMES: [&str; MAX_ATTRIBUTES] =
    ["style", "color", "neckline", "hem", "sleeve", "pattern", "fit"];

const VALUE_WORDS: [[&str; 6]; MAX_ATTRIBUTES] = [
    ["casual", "formal", "sporty", "vintage", "elegant", "boho"],
    ["red", "blue", "green", "yellow", "black", "white"],
    ["vneck", "crew", "scoop", "halter", "boat", "cowl"],
    ["mini", "midi", "maxi", "cropped", "asymmetric", "layered"],
    ["sleeveless", "capped", "short", "threequarter", "long", "puffed"],
    ["solid", "striped", "floral", "plaid", "dotted", "graphic"],
    ["slim", "loose", "fitted", "oversized", "relaxed", "tailored"],
];

const CATEGORY_NAMES: [&str; 3] = ["dress", "shirt", "toptee"];

/// Index into [`DEFAULT_SLICES`] of attributes 2..7.
const SLICE_OF_ATTRIBUTE: [usize; 5] = [0, 4, 1, 3, 2];

const PATTERN_SALT: u64 = 0x7061_7474_6572_6e73;
const IMAGE_SALT: u64 = 0x696d_6167_6573_0000;
const TRIPLET_SALT: u64 = 0x7472_6970_6c65_7473;
const WORD_SALT: u64 = 0x776f_7264_7665_6373;

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// `A`, at most seven.
    pub attributes: usize,
    /// `V`.
    pub values: usize,
    /// `N`; must equal `V^A` so every flipped vector names exactly one image.
    pub images: usize,
    pub train_triplets: usize,
    pub eval_triplets: usize,
    /// Half-width of the uniform noise added to every stored value.
    pub noise: f64,
    pub seed: u64,
    pub channels: usize,
    pub inter_channels: usize,
    pub word_dim: usize,
    pub categories: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            attributes: 4,
            values: 6,
            images: 1296,
            train_triplets: 4000,
            eval_triplets: 500,
            noise: 0.05,
            seed: 0,
            channels: 32,
            inter_channels: 32,
            word_dim: 300,
            categories: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleSpec(msg));
        if self.attributes == 0 || self.attributes > MAX_ATTRIBUTES {
            return bad(format!("attribute count must lie in 1..={MAX_ATTRIBUTES}"));
        }
        if self.values < 2 {
            return bad("each attribute needs at least two values".to_string());
        }
        let full = (self.values as u128).checked_pow(self.attributes as u32);
        if full != Some(self.images as u128) {
            return bad(format!(
                "{} images cannot cover {}^{} attribute vectors exactly",
                self.images, self.values, self.attributes
            ));
        }
        if self.categories == 0 || self.values % self.categories != 0 {
            return bad("category count must divide the value count".to_string());
        }
        if self.attributes == 1 && self.values / self.categories < 2 {
            return bad("no attribute can flip within a category".to_string());
        }
        if self.channels == 0 || self.inter_channels == 0 || self.word_dim == 0 {
            return bad("widths must be positive".to_string());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise amplitude must be finite and non-negative".to_string());
        }
        Ok(())
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            h: MAP_SIDE,
            w: MAP_SIDE,
            c: self.channels,
            c_inter: self.inter_channels,
        }
    }

    /// Attribute vector of image `index`.
    pub fn attributes_of(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        (0..self.attributes)
            .map(|_| {
                let v = rest % self.values;
                rest /= self.values;
                v
            })
            .collect()
    }

    pub fn index_of(&self, attrs: &[usize]) -> usize {
        attrs.iter().rev().fold(0, |acc, &v| acc * self.values + v)
    }

    pub fn category_of(&self, attrs: &[usize]) -> String {
        category_name(attrs[0] % self.categories)
    }
}

pub fn image_id(index: usize) -> String {
    format!("img{index:05}")
}

pub fn attribute_name(attr: usize) -> &'static str {
    ATTRIBUTE_NAMES[attr]
}

fn category_name(k: usize) -> String {
    CATEGORY_NAMES
        .get(k)
        .map_or_else(|| format!("category{k}"), |s| s.to_string())
}

fn value_word(attr: usize, value: usize) -> String {
    VALUE_WORDS[attr]
        .get(value)
        .map_or_else(|| format!("{}{value}", ATTRIBUTE_NAMES[attr]), |s| s.to_string())
}

/// Caption naming the new value of one flipped attribute.
pub fn caption_for(attr: usize, value: usize) -> Vec<String> {
    if attr == 0 {
        alloc::vec!["is".to_string(), value_word(attr, value)]
    } else {
        alloc::vec![
            "has".to_string(),
            value_word(attr, value),
            ATTRIBUTE_NAMES[attr].to_string()
        ]
    }
}

/// The hidden generative structure: one pattern per attribute value.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub spec: SyntheticSpec,
    /// `patterns[a][v]`; style patterns have `inter_channels` entries, the
    /// others `channels`.
    pub patterns: Vec<Vec<Vec<f64>>>,
    words: BTreeMap<String, (usize, usize)>,
}

impl Codebook {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ PATTERN_SALT);
        let patterns = (0..spec.attributes)
            .map(|a| {
                let width = if a == 0 { spec.inter_channels } else { spec.channels };
                (0..spec.values).map(|_| unit_vector(&mut rng, width)).collect()
            })
            .collect();
        let mut words = BTreeMap::new();
        for a in 0..spec.attributes {
            for v in 0..spec.values {
                words.insert(value_word(a, v), (a, v));
            }
        }
        Self {
            spec: spec.clone(),
            patterns,
            words,
        }
    }

    /// Attribute and value named by a value word.
    pub fn value_of(&self, token: &str) -> Option<(usize, usize)> {
        self.words.get(token).copied()
    }

    /// Applies every value word found in `tokens` to `attrs`.
    pub fn apply_caption(&self, attrs: &[usize], tokens: &[String]) -> Vec<usize> {
        let mut out = attrs.to_vec();
        for t in tokens {
            if let Some((a, v)) = self.value_of(t) {
                out[a] = v;
            }
        }
        out
    }

    fn nearest(&self, attr: usize, x: &[f64]) -> usize {
        let dist = |p: &[f64]| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = (0, f64::INFINITY);
        for (v, p) in self.patterns[attr].iter().enumerate() {
            let d = dist(p);
            if d < best.1 {
                best = (v, d);
            }
        }
        best.0
    }

    /// Reads the attribute vector back out of stored features by nearest
    /// pattern: the background from the four corners (covered by no slice),
    /// each slice attribute from the cells no other slice covers, minus the
    /// background, and the style from the intermediate vector.
    pub fn decode(&self, map: &[f32], inter: &[f32]) -> Vec<usize> {
        let c = self.spec.channels;
        let mean_cells = |cells: &[(usize, usize)]| -> Vec<f64> {
            let mut acc = alloc::vec![0.0; c];
            for &(r, col) in cells {
                let off = (r * MAP_SIDE + col) * c;
                for (a, &v) in acc.iter_mut().zip(&map[off..off + c]) {
                    *a += v as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= cells.len() as f64);
            acc
        };
        let last = MAP_SIDE - 1;
        let background = mean_cells(&[(0, 0), (0, last), (last, 0), (last, last)]);
        let mut attrs = Vec::with_capacity(self.spec.attributes);
        for a in 0..self.spec.attributes {
            let v = match a {
                0 => {
                    let x: Vec<f64> = inter.iter().map(|&v| v as f64).collect();
                    self.nearest(0, &x)
                }
                1 => self.nearest(1, &background),
                _ => {
                    let cells = exclusive_cells(SLICE_OF_ATTRIBUTE[a - 2]);
                    let mut x = mean_cells(&cells);
                    if self.spec.attributes > 1 {
                        x.iter_mut().zip(&background).for_each(|(x, b)| *x -= b);
                    }
                    self.nearest(a, &x)
                }
            };
            attrs.push(v);
        }
        attrs
    }
}

/// Cells of slice `s` that no other default slice covers.
pub fn exclusive_cells(s: usize) -> Vec<(usize, usize)> {
    let region = DEFAULT_SLICES[s];
    let mut out = Vec::new();
    for r in region.r0..region.r1 {
        for c in region.c0..region.c1 {
            let shared = DEFAULT_SLICES
                .iter()
                .enumerate()
                .any(|(o, other)| o != s && other.contains(r, c));
            if !shared {
                out.push((r, c));
            }
        }
    }
    out
}

fn unit_vector<R: Rng>(rng: &mut R, width: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noise<R: Rng>(rng: &mut R, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

/// Features of image `index`, a pure function of `(spec, index)`.
pub fn render_image(codebook: &Codebook, index: usize) -> (Vec<f32>, Vec<f32>) {
    let spec = &codebook.spec;
    let attrs = spec.attributes_of(index);
    let c = spec.channels;
    let mut map = alloc::vec![0.0f64; MAP_SIDE * MAP_SIDE * c];
    let mut inter = codebook.patterns[0][attrs[0]].clone();
    let full = SliceRegion::new(0, MAP_SIDE, 0, MAP_SIDE);
    for (a, &v) in attrs.iter().enumerate().skip(1) {
        let region = if a == 1 { full } else { DEFAULT_SLICES[SLICE_OF_ATTRIBUTE[a - 2]] };
        let p = &codebook.patterns[a][v];
        for r in region.r0..region.r1 {
            for col in region.c0..region.c1 {
                let off = (r * MAP_SIDE + col) * c;
                map[off..off + c].iter_mut().zip(p).for_each(|(m, x)| *m += x);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ IMAGE_SALT);
    rng.set_stream(index as u64);
    let map = map.into_iter().map(|x| (x + noise(&mut rng, spec.noise)) as f32).collect();
    inter.iter_mut().for_each(|x| *x += noise(&mut rng, spec.noise));
    (map, inter.into_iter().map(|x| x as f32).collect())
}

fn generate_triplets(spec: &SyntheticSpec, count: usize, stream: u64) -> Vec<TripletRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TRIPLET_SALT);
    rng.set_stream(stream);
    let same_class = spec.values / spec.categories;
    let flippable: Vec<usize> = (0..spec.attributes)
        .filter(|&a| a != 0 || same_class >= 2)
        .collect();
    (0..count)
        .map(|_| {
            let ref_index = rng.random_range(0..spec.images);
            let reference = spec.attributes_of(ref_index);
            let k = rng.random_range(1..=2usize).min(flippable.len());
            let mut picked: Vec<usize> = sample(&mut rng, flippable.len(), k)
                .into_iter()
                .map(|i| flippable[i])
                .collect();
            picked.sort_unstable();
            let mut target = reference.clone();
            let mut captions = Vec::with_capacity(k);
            for a in picked {
                let v = if a == 0 {
                    // Another value of the same class.
                    let step = rng.random_range(1..same_class);
                    (reference[0] + step * spec.categories) % spec.values
                } else {
                    (reference[a] + rng.random_range(1..spec.values)) % spec.values
                };
                target[a] = v;
                captions.push(caption_for(a, v));
            }
            TripletRecord {
                ref_id: image_id(ref_index),
                trg_id: image_id(spec.index_of(&target)),
                captions,
                category: spec.category_of(&reference),
            }
        })
        .collect()
}

fn word_table(spec: &SyntheticSpec) -> Result<WordVectorTable> {
    let mut tokens: Vec<String> = alloc::vec![
        "is".to_string(),
        "has".to_string(),
        CAPTION_SEPARATOR.to_string()
    ];
    for a in 0..spec.attributes {
        tokens.push(ATTRIBUTE_NAMES[a].to_string());
        tokens.extend((0..spec.values).map(|v| value_word(a, v)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ WORD_SALT);
    let mut table = WordVectorTable::new(spec.word_dim);
    for t in tokens {
        let v = unit_vector(&mut rng, spec.word_dim)
            .into_iter()
            .map(|x| x as f32 as f64)
            .collect();
        table.insert(&t, v)?;
    }
    Ok(table)
}

pub struct SyntheticDataset {
    pub store: FeatureStore,
    /// Split name to triplets.
    pub splits: BTreeMap<String, Vec<TripletRecord>>,
    pub words: WordVectorTable,
    /// Image id to category.
    pub categories: BTreeMap<String, String>,
    pub codebook: Codebook,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let codebook = Codebook::new(spec);
    let mut store = FeatureStore::new(spec.dims());
    let mut categories = BTreeMap::new();
    for i in 0..spec.images {
        let (map, inter) = render_image(&codebook, i);
        let id = image_id(i);
        store.push(&id, &map, &inter)?;
        categories.insert(id, spec.category_of(&spec.attributes_of(i)));
    }
    let mut splits = BTreeMap::new();
    splits.insert(TRAIN_SPLIT.to_string(), generate_triplets(spec, spec.train_triplets, 0));
    splits.insert(EVAL_SPLIT.to_string(), generate_triplets(spec, spec.eval_triplets, 1));
    Ok(SyntheticDataset {
        store,
        splits,
        words: word_table(spec)?,
        categories,
        codebook,
    })
}
