//! Procedurally generated attribute-conditioned image datasets.
//!
//! Each category is a renderable object family (a composite-ellipse "bird"
//! or a rotational "flower") with its own hues, part count and size. The
//! conditioning embedding of an example is a deterministic encoding of its
//! category attributes plus small per-example Gaussian jitter.

mod batch;
pub mod ppm;
mod render;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

pub use batch::{sample_triplet_batch, TrainIndex, TripletBatch};
pub use ppm::{load_image, save_image};
pub use render::render_example;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_JITTER_STD: f64 = 0.05;
/// Length of the clean attribute encoding before tiling to `d_h`.
pub const ATTRIBUTE_DIM: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Bird,
    Flower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub hue: f64,
    pub secondary_hue: f64,
    pub family: ShapeFamily,
    /// Tail feathers for birds, petals for flowers.
    pub parts: u32,
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub attributes: Attributes,
}

impl Category {
    /// Deterministic category `id` of a dataset seeded with `seed`. Families
    /// alternate; primary hues follow a golden-ratio sequence so that no two
    /// categories share one.
    pub fn generate(seed: u64, id: usize) -> Self {
        let mut rng = rng_from(seed, &[0x636174, id as u64]);
        let family = if id.is_multiple_of(2) { ShapeFamily::Bird } else { ShapeFamily::Flower };
        let base = rng_from(seed, &[0x687565]).random::<f64>();
        let hue = (base + id as f64 * 0.618_033_988_749_895).rem_euclid(1.0);
        let secondary_hue = (hue + 0.3 + 0.4 * rng.random::<f64>()).rem_euclid(1.0);
        let parts = match family {
            ShapeFamily::Bird => rng.random_range(2..=4),
            ShapeFamily::Flower => rng.random_range(5..=8),
        };
        let size = 0.55 + 0.25 * rng.random::<f64>();
        Category {
            id,
            attributes: Attributes {
                hue,
                secondary_hue,
                family,
                parts,
                size,
            },
        }
    }

    /// Clean attribute vector (length [`ATTRIBUTE_DIM`]).
    pub fn attribute_vector(&self) -> [f64; ATTRIBUTE_DIM] {
        let a = &self.attributes;
        let tau = std::f64::consts::TAU;
        [
            (tau * a.hue).cos(),
            (tau * a.hue).sin(),
            (tau * a.secondary_hue).cos(),
            (tau * a.secondary_hue).sin(),
            match a.family {
                ShapeFamily::Bird => 1.0,
                ShapeFamily::Flower => -1.0,
            },
            (a.parts as f64 - 5.0) / 3.0,
            (a.size - 0.675) / 0.125,
        ]
    }
}

/// Conditioning vector of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub category_id: usize,
    pub values: Vec<f32>,
}

/// Attribute encoding tiled to `d_h` plus seeded `Normal(0, jitter_std)` noise.
pub fn encode_attributes(category: &Category, noise_seed: u64, d_h: usize, jitter_std: f64) -> Result<TextEmbedding> {
    if d_h < ATTRIBUTE_DIM {
        return Err(Error::Config(format!("d_h {d_h} is smaller than the {ATTRIBUTE_DIM} attributes")));
    }
    let clean = category.attribute_vector();
    let mut rng = rng_from(noise_seed, &[0x656d62]);
    let values = (0..d_h)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (clean[i % ATTRIBUTE_DIM] + jitter_std * e) as f32
        })
        .collect();
    Ok(TextEmbedding {
        category_id: category.id,
        values,
    })
}

/// Noise-free embedding of a category.
pub fn clean_embedding(category: &Category, d_h: usize) -> Result<TextEmbedding> {
    encode_attributes(category, 0, d_h, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_categories: usize,
    pub per_category: usize,
    pub image_side: usize,
    pub d_h: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub jitter_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_categories: 10,
            per_category: 60,
            image_side: 32,
            d_h: 32,
            seed: 7,
            train_fraction: 0.8,
            jitter_std: DEFAULT_JITTER_STD,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 3 {
            return Err(Error::Config("need at least 3 categories".into()));
        }
        if self.per_category < 2 {
            return Err(Error::Config("need at least 2 examples per category".into()));
        }
        if self.image_side < 4 {
            return Err(Error::Config("image side must be at least 4".into()));
        }
        if self.d_h < ATTRIBUTE_DIM {
            return Err(Error::Config(format!("d_h must be at least {ATTRIBUTE_DIM}")));
        }
        if !(self.jitter_std >= 0.0) {
            return Err(Error::Config("jitter_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    /// Image path relative to the dataset directory.
    pub path: String,
    pub category_id: usize,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_category_ids: Vec<usize>,
    pub test_category_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_side: usize,
    pub d_h: usize,
    pub categories: Vec<Category>,
    pub examples: Vec<ExampleRecord>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn category(&self, id: usize) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        let ids: BTreeSet<usize> = self.categories.iter().map(|c| c.id).collect();
        let train: BTreeSet<usize> = self.split.train_category_ids.iter().copied().collect();
        let test: BTreeSet<usize> = self.split.test_category_ids.iter().copied().collect();
        if !train.is_disjoint(&test) {
            return Err(Error::format(path, "train and test categories overlap"));
        }
        if !train.union(&test).all(|id| ids.contains(id)) {
            return Err(Error::format(path, "split references an unknown category"));
        }
        for ex in &self.examples {
            if !ids.contains(&ex.category_id) {
                return Err(Error::format(path, format!("{}: unknown category {}", ex.path, ex.category_id)));
            }
            if ex.embedding.len() != self.d_h {
                return Err(Error::format(path, format!("{}: embedding length {} != d_h {}", ex.path, ex.embedding.len(), self.d_h)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::json(&path, e))?;
        m.validate(&path)?;
        Ok(m)
    }

    /// Manifest restricted to the given category ids (split is kept).
    pub fn restrict(&self, ids: &[usize]) -> Self {
        let keep: BTreeSet<usize> = ids.iter().copied().collect();
        DatasetManifest {
            categories: self.categories.iter().filter(|c| keep.contains(&c.id)).cloned().collect(),
            examples: self.examples.iter().filter(|e| keep.contains(&e.category_id)).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Partitions categories into disjoint train and test sets;
/// `round(n·train_fraction)` categories (at least one, at most `n - 1`) train.
pub fn split_categories(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut ids: Vec<usize> = manifest.categories.iter().map(|c| c.id).collect();
    let n = ids.len();
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} categories")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    ids.shuffle(&mut rng_from(seed, &[0x73706c]));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let split = Split {
        train_category_ids: train.clone(),
        test_category_ids: test.clone(),
    };
    let mut with_split = manifest.clone();
    with_split.split = split;
    Ok((with_split.restrict(&train), with_split.restrict(&test)))
}

fn image_rel_path(category: usize, index: usize) -> String {
    format!("images/{category:03}_{index:04}.ppm")
}

/// Renders the full dataset into `out_dir` (images plus `manifest.json`).
/// Output depends only on `spec`; per-example seeds are derived from
/// `(seed, category, index)`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let categories: Vec<Category> = (0..spec.n_categories).map(|id| Category::generate(spec.seed, id)).collect();
    let mut examples = Vec::with_capacity(spec.n_categories * spec.per_category);
    for cat in &categories {
        for i in 0..spec.per_category {
            let pose_seed = derive_seed(spec.seed, &[cat.id as u64, i as u64, 0]);
            let text_seed = derive_seed(spec.seed, &[cat.id as u64, i as u64, 1]);
            let image = render_example(cat, pose_seed, spec.image_side);
            let rel = image_rel_path(cat.id, i);
            save_image(&image, &out_dir.join(&rel))?;
            let emb = encode_attributes(cat, text_seed, spec.d_h, spec.jitter_std)?;
            examples.push(ExampleRecord {
                path: rel,
                category_id: cat.id,
                embedding: emb.values,
            });
        }
    }
    let unsplit = DatasetManifest {
        version: MANIFEST_VERSION,
        image_side: spec.image_side,
        d_h: spec.d_h,
        categories,
        examples,
        split: Split {
            train_category_ids: Vec::new(),
            test_category_ids: Vec::new(),
        },
    };
    let (train, test) = split_categories(&unsplit, spec.train_fraction, spec.seed)?;
    let manifest = DatasetManifest {
        split: Split {
            train_category_ids: train.split.train_category_ids,
            test_category_ids: test.split.test_category_ids,
        },
        ..unsplit
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    /// `[3, S, S]` per example, manifest order.
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let s = manifest.image_side;
        let images = manifest
            .examples
            .iter()
            .map(|ex| {
                let p = dir.join(&ex.path);
                let img = load_image(&p)?;
                if img.shape() != [3, s, s] {
                    return Err(Error::format(&p, format!("image shape {:?} != [3, {s}, {s}]", img.shape())));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            images,
        })
    }

    pub fn embedding(&self, index: usize) -> Tensor<f32> {
        let e = &self.manifest.examples[index].embedding;
        Tensor::new(vec![e.len()], e.clone()).expect("embedding length")
    }

    pub fn category_of(&self, index: usize) -> usize {
        self.manifest.examples[index].category_id
    }

    pub fn test_categories(&self) -> Vec<&Category> {
        self.manifest
            .split
            .test_category_ids
            .iter()
            .filter_map(|&id| self.manifest.category(id))
            .collect()
    }
}
