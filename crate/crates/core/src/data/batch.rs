use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `m` real images with right and wrong embeddings and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    /// `[m, 3, S, S]`
    pub x: Tensor<f32>,
    /// `[m, d_h]`, embeddings of the images in `x`.
    pub h_right: Tensor<f32>,
    /// `[m, d_h]`, embeddings drawn from a different category.
    pub h_wrong: Tensor<f32>,
    /// `[m, d_z]`, standard normal.
    pub z: Tensor<f32>,
    pub categories: Vec<usize>,
    pub wrong_categories: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Example indices of the training categories, grouped by category.
#[derive(Clone, Debug)]
pub struct TrainIndex {
    examples: Vec<usize>,
    by_category: BTreeMap<usize, Vec<usize>>,
    categories: Vec<usize>,
}

impl TrainIndex {
    /// Indexes the examples whose category is in `category_ids`.
    pub fn new(dataset: &Dataset, category_ids: &[usize]) -> Result<Self> {
        let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut examples = Vec::new();
        for (i, ex) in dataset.manifest.examples.iter().enumerate() {
            if category_ids.contains(&ex.category_id) {
                by_category.entry(ex.category_id).or_default().push(i);
                examples.push(i);
            }
        }
        if by_category.len() < 2 {
            return Err(Error::Config(format!(
                "wrong-text sampling needs at least 2 populated categories, found {}",
                by_category.len()
            )));
        }
        let categories = by_category.keys().copied().collect();
        Ok(TrainIndex {
            examples,
            by_category,
            categories,
        })
    }

    /// Index over the manifest's training split.
    pub fn train_split(dataset: &Dataset) -> Result<Self> {
        let ids = dataset.manifest.split.train_category_ids.clone();
        Self::new(dataset, &ids)
    }

    pub fn examples(&self) -> &[usize] {
        &self.examples
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }
}

/// Draws `m` (image, right text) pairs uniformly from the indexed examples,
/// a wrong text per pair (uniform over the other categories, then uniform
/// within that category) from `data_rng`, and `z ~ N(0, I)` from `noise_rng`.
/// The number of draws from each stream depends only on `m` and `d_z`.
pub fn sample_triplet_batch<R1: Rng, R2: Rng>(
    dataset: &Dataset,
    index: &TrainIndex,
    m: usize,
    d_z: usize,
    data_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<TripletBatch> {
    if m == 0 || d_z == 0 {
        return Err(Error::Config("batch size and d_z must be positive".into()));
    }
    let mut images = Vec::with_capacity(m);
    let mut right = Vec::with_capacity(m * dataset.manifest.d_h);
    let mut wrong = Vec::with_capacity(m * dataset.manifest.d_h);
    let mut categories = Vec::with_capacity(m);
    let mut wrong_categories = Vec::with_capacity(m);
    let k = index.categories.len();
    for _ in 0..m {
        let i = index.examples[data_rng.random_range(0..index.examples.len())];
        let cat = dataset.category_of(i);
        let pos = index.categories.iter().position(|&c| c == cat).expect("indexed category");
        let mut wc = data_rng.random_range(0..k - 1);
        if wc >= pos {
            wc += 1;
        }
        let wrong_cat = index.categories[wc];
        let pool = &index.by_category[&wrong_cat];
        let j = pool[data_rng.random_range(0..pool.len())];
        images.push(&dataset.images[i]);
        right.extend_from_slice(&dataset.manifest.examples[i].embedding);
        wrong.extend_from_slice(&dataset.manifest.examples[j].embedding);
        categories.push(cat);
        wrong_categories.push(wrong_cat);
    }
    let d_h = dataset.manifest.d_h;
    let z: Vec<f32> = (0..m * d_z)
        .map(|_| {
            let v: f64 = StandardNormal.sample(noise_rng);
            v as f32
        })
        .collect();
    Ok(TripletBatch {
        x: Tensor::stack(&images)?,
        h_right: Tensor::new(vec![m, d_h], right)?,
        h_wrong: Tensor::new(vec![m, d_h], wrong)?,
        z: Tensor::new(vec![m, d_z], z)?,
        categories,
        wrong_categories,
    })
}
