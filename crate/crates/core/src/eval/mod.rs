//! Classifier-based evaluation of generated images, sample grids and the
//! cross-variant comparison table.

mod classifier;

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{clean_embedding, ppm, Dataset, DatasetManifest, ShapeFamily};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, PerceptualVariant};
use crate::models::{Generator, Mode};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use crate::training::{train_loop, write_json, Seeds, Start, TrainConfig};

pub use classifier::{train_classifier, train_eval_classifier, CategoryClassifier, ClassifierTrainConfig, ACCURACY_THRESHOLD, CLASSIFIER_FILE};

/// Base seed of evaluation noise. Training streams are derived from run
/// seeds with different tags, so the two never share a stream.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;
pub const DEFAULT_N_PER_QUERY: usize = 500;
pub const DEFAULT_QUERIES: usize = 3;
const GEN_CHUNK: usize = 100;

/// A conditioning vector from an unseen category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub category_id: usize,
    pub family: ShapeFamily,
    pub embedding: Vec<f32>,
}

/// `count` queries built from the clean embeddings of the manifest's test
/// categories, cycling through them in id order when there are fewer
/// categories than queries.
pub fn test_queries(manifest: &DatasetManifest, count: usize) -> Result<Vec<Query>> {
    let ids = &manifest.split.test_category_ids;
    if ids.is_empty() {
        return Err(Error::Config("manifest has no test categories".into()));
    }
    (0..count)
        .map(|q| {
            let cat = manifest
                .category(ids[q % ids.len()])
                .ok_or_else(|| Error::Config(format!("unknown test category {}", ids[q % ids.len()])))?;
            Ok(Query {
                category_id: cat.id,
                family: cat.attributes.family,
                embedding: clean_embedding(cat, manifest.d_h)?.values,
            })
        })
        .collect()
}

/// Anything that turns a query and a noise batch into images.
pub trait ImageSampler {
    fn d_z(&self) -> usize;
    /// `z[n, d_z]` to images `[n, 3, S, S]` conditioned on `query`.
    fn sample(&self, query: &Query, z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl ImageSampler for Generator<f32> {
    fn d_z(&self) -> usize {
        self.config().d_z
    }

    fn sample(&self, query: &Query, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = z.shape()[0];
        let d_h = query.embedding.len();
        let h = Tensor::from_fn(&[n, d_h], |i| query.embedding[i % d_h]);
        self.generate(z, &h, Mode::Eval)
    }
}

/// Unit-normal noise for draw `index` of the evaluation stream `tags`.
pub fn eval_noise(seed: u64, tags: &[u64], n: usize, d_z: usize) -> Tensor<f32> {
    let mut rng = rng_from(seed, tags);
    Tensor::from_fn(&[n, d_z], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

/// When a generated image counts as correct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPredicate {
    /// The predicted category has the query's shape family.
    #[default]
    SameFamily,
    SameCategory,
}

impl TargetPredicate {
    fn accepts(self, classifier: &CategoryClassifier, query: &Query, predicted: usize) -> bool {
        match self {
            TargetPredicate::SameFamily => classifier.family_of(predicted) == Some(query.family),
            TargetPredicate::SameCategory => predicted == query.category_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub category_id: usize,
    pub family: ShapeFamily,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Option<String>,
    pub n_generated: usize,
    pub n_correct: usize,
    pub classifier_accuracy: f64,
    pub predicate: TargetPredicate,
    pub eval_seed: u64,
    pub per_query: Vec<QueryResult>,
}

/// Generates `n_per_query` images for each query with fresh noise and
/// classifies them. Every query must come from a test category of
/// `manifest`. The classifier must pass its accuracy guard.
pub fn eval_generated(
    sampler: &dyn ImageSampler,
    classifier: &CategoryClassifier,
    manifest: &DatasetManifest,
    queries: &[Query],
    n_per_query: usize,
    predicate: TargetPredicate,
    seed: u64,
) -> Result<EvalReport> {
    classifier.ensure_valid(ACCURACY_THRESHOLD)?;
    if n_per_query == 0 || queries.is_empty() {
        return Err(Error::Config("need at least one query and one image per query".into()));
    }
    for q in queries {
        if !manifest.split.test_category_ids.contains(&q.category_id) {
            return Err(Error::Config(format!("query category {} is not a test category", q.category_id)));
        }
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut correct = 0;
        let mut done = 0;
        while done < n_per_query {
            let n = GEN_CHUNK.min(n_per_query - done);
            let z = eval_noise(seed, &[0x6576, qi as u64, done as u64], n, sampler.d_z());
            let images = sampler.sample(q, &z)?;
            let preds = classifier.predict_categories(&images)?;
            correct += preds.iter().filter(|&&p| predicate.accepts(classifier, q, p)).count();
            done += n;
        }
        per_query.push(QueryResult {
            category_id: q.category_id,
            family: q.family,
            n: n_per_query,
            correct,
            accuracy: correct as f64 / n_per_query as f64,
        });
    }
    let n_generated = per_query.iter().map(|r| r.n).sum();
    let n_correct = per_query.iter().map(|r| r.correct).sum();
    Ok(EvalReport {
        variant: None,
        n_generated,
        n_correct,
        classifier_accuracy: classifier.validation_accuracy().unwrap_or(0.0),
        predicate,
        eval_seed: seed,
        per_query,
    })
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_generated as f64
    }
}

/// Tiles `rows × cols` samples into one PPM: row `r` uses query
/// `r mod len(queries)`, columns are independent noise draws.
pub fn emit_image_grid(sampler: &dyn ImageSampler, queries: &[Query], rows: usize, cols: usize, seed: u64, out: &Path) -> Result<Tensor<f32>> {
    if rows == 0 || cols == 0 || queries.is_empty() {
        return Err(Error::Config("grid needs at least one row, column and query".into()));
    }
    let mut tiles = Vec::with_capacity(rows);
    for r in 0..rows {
        let z = eval_noise(seed, &[0x6772, r as u64], cols, sampler.d_z());
        tiles.push(sampler.sample(&queries[r % queries.len()], &z)?);
    }
    let s = tiles[0].shape()[2];
    let (gh, gw) = (rows * s, cols * s);
    let mut grid = vec![0f32; 3 * gh * gw];
    for (r, t) in tiles.iter().enumerate() {
        let d = t.data();
        for c in 0..cols {
            for ch in 0..3 {
                for y in 0..s {
                    let src = ((c * 3 + ch) * s + y) * s;
                    let dst = (ch * gh + r * s + y) * gw + c * s;
                    grid[dst..dst + s].copy_from_slice(&d[src..src + s]);
                }
            }
        }
    }
    let grid = Tensor::new(vec![3, gh, gw], grid)?;
    ppm::save_image(&grid, out)?;
    Ok(grid)
}

/// Classification accuracies at full scale for each variant, as
/// (bird, flower); listed next to the local results for context.
pub fn reference_accuracy(variant: PerceptualVariant) -> (f64, f64) {
    match variant {
        PerceptualVariant::None => (0.76, 0.66),
        PerceptualVariant::Pixel => (0.83, 0.66),
        PerceptualVariant::Activation => (0.80, 0.76),
        PerceptualVariant::Gram => (0.85, 0.89),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub method: String,
    /// Images evaluated per run.
    pub n: usize,
    pub runs: usize,
    /// Mean over runs.
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub per_seed: Vec<f64>,
    pub reference_bird: f64,
    pub reference_flower: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub classifier_accuracy: f64,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub n_per_query: usize,
    pub queries: Vec<Query>,
    /// Every perceptual variant's mean accuracy is at least the baseline's.
    pub perceptual_at_least_baseline: Option<bool>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,method,n,runs,accuracy,accuracy_std,reference_bird,reference_flower\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.2},{:.2}\n",
                r.variant, r.method, r.n, r.runs, r.accuracy, r.accuracy_std, r.reference_bird, r.reference_flower
            ));
        }
        s
    }

    /// Writes `path` as CSV and the same table as JSON next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        write_json(&path.with_extension("json"), self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub train: TrainConfig,
    pub variants: Vec<LossConfig>,
    pub seeds: Vec<u64>,
    pub n_per_query: usize,
    pub n_queries: usize,
    pub predicate: TargetPredicate,
    pub eval_seed: u64,
}

impl CompareConfig {
    /// All four variants sharing `base.loss`'s λ and feature layer.
    pub fn all_variants(base: TrainConfig, seeds: Vec<u64>) -> Self {
        let variants = PerceptualVariant::ALL
            .iter()
            .map(|&v| LossConfig {
                variant: v,
                ..base.loss.clone()
            })
            .collect();
        CompareConfig {
            train: base,
            variants,
            seeds,
            n_per_query: DEFAULT_N_PER_QUERY,
            n_queries: DEFAULT_QUERIES,
            predicate: TargetPredicate::SameFamily,
            eval_seed: EVAL_SEED,
        }
    }
}

/// Trains every variant for every seed under the same budget, evaluates
/// each final generator on the test-category queries and averages the
/// accuracies over seeds. Runs are written to `work_dir/<variant>/seed-<s>`.
pub fn compare_variants(cfg: &CompareConfig, dataset: &Dataset, classifier: &CategoryClassifier, work_dir: &Path) -> Result<ComparisonTable> {
    classifier.ensure_valid(ACCURACY_THRESHOLD)?;
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("need at least one variant and one seed".into()));
    }
    let queries = test_queries(&dataset.manifest, cfg.n_queries)?;
    let mut rows = Vec::with_capacity(cfg.variants.len());
    for loss in &cfg.variants {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        let mut n = 0;
        for &seed in &cfg.seeds {
            let train = TrainConfig {
                loss: loss.clone(),
                seeds: Seeds::from_base(seed),
                ..cfg.train.clone()
            };
            let run_dir = work_dir.join(loss.variant.flag()).join(format!("seed-{seed}"));
            let outcome = train_loop(&train, dataset, &run_dir, Start::Fresh)?;
            let report = eval_generated(
                &outcome.state.generator,
                classifier,
                &dataset.manifest,
                &queries,
                cfg.n_per_query,
                cfg.predicate,
                cfg.eval_seed,
            )?;
            let mut report = report;
            report.variant = Some(loss.variant.flag().to_string());
            write_json(&run_dir.join("eval.json"), &report)?;
            n = report.n_generated;
            per_seed.push(report.accuracy());
        }
        let k = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / k;
        let std = (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k).sqrt();
        let (bird, flower) = reference_accuracy(loss.variant);
        rows.push(ComparisonRow {
            variant: loss.variant.flag().to_string(),
            method: loss.variant.method_name().to_string(),
            n,
            runs: per_seed.len(),
            accuracy: mean,
            accuracy_std: std,
            per_seed,
            reference_bird: bird,
            reference_flower: flower,
        });
    }
    let baseline = rows.iter().find(|r| r.variant == PerceptualVariant::None.flag()).map(|r| r.accuracy);
    let perceptual_at_least_baseline = baseline.map(|b| rows.iter().filter(|r| r.variant != PerceptualVariant::None.flag()).all(|r| r.accuracy >= b));
    Ok(ComparisonTable {
        rows,
        classifier_accuracy: classifier.validation_accuracy().unwrap_or(0.0),
        steps: cfg.train.steps,
        seeds: cfg.seeds.clone(),
        n_per_query: cfg.n_per_query,
        queries,
        perceptual_at_least_baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Category, Split};

    fn manifest(test_ids: Vec<usize>) -> DatasetManifest {
        DatasetManifest {
            version: crate::data::MANIFEST_VERSION,
            image_side: 16,
            d_h: 14,
            categories: (0..5).map(|id| Category::generate(3, id)).collect(),
            examples: Vec::new(),
            split: Split {
                train_category_ids: (0..5).filter(|i| !test_ids.contains(i)).collect(),
                test_category_ids: test_ids,
            },
        }
    }

    #[test]
    fn queries_cycle_through_test_categories() {
        let m = manifest(vec![1, 4]);
        let q = test_queries(&m, 5).unwrap();
        let ids: Vec<usize> = q.iter().map(|q| q.category_id).collect();
        assert_eq!(ids, [1, 4, 1, 4, 1]);
        assert_eq!(q[0], q[2]);
        assert_eq!(q[0].embedding.len(), 14);
        assert_eq!(q[1].family, m.category(4).unwrap().attributes.family);
        assert!(test_queries(&manifest(vec![]), 1).is_err());
    }

    #[test]
    fn eval_noise_streams_are_reproducible_and_distinct() {
        let a = eval_noise(EVAL_SEED, &[1, 2], 4, 3);
        assert_eq!(a, eval_noise(EVAL_SEED, &[1, 2], 4, 3));
        assert_ne!(a, eval_noise(EVAL_SEED, &[1, 3], 4, 3));
        assert_eq!(a.shape(), &[4, 3]);
    }

    #[test]
    fn reference_numbers_per_variant() {
        let got: Vec<(f64, f64)> = PerceptualVariant::ALL.iter().map(|&v| reference_accuracy(v)).collect();
        assert_eq!(got, [(0.76, 0.66), (0.83, 0.66), (0.80, 0.76), (0.85, 0.89)]);
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let row = |v: PerceptualVariant, acc: f64| ComparisonRow {
            variant: v.flag().into(),
            method: v.method_name().into(),
            n: 1500,
            runs: 1,
            accuracy: acc,
            accuracy_std: 0.0,
            per_seed: vec![acc],
            reference_bird: reference_accuracy(v).0,
            reference_flower: reference_accuracy(v).1,
        };
        let table = ComparisonTable {
            rows: vec![row(PerceptualVariant::None, 0.5), row(PerceptualVariant::Gram, 0.625)],
            classifier_accuracy: 1.0,
            steps: 10,
            seeds: vec![0],
            n_per_query: 500,
            queries: Vec::new(),
            perceptual_at_least_baseline: Some(true),
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,method,n,runs,accuracy,accuracy_std,reference_bird,reference_flower");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("gram,"));
        assert!(lines[2].contains(",0.625000,"));
    }
}
