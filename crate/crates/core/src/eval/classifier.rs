//! Training, validation and persistence of the evaluation classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ShapeFamily};
use crate::error::{Error, Result};
use crate::models::{Classifier, ClassifierConfig};
use crate::rng::rng_from;
use crate::tensor::archive::{read_archive, write_archive};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::training::write_json;

pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const ACCURACY_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of each category's examples held out for validation.
    pub holdout_fraction: f64,
    pub threshold: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            seed: 23,
            holdout_fraction: 0.2,
            threshold: ACCURACY_THRESHOLD,
        }
    }
}

/// A classifier over the categories of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryClassifier {
    pub model: Classifier<f32>,
    /// Category id of each output class.
    pub category_ids: Vec<usize>,
    pub families: Vec<ShapeFamily>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    config: ClassifierConfig,
    category_ids: Vec<usize>,
    families: Vec<ShapeFamily>,
    validation_accuracy: Option<f64>,
}

impl CategoryClassifier {
    pub fn validation_accuracy(&self) -> Option<f64> {
        self.model.validation_accuracy()
    }

    /// Errors unless the recorded validation accuracy reaches `threshold`.
    pub fn ensure_valid(&self, threshold: f64) -> Result<()> {
        let accuracy = self.validation_accuracy().unwrap_or(0.0);
        if accuracy < threshold {
            return Err(Error::ClassifierThreshold { accuracy, threshold });
        }
        Ok(())
    }

    pub fn family_of(&self, category_id: usize) -> Option<ShapeFamily> {
        self.category_ids.iter().position(|&c| c == category_id).map(|i| self.families[i])
    }

    /// Predicted category id per image.
    pub fn predict_categories(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.model.predict(images)?.into_iter().map(|k| self.category_ids[k]).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let named = self.model.named_tensors();
        let refs: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_archive(dir, &refs)?;
        let file = ClassifierFile {
            config: self.model.config().clone(),
            category_ids: self.category_ids.clone(),
            families: self.families.clone(),
            validation_accuracy: self.validation_accuracy(),
        };
        write_json(&dir.join(CLASSIFIER_FILE), &file)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CLASSIFIER_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file: ClassifierFile = serde_json::from_slice(&raw).map_err(|e| Error::json(&path, e))?;
        if file.category_ids.len() != file.config.n_classes || file.families.len() != file.config.n_classes {
            return Err(Error::format(&path, "class table does not match n_classes"));
        }
        let mut model = Classifier::init(&file.config, 0)?;
        let entries = read_archive(dir)?;
        model.load_tensors(&mut |k| entries.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone()))?;
        if let Some(a) = file.validation_accuracy {
            model.set_validation_accuracy(a);
        }
        Ok(CategoryClassifier {
            model,
            category_ids: file.category_ids,
            families: file.families,
        })
    }
}

/// Per-category split of example indices into (train, held out).
fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for cat in &dataset.manifest.categories {
        let mut idx: Vec<usize> = (0..dataset.manifest.examples.len()).filter(|&i| dataset.category_of(i) == cat.id).collect();
        idx.shuffle(&mut rng_from(seed, &[0x686f, cat.id as u64]));
        let n_held = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    (train, held)
}

fn gather(dataset: &Dataset, idx: &[usize]) -> Result<Tensor<f32>> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &dataset.images[i]).collect();
    Tensor::stack(&imgs)
}

/// Fraction of `idx` whose predicted category equals the true one.
fn accuracy(model: &Classifier<f32>, dataset: &Dataset, idx: &[usize], class_of: &dyn Fn(usize) -> usize) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in idx.chunks(128) {
        let preds = model.predict_unchecked(&gather(dataset, chunk)?)?;
        correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == class_of(i)).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Trains a classifier over every category of `dataset` on real images and
/// records its accuracy on a per-category held-out portion. The threshold
/// is not enforced here.
pub fn train_classifier(dataset: &Dataset, cfg: &ClassifierTrainConfig) -> Result<CategoryClassifier> {
    let manifest = &dataset.manifest;
    if manifest.categories.len() < 2 {
        return Err(Error::Config("classifier needs at least 2 categories".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("invalid classifier training config".into()));
    }
    let category_ids: Vec<usize> = manifest.categories.iter().map(|c| c.id).collect();
    let families = manifest.categories.iter().map(|c| c.attributes.family).collect();
    let class_of = |i: usize| {
        let cat = dataset.category_of(i);
        category_ids.iter().position(|&c| c == cat).expect("known category")
    };
    let mut model = Classifier::init(&ClassifierConfig::new(manifest.image_side, category_ids.len()), cfg.seed)?;
    let (mut train, held) = holdout_split(dataset, cfg.holdout_fraction, cfg.seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params().tensors());
    let mut rng = rng_from(cfg.seed, &[0x6570]);
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(gather(dataset, chunk)?);
            let logits = model.forward(&mut tape, &bound, x)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| class_of(i)).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            let grads = model.params().grads(&tape, &bound);
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state, &adam)?;
        }
    }
    let acc = accuracy(&model, dataset, &held, &class_of)?;
    model.set_validation_accuracy(acc);
    Ok(CategoryClassifier {
        model,
        category_ids,
        families,
    })
}

/// [`train_classifier`] followed by the accuracy guard.
pub fn train_eval_classifier(dataset: &Dataset, cfg: &ClassifierTrainConfig) -> Result<CategoryClassifier> {
    let c = train_classifier(dataset, cfg)?;
    c.ensure_valid(cfg.threshold)?;
    Ok(c)
}
