use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_side: usize,
    pub n_classes: usize,
    pub channels: Vec<usize>,
}

impl ClassifierConfig {
    pub fn new(image_side: usize, n_classes: usize) -> Self {
        ClassifierConfig {
            image_side,
            n_classes,
            channels: vec![8, 16, 32],
        }
    }

    fn validate(&self) -> Result<()> {
        let shrink = 1usize << self.channels.len();
        if self.n_classes < 2 || self.channels.is_empty() || !self.image_side.is_multiple_of(shrink) {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes and an image side divisible by {shrink}"
            )));
        }
        Ok(())
    }
}

/// Small strided-conv classifier with a linear softmax head. The validation
/// accuracy is recorded once training finishes; until then the classifier
/// refuses to produce predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    config: ClassifierConfig,
    params: ParamSet<T>,
    validation_accuracy: Option<f64>,
}

impl<T: Real> Classifier<T> {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0x636c73]);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * 16) as f64).sqrt();
            params.push(format!("conv{i}.w"), Tensor::randn(&[cout, cin, 4, 4], 0.0, std, &mut rng));
            params.push(format!("conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let side = config.image_side >> config.channels.len();
        let flat = cin * side * side;
        let std = (1.0 / flat as f64).sqrt();
        params.push("head.w", Tensor::randn(&[flat, config.n_classes], 0.0, std, &mut rng));
        params.push("head.b", Tensor::zeros(&[config.n_classes]));
        Ok(Classifier {
            config: config.clone(),
            params,
            validation_accuracy: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn validation_accuracy(&self) -> Option<f64> {
        self.validation_accuracy
    }

    pub fn set_validation_accuracy(&mut self, acc: f64) {
        self.validation_accuracy = Some(acc);
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> super::Bound {
        self.params.bind(tape, trainable)
    }

    /// Logits `[N, K]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &super::Bound, x: Var) -> Result<Var> {
        let s = self.config.image_side;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != [3, s, s] {
            return Err(Error::shape("classifier", format!("[N, 3, {s}, {s}]"), format!("{xs:?}")));
        }
        let mut p = bound.cursor();
        let mut f = x;
        for _ in 0..self.config.channels.len() {
            let (w, b) = (p.take(), p.take());
            f = tape.conv2d(f, w, Some(b), 2, 1)?;
            f = tape.leaky_relu(f, 0.2)?;
        }
        let flat: usize = tape.shape(f)[1..].iter().product();
        let f = tape.reshape(f, &[xs[0], flat])?;
        let (w, b) = (p.take(), p.take());
        tape.linear(f, w, b)
    }

    /// Class probabilities `[N, K]` without the trained-state guard.
    pub fn probabilities_unchecked(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, &bound, xv)?;
        let k = self.config.n_classes;
        let probs = crate::tensor::tape_softmax(tape.value(logits).data(), k);
        Tensor::new(vec![x.shape()[0], k], probs)
    }

    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.validation_accuracy.is_none() {
            return Err(Error::Config("classifier has not been trained".into()));
        }
        self.probabilities_unchecked(x)
    }

    /// Argmax class per example.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities(x)?;
        Ok(argmax_rows(probs.data(), self.config.n_classes))
    }

    pub fn predict_unchecked(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities_unchecked(x)?;
        Ok(argmax_rows(probs.data(), self.config.n_classes))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect()
    }

    pub fn load_tensors(&mut self, entries: &mut dyn FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        self.params.load_named("", entries)
    }
}

fn argmax_rows<T: Real>(p: &[T], k: usize) -> Vec<usize> {
    p.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
