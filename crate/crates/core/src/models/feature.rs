use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{archive, Real, Tape, Tensor, Var};

use super::ParamSet;
use std::path::Path;

/// Fixed convolutional feature extractor used by the activation and Gram
/// losses. Weights are never trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureNetConfig {
    /// Output channels of each conv+ReLU block (each halves the resolution).
    pub channels: Vec<usize>,
    /// 1-based index of the block whose ReLU output is tapped.
    pub tap: usize,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            channels: vec![8, 16, 32, 32],
            tap: 2,
            seed: 19,
        }
    }
}

impl FeatureNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("feature net needs at least one non-empty block".into()));
        }
        if self.tap == 0 || self.tap > self.channels.len() {
            return Err(Error::Config(format!(
                "feature tap {} outside 1..={}",
                self.tap,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet<T> {
    config: FeatureNetConfig,
    params: ParamSet<T>,
}

impl<T: Real> FeatureNet<T> {
    /// Seeded random weights, He-scaled so activations keep their magnitude
    /// through the ReLU stack.
    pub fn init(config: &FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(config.seed, &[0x6665_6174]);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * 16) as f64).sqrt();
            params.push(format!("conv{i}.w"), Tensor::randn(&[cout, cin, 4, 4], 0.0, std, &mut rng));
            params.push(format!("conv{i}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        Ok(FeatureNet {
            config: config.clone(),
            params,
        })
    }

    /// Replaces the seeded weights with tensors from an archive
    /// (`conv{i}.w`, `conv{i}.b`).
    pub fn import(config: &FeatureNetConfig, dir: &Path) -> Result<Self> {
        let mut net = Self::init(config)?;
        let entries = archive::read_archive(dir)?;
        net.params.load_named("", &mut |k| {
            entries.iter().find(|(n, _)| n == k).map(|(_, t)| t.cast::<T>())
        })?;
        Ok(net)
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Post-ReLU activations of block `tap`, recorded on `tape`. Weights are
    /// bound as constants, so gradients reach `x` but never the weights.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_at(tape, x, self.config.tap)
    }

    /// As [`FeatureNet::forward`] but tapping block `tap` (1-based).
    pub fn forward_at(&self, tape: &mut Tape<T>, x: Var, tap: usize) -> Result<Var> {
        if tap == 0 || tap > self.config.channels.len() {
            return Err(Error::Config(format!(
                "feature tap {tap} outside 1..={}",
                self.config.channels.len()
            )));
        }
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != 3 {
            return Err(Error::shape("feature_net", "[N, 3, S, S]", format!("{xs:?}")));
        }
        let bound = self.params.bind(tape, false);
        let mut p = bound.cursor();
        let mut f = x;
        for _ in 0..tap {
            let (w, b) = (p.take(), p.take());
            f = tape.conv2d(f, w, Some(b), 2, 1)?;
            f = tape.relu(f)?;
        }
        Ok(f)
    }

    pub fn activations(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect()
    }

    pub fn load_tensors(&mut self, prefix: &str, entries: &mut dyn FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        self.params.load_named(prefix, entries)
    }
}
