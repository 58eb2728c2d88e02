//! Generator, discriminator, fixed feature network and evaluation classifier.

mod classifier;
mod discriminator;
mod feature;
mod generator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Real, Tape, Tensor, Var};

pub use classifier::{Classifier, ClassifierConfig};
pub use discriminator::Discriminator;
pub use feature::{FeatureNet, FeatureNetConfig};
pub use generator::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters shared by G and D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Image side `S`; a power of two, at least 16.
    pub image_side: usize,
    pub d_z: usize,
    /// Conditioning embedding width.
    pub d_h: usize,
    /// Width of the learned embedding projection.
    pub d_proj: usize,
    /// Channels of G's last hidden block; doubles per block towards the input.
    pub g_channels: usize,
    /// Channels of D's first block; doubles per block.
    pub d_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_side: 32,
            d_z: 100,
            d_h: 32,
            d_proj: 16,
            g_channels: 32,
            d_channels: 16,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            leaky_slope: 0.2,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    /// Dimensions used for the full-size experiments: 64×64 images,
    /// 1024-d embeddings projected to 128.
    pub fn paper_scale() -> Self {
        ArchConfig {
            image_side: 64,
            d_h: 1024,
            d_proj: 128,
            g_channels: 64,
            d_channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_side;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image_side {s} must be a power of two >= 16")));
        }
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("d_proj", self.d_proj),
            ("g_channels", self.g_channels),
            ("d_channels", self.d_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in (0, 1]".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Number of resolution doublings between the 4×4 base and `S`.
    pub fn octaves(&self) -> usize {
        (self.image_side / 4).trailing_zeros() as usize
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients for a binding, zero-filled where nothing flowed.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }

    /// Replaces tensors by name-order from an archive listing, checking shapes.
    pub(crate) fn load_named(&mut self, prefix: &str, entries: &mut dyn FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = entries(&key).ok_or_else(|| Error::Config(format!("missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load", format!("{key} {:?}", t.shape()), format!("{:?}", src.shape())));
            }
            *t = src;
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Copy with parameter `i` replaced by `v`.
    pub fn replaced(&self, i: usize, v: Var) -> Bound {
        let mut vars = self.vars.clone();
        vars[i] = v;
        Bound { vars }
    }

    pub(crate) fn cursor(&self) -> Cursor<'_> {
        Cursor { vars: &self.vars, next: 0 }
    }
}

pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    pub(crate) fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Exponential moving averages of batchnorm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::of_f64(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Output of a network forward pass, with the batch statistics of every
/// training-mode batchnorm layer in layer order.
#[derive(Debug)]
pub struct Forward<T> {
    pub out: Var,
    pub batch_stats: Vec<BatchStats<T>>,
}

pub(crate) fn apply_stats<T: Real>(running: &mut [RunningStats<T>], batch: &[BatchStats<T>], momentum: f64) -> Result<()> {
    if running.len() != batch.len() {
        return Err(Error::shape("running_stats", format!("{} layers", running.len()), format!("{}", batch.len())));
    }
    for (r, b) in running.iter_mut().zip(batch) {
        r.update(b, momentum);
    }
    Ok(())
}

pub(crate) fn stats_slices<T: Real>(stats: &[RunningStats<T>]) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), Tensor::new(vec![s.mean.len()], s.mean.clone()).expect("stats")));
        out.push((format!("bn{i}.running_var"), Tensor::new(vec![s.var.len()], s.var.clone()).expect("stats")));
    }
    out
}

pub(crate) fn load_stats<T: Real>(prefix: &str, stats: &mut [RunningStats<T>], entries: &mut dyn FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
    for (i, s) in stats.iter_mut().enumerate() {
        for (field, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
            let key = format!("{prefix}bn{i}.{field}");
            let t = entries(&key).ok_or_else(|| Error::Config(format!("missing tensor {key}")))?;
            if t.len() != dst.len() {
                return Err(Error::shape("load", format!("{key} [{}]", dst.len()), format!("{:?}", t.shape())));
            }
            *dst = t.into_data();
        }
    }
    Ok(())
}
