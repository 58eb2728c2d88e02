use rand_distr::{Distribution, Normal};

use super::{apply_stats, load_stats, stats_slices, ArchConfig, Bound, Forward, Mode, ParamSet, RunningStats};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{BnMode, Real, Tape, Tensor, Var};

/// Text-conditioned generator: the embedding is projected, concatenated with
/// the noise vector, and upsampled by transposed convolutions (one per
/// resolution doubling above 4×4) to a `tanh` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: ArchConfig,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
}

impl<T: Real> Generator<T> {
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0x67656e]);
        let std = config.init_std;
        let mut normal = |shape: &[usize], mean: f64| -> Tensor<T> {
            let dist = Normal::new(mean, std).expect("std > 0");
            Tensor::from_fn(shape, |_| T::of_f64(dist.sample(&mut rng)))
        };
        let mut params = ParamSet::new();
        params.push("proj.w", normal(&[config.d_h, config.d_proj], 0.0));
        params.push("proj.b", Tensor::zeros(&[config.d_proj]));
        let widths = Self::widths(config);
        let mut running = Vec::new();
        let mut cin = config.d_z + config.d_proj;
        for (i, &cout) in widths.iter().enumerate() {
            params.push(format!("up{i}.w"), normal(&[cin, cout, 4, 4], 0.0));
            if i + 1 < widths.len() {
                params.push(format!("up{i}.gamma"), normal(&[cout], 1.0));
                params.push(format!("up{i}.beta"), Tensor::zeros(&[cout]));
                running.push(RunningStats::new(cout));
            } else {
                params.push(format!("up{i}.b"), Tensor::zeros(&[cout]));
            }
            cin = cout;
        }
        Ok(Generator {
            config: config.clone(),
            params,
            running,
        })
    }

    /// Output channels of each transposed-conv block; the last is RGB.
    fn widths(config: &ArchConfig) -> Vec<usize> {
        let n = config.octaves();
        let mut w: Vec<usize> = (0..n).map(|i| config.g_channels << (n - 1 - i)).collect();
        w.push(3);
        w
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    /// Number of transposed-convolution blocks.
    pub fn conv_blocks(&self) -> usize {
        Self::widths(&self.config).len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `z[N,d_z]`, `h[N,d_h]` to images `[N,3,S,S]` in (-1, 1).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, z: Var, h: Var, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let (zs, hs) = (tape.shape(z).to_vec(), tape.shape(h).to_vec());
        if zs.len() != 2 || zs[1] != cfg.d_z {
            return Err(Error::shape("generator", format!("z [N, {}]", cfg.d_z), format!("{zs:?}")));
        }
        if hs.len() != 2 || hs[1] != cfg.d_h || hs[0] != zs[0] {
            return Err(Error::shape("generator", format!("h [{}, {}]", zs[0], cfg.d_h), format!("{hs:?}")));
        }
        let n = zs[0];
        let mut p = bound.cursor();
        let (pw, pb) = (p.take(), p.take());
        let e = tape.linear(h, pw, pb)?;
        let e = tape.leaky_relu(e, cfg.leaky_slope)?;
        let joint = tape.concat(z, e, 1)?;
        let mut x = tape.reshape(joint, &[n, cfg.d_z + cfg.d_proj, 1, 1])?;
        let blocks = self.conv_blocks();
        let mut batch_stats = Vec::new();
        for i in 0..blocks {
            let w = p.take();
            let (stride, pad) = if i == 0 { (1, 0) } else { (2, 1) };
            if i + 1 < blocks {
                x = tape.conv_transpose2d(x, w, None, stride, pad)?;
                let (gamma, beta) = (p.take(), p.take());
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train,
                    Mode::Eval => BnMode::Eval {
                        mean: &self.running[i].mean,
                        var: &self.running[i].var,
                    },
                };
                let (y, stats) = tape.batchnorm(x, gamma, beta, cfg.bn_eps, bn_mode)?;
                batch_stats.extend(stats);
                x = tape.relu(y)?;
            } else {
                let b = p.take();
                x = tape.conv_transpose2d(x, w, Some(b), stride, pad)?;
                x = tape.tanh(x)?;
            }
        }
        Ok(Forward { out: x, batch_stats })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn absorb_stats(&mut self, fwd: &Forward<T>) -> Result<()> {
        apply_stats(&mut self.running, &fwd.batch_stats, self.config.bn_momentum)
    }

    /// Inference without gradient tracking.
    pub fn generate(&self, z: &Tensor<T>, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let hv = tape.constant(h.clone());
        let fwd = self.forward(&mut tape, &bound, zv, hv, mode)?;
        Ok(tape.value(fwd.out).clone())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        out.extend(stats_slices(&self.running));
        out
    }

    pub fn load_tensors(&mut self, prefix: &str, entries: &mut dyn FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        self.params.load_named(prefix, entries)?;
        load_stats(prefix, &mut self.running, entries)
    }
}
