use rand_distr::{Distribution, Normal};

use super::{apply_stats, load_stats, stats_slices, ArchConfig, Bound, Forward, Mode, ParamSet, RunningStats};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{BnMode, Real, Tape, Tensor, Var};

/// Matching-aware discriminator. Strided convolutions reduce the image to a
/// 4×4 feature map, the projected embedding is replicated over that grid and
/// depth-concatenated, and a 1×1 + 4×4 head produces one sigmoid score.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: ArchConfig,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0x646973]);
        let std = config.init_std;
        let mut normal = |shape: &[usize], mean: f64| -> Tensor<T> {
            let dist = Normal::new(mean, std).expect("std > 0");
            Tensor::from_fn(shape, |_| T::of_f64(dist.sample(&mut rng)))
        };
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        let n = config.octaves();
        let mut cin = 3;
        for i in 0..n {
            let cout = config.d_channels << i;
            params.push(format!("down{i}.w"), normal(&[cout, cin, 4, 4], 0.0));
            if i == 0 {
                params.push("down0.b", Tensor::zeros(&[cout]));
            } else {
                params.push(format!("down{i}.gamma"), normal(&[cout], 1.0));
                params.push(format!("down{i}.beta"), Tensor::zeros(&[cout]));
                running.push(RunningStats::new(cout));
            }
            cin = cout;
        }
        let feat = cin;
        params.push("proj.w", normal(&[config.d_h, config.d_proj], 0.0));
        params.push("proj.b", Tensor::zeros(&[config.d_proj]));
        params.push("joint.w", normal(&[feat, feat + config.d_proj, 1, 1], 0.0));
        params.push("joint.gamma", normal(&[feat], 1.0));
        params.push("joint.beta", Tensor::zeros(&[feat]));
        running.push(RunningStats::new(feat));
        params.push("head.w", normal(&[1, feat, 4, 4], 0.0));
        params.push("head.b", Tensor::zeros(&[1]));
        Ok(Discriminator {
            config: config.clone(),
            params,
            running,
        })
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

    /// Number of convolution layers (downsampling, joint and head).
    pub fn conv_blocks(&self) -> usize {
        self.config.octaves() + 2
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn bn_mode(&self, layer: usize, mode: Mode) -> BnMode<'_, T> {
        match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: &self.running[layer].mean,
                var: &self.running[layer].var,
            },
        }
    }

    /// `x[N,3,S,S]`, `h[N,d_h]` to scores `[N]` in (0, 1).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, h: Var, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let s = cfg.image_side;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != [3, s, s] {
            return Err(Error::shape("discriminator", format!("x [N, 3, {s}, {s}]"), format!("{xs:?}")));
        }
        let n = xs[0];
        let hs = tape.shape(h).to_vec();
        if hs != [n, cfg.d_h] {
            return Err(Error::shape("discriminator", format!("h [{n}, {}]", cfg.d_h), format!("{hs:?}")));
        }
        let slope = cfg.leaky_slope;
        let mut p = bound.cursor();
        let mut batch_stats = Vec::new();
        let mut bn_layer = 0;
        let mut f = x;
        for i in 0..cfg.octaves() {
            let w = p.take();
            if i == 0 {
                let b = p.take();
                f = tape.conv2d(f, w, Some(b), 2, 1)?;
            } else {
                f = tape.conv2d(f, w, None, 2, 1)?;
                let (gamma, beta) = (p.take(), p.take());
                let (y, stats) = tape.batchnorm(f, gamma, beta, cfg.bn_eps, self.bn_mode(bn_layer, mode))?;
                batch_stats.extend(stats);
                bn_layer += 1;
                f = y;
            }
            f = tape.leaky_relu(f, slope)?;
        }
        let (pw, pb) = (p.take(), p.take());
        let e = tape.linear(h, pw, pb)?;
        let e = tape.leaky_relu(e, slope)?;
        let grid = tape.tile_spatial(e, 4, 4)?;
        let joint = tape.concat(f, grid, 1)?;
        let jw = p.take();
        let j = tape.conv2d(joint, jw, None, 1, 0)?;
        let (gamma, beta) = (p.take(), p.take());
        let (j, stats) = tape.batchnorm(j, gamma, beta, cfg.bn_eps, self.bn_mode(bn_layer, mode))?;
        batch_stats.extend(stats);
        let j = tape.leaky_relu(j, slope)?;
        let (hw, hb) = (p.take(), p.take());
        let logit = tape.conv2d(j, hw, Some(hb), 1, 0)?;
        let logit = tape.reshape(logit, &[n])?;
        let out = tape.sigmoid(logit)?;
        Ok(Forward { out, batch_stats })
    }

    pub fn absorb_stats(&mut self, fwd: &Forward<T>) -> Result<()> {
        apply_stats(&mut self.running, &fwd.batch_stats, self.config.bn_momentum)
    }

    pub fn score(&self, x: &Tensor<T>, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let fwd = self.forward(&mut tape, &bound, xv, hv, mode)?;
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
