//! Alternating discriminator/generator optimization with deterministic
//! seeding, JSON-line metrics and resumable checkpoints.

mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_triplet_batch, Dataset, TrainIndex, TripletBatch};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_loss, LossConfig};
use crate::models::{ArchConfig, Discriminator, FeatureNet, FeatureNetConfig, Generator, Mode};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint, CHECKPOINT_VERSION};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const FINAL_DIR: &str = "final";
pub const CHECKPOINT_SUBDIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub params: u64,
    pub data: u64,
    pub noise: u64,
}

impl Seeds {
    /// Three distinct seeds derived from one.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            params: derive_seed(base, &[1]),
            data: derive_seed(base, &[2]),
            noise: derive_seed(base, &[3]),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub loss: LossConfig,
    pub seeds: Seeds,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub arch: ArchConfig,
    pub feature: FeatureNetConfig,
    /// Optional tensor archive replacing the seeded feature-net weights.
    pub feature_weights: Option<PathBuf>,
    /// Dataset directory the run was trained on, recorded for later sampling
    /// and evaluation.
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            steps: 500,
            loss: LossConfig::default(),
            seeds: Seeds::default(),
            checkpoint_every: 0,
            arch: ArchConfig::default(),
            feature: FeatureNetConfig::default(),
            feature_weights: None,
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batchnorm".into()));
        }
        self.loss.validate()?;
        self.arch.validate()?;
        self.feature.validate()?;
        if self.loss.feature_layer == 0 || self.loss.feature_layer > self.feature.channels.len() {
            return Err(Error::Config(format!(
                "feature_layer {} outside 1..={}",
                self.loss.feature_layer,
                self.feature.channels.len()
            )));
        }
        Ok(())
    }

    pub fn feature_net(&self) -> Result<FeatureNet<f32>> {
        match &self.feature_weights {
            Some(dir) => FeatureNet::import(&self.feature, dir),
            None => FeatureNet::init(&self.feature),
        }
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    pub l_cont: f64,
    /// Unweighted perceptual term; 0 when it is not evaluated.
    pub l_perc: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_adam: AdamState<f32>,
    pub d_adam: AdamState<f32>,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::init(&cfg.arch, derive_seed(cfg.seeds.params, &[0x47]))?;
        let discriminator = Discriminator::init(&cfg.arch, derive_seed(cfg.seeds.params, &[0x44]))?;
        let g_adam = AdamState::new(generator.params().tensors());
        let d_adam = AdamState::new(discriminator.params().tensors());
        Ok(TrainState {
            step: 0,
            generator,
            discriminator,
            g_adam,
            d_adam,
            data_rng: rng_from(cfg.seeds.data, &[0x64]),
            noise_rng: rng_from(cfg.seeds.noise, &[0x7a]),
        })
    }

    /// Draws the next batch from the state's own RNG streams.
    pub fn next_batch(&mut self, dataset: &Dataset, index: &TrainIndex, cfg: &TrainConfig) -> Result<TripletBatch> {
        sample_triplet_batch(
            dataset,
            index,
            cfg.batch_size,
            cfg.arch.d_z,
            &mut self.data_rng,
            &mut self.noise_rng,
        )
    }
}

fn check_batch(batch: &TripletBatch, arch: &ArchConfig) -> Result<()> {
    let m = batch.len();
    let s = arch.image_side;
    if batch.x.shape() != [m, 3, s, s]
        || batch.h_right.shape() != [m, arch.d_h]
        || batch.h_wrong.shape() != [m, arch.d_h]
        || batch.z.shape() != [m, arch.d_z]
    {
        return Err(Error::shape(
            "train_step",
            format!("batch of {m} at side {s}, d_h {}, d_z {}", arch.d_h, arch.d_z),
            format!("x {:?}, h {:?}, z {:?}", batch.x.shape(), batch.h_right.shape(), batch.z.shape()),
        ));
    }
    Ok(())
}

fn diverged(step: u64, e: Error, terms: &str) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            step,
            detail: format!("{e}; {terms}"),
        }
    } else {
        e
    }
}

/// Discriminator loss on `batch` with the given networks, where the fake
/// images come from `generator` under training-mode batch statistics.
/// Neither network's state is changed.
pub fn evaluate_discriminator_loss(
    generator: &Generator<f32>,
    discriminator: &Discriminator<f32>,
    batch: &TripletBatch,
    loss: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (l, _) = record_discriminator_loss(&mut tape, generator, discriminator, batch, loss, false)?;
    Ok(tape.value(l).data()[0] as f64)
}

type DiscriminatorPass = (crate::Var, Option<(crate::models::Bound, Vec<crate::models::Forward<f32>>)>);

fn record_discriminator_loss(
    tape: &mut Tape<f32>,
    generator: &Generator<f32>,
    discriminator: &Discriminator<f32>,
    batch: &TripletBatch,
    loss: &LossConfig,
    trainable: bool,
) -> Result<DiscriminatorPass> {
    let gb = generator.bind(tape, false);
    let z = tape.constant(batch.z.clone());
    let hr = tape.constant(batch.h_right.clone());
    let hw = tape.constant(batch.h_wrong.clone());
    let x = tape.constant(batch.x.clone());
    let fake = generator.forward(tape, &gb, z, hr, Mode::Train)?.out;
    let fake = tape.detach(fake);
    let db = discriminator.bind(tape, trainable);
    let rr = discriminator.forward(tape, &db, x, hr, Mode::Train)?;
    let rw = discriminator.forward(tape, &db, x, hw, Mode::Train)?;
    let fr = discriminator.forward(tape, &db, fake, hr, Mode::Train)?;
    let l = discriminator_loss(tape, rr.out, rw.out, fr.out, loss.log_clamp_eps)?;
    Ok((l, trainable.then(|| (db, vec![rr, rw, fr]))))
}

/// One discriminator update followed by one generator update.
///
/// The D step scores `(x|h)`, `(x|ĥ)` and `(G(z|h)|h)` with the fake images
/// held constant. The G step regenerates `G(z|h)` with the same `z`, scores
/// it with the updated D and minimizes `ℓ_cont + λ·ℓ_perc` against the real
/// `x`. Parameters of the network not being updated are never modified;
/// batchnorm running averages of each network are updated only by its own
/// step.
pub fn train_step(state: &mut TrainState, batch: &TripletBatch, cfg: &TrainConfig, feature_net: &FeatureNet<f32>) -> Result<StepMetrics> {
    check_batch(batch, &cfg.arch)?;
    let step = state.step + 1;

    let mut tape = Tape::new();
    let (l_d_var, bound) =
        record_discriminator_loss(&mut tape, &state.generator, &state.discriminator, batch, &cfg.loss, true)
            .map_err(|e| diverged(step, e, "during discriminator forward"))?;
    let (db, d_forwards) = bound.expect("trainable pass");
    let l_d = tape.value(l_d_var).data()[0] as f64;
    let d_terms = format!("L_D={l_d}");
    tape.backward(l_d_var).map_err(|e| diverged(step, e, &d_terms))?;
    let d_grads = state.discriminator.params().grads(&tape, &db);
    adam_step(state.discriminator.params_mut().tensors_mut(), &d_grads, &mut state.d_adam, &cfg.adam)
        .map_err(|e| diverged(step, e, &d_terms))?;
    for f in &d_forwards {
        state.discriminator.absorb_stats(f)?;
    }
    drop(tape);

    let mut tape = Tape::new();
    let gb = state.generator.bind(&mut tape, true);
    let z = tape.constant(batch.z.clone());
    let hr = tape.constant(batch.h_right.clone());
    let x = tape.constant(batch.x.clone());
    let g_fwd = state
        .generator
        .forward(&mut tape, &gb, z, hr, Mode::Train)
        .map_err(|e| diverged(step, e, &d_terms))?;
    let db = state.discriminator.bind(&mut tape, false);
    let fr = state
        .discriminator
        .forward(&mut tape, &db, g_fwd.out, hr, Mode::Train)
        .map_err(|e| diverged(step, e, &d_terms))?;
    let gl = generator_loss(&mut tape, &cfg.loss, fr.out, x, g_fwd.out, feature_net).map_err(|e| diverged(step, e, &d_terms))?;
    let l_cont = tape.value(gl.contextual).data()[0] as f64;
    let l_perc = gl.perceptual.map_or(0.0, |p| tape.value(p).data()[0] as f64);
    let l_g = tape.value(gl.total).data()[0] as f64;
    let terms = format!("L_D={l_d}, l_cont={l_cont}, l_perc={l_perc}, L_G={l_g}");
    if ![l_cont, l_perc, l_g].iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { step, detail: terms });
    }
    tape.backward(gl.total).map_err(|e| diverged(step, e, &terms))?;
    let g_grads = state.generator.params().grads(&tape, &gb);
    adam_step(state.generator.params_mut().tensors_mut(), &g_grads, &mut state.g_adam, &cfg.adam)
        .map_err(|e| diverged(step, e, &terms))?;
    state.generator.absorb_stats(&g_fwd)?;

    state.step = step;
    Ok(StepMetrics {
        step,
        l_d,
        l_cont,
        l_perc,
        l_g,
    })
}

/// Result of [`train_loop`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the steps run by this invocation.
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Where a run starts from.
#[derive(Clone, Debug, Default)]
pub enum Start {
    #[default]
    Fresh,
    Resume(PathBuf),
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_SUBDIR).join(format!("step-{step:06}"))
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, keep_through: Option<u64>) -> Result<File> {
    match keep_through {
        None => File::create(path).map_err(|e| Error::io(path, e)),
        Some(k) => {
            let kept: Vec<String> = match File::open(path) {
                Ok(f) => BufReader::new(f)
                    .lines()
                    .map_while(|l| l.ok())
                    .filter(|l| {
                        serde_json::from_str::<serde_json::Value>(l)
                            .ok()
                            .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                            .is_some_and(|s| s <= k)
                    })
                    .collect(),
                Err(_) => Vec::new(),
            };
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            for l in kept {
                writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
            }
            drop(f);
            OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
        }
    }
}

/// Runs `cfg.steps` total steps on the dataset's training split.
///
/// Writes `train_config.json`, one `metrics.jsonl` line per step (loss values
/// only, so that logs of identically seeded runs are byte-identical), a
/// separate `timing.jsonl` with wall-clock times, checkpoints every
/// `checkpoint_every` steps under `checkpoints/` and the final state under
/// `final/`. When resuming, existing log lines past the checkpoint are
/// discarded.
pub fn train_loop(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path, start: Start) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.manifest.image_side != cfg.arch.image_side || dataset.manifest.d_h != cfg.arch.d_h {
        return Err(Error::Config(format!(
            "dataset has side {} and d_h {}, model expects {} and {}",
            dataset.manifest.image_side, dataset.manifest.d_h, cfg.arch.image_side, cfg.arch.d_h
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let index = TrainIndex::train_split(dataset)?;
    let feature_net = cfg.feature_net()?;
    let (mut state, keep) = match &start {
        Start::Fresh => (TrainState::init(cfg)?, None),
        Start::Resume(dir) => {
            let (state, saved) = load_checkpoint(dir)?;
            if saved.arch != cfg.arch {
                return Err(Error::Config(format!("{}: checkpoint architecture differs from config", dir.display())));
            }
            let k = state.step;
            (state, Some(k))
        }
    };
    write_json(&out_dir.join(TRAIN_CONFIG_FILE), cfg)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    let mut metrics_log = open_log(&metrics_path, keep)?;
    let mut timing_log = open_log(&timing_path, keep)?;
    let clock = Instant::now();
    let mut metrics = Vec::new();
    while state.step < cfg.steps {
        let batch = state.next_batch(dataset, &index, cfg)?;
        let m = train_step(&mut state, &batch, cfg, &feature_net)?;
        let line = serde_json::to_string(&m).map_err(|e| Error::json(&metrics_path, e))?;
        writeln!(metrics_log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        let t = serde_json::json!({"step": m.step, "wallclock_ms": clock.elapsed().as_millis() as u64});
        writeln!(timing_log, "{t}").map_err(|e| Error::io(&timing_path, e))?;
        metrics.push(m);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            save_checkpoint(&state, cfg, &checkpoint_dir(out_dir, state.step))?;
        }
    }
    metrics_log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_DIR);
    save_checkpoint(&state, cfg, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        metrics,
        final_checkpoint,
    })
}

/// Parses a metrics log written by [`train_loop`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::json(path, e))
        })
        .collect()
}

/// Raw little-endian bytes of a tensor list, for byte-level comparisons.
pub fn tensor_bytes(tensors: &[Tensor<f32>]) -> Vec<u8> {
    tensors.iter().flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}
