//! Checkpoint directory: the tensor archive (`manifest.json`, `weights.bin`)
//! with generator, discriminator and both optimizers' moments, `state.json`
//! (step, Adam step counters, RNG positions, config echo), `config.json`
//! (architecture) and `checksum.crc32` over all four files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_json, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, Discriminator, Generator};
use crate::rng::RngState;
use crate::tensor::archive::{read_archive, write_archive, MANIFEST_FILE, WEIGHTS_FILE};
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_FILE: &str = "state.json";
const CONFIG_FILE: &str = "config.json";
const CHECKSUM_FILE: &str = "checksum.crc32";
const COVERED: [&str; 4] = [MANIFEST_FILE, WEIGHTS_FILE, STATE_FILE, CONFIG_FILE];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: u64,
    g_adam_step: u64,
    d_adam_step: u64,
    data_rng: RngState,
    noise_rng: RngState,
    config: TrainConfig,
}

fn adam_entries(prefix: &str, names: &[String], state: &AdamState<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (n, m) in names.iter().zip(&state.m) {
        out.push((format!("{prefix}.m.{n}"), m.clone()));
    }
    for (n, v) in names.iter().zip(&state.v) {
        out.push((format!("{prefix}.v.{n}"), v.clone()));
    }
    out
}

fn checksum(dir: &Path) -> Result<u32> {
    let mut h = crc32fast::Hasher::new();
    for f in COVERED {
        let p = dir.join(f);
        h.update(&fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(h.finalize())
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    named.extend(state.generator.named_tensors().into_iter().map(|(n, t)| (format!("g.{n}"), t)));
    named.extend(state.discriminator.named_tensors().into_iter().map(|(n, t)| (format!("d.{n}"), t)));
    named.extend(adam_entries("g_adam", state.generator.params().names(), &state.g_adam));
    named.extend(adam_entries("d_adam", state.discriminator.params().names(), &state.d_adam));
    let refs: Vec<(String, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_archive(dir, &refs)?;
    let sf = StateFile {
        version: CHECKPOINT_VERSION,
        step: state.step,
        g_adam_step: state.g_adam.step,
        d_adam_step: state.d_adam.step,
        data_rng: RngState::capture(&state.data_rng),
        noise_rng: RngState::capture(&state.noise_rng),
        config: cfg.clone(),
    };
    write_json(&dir.join(STATE_FILE), &sf)?;
    write_json(&dir.join(CONFIG_FILE), &state.generator.config())?;
    let sum = checksum(dir)?;
    let p = dir.join(CHECKSUM_FILE);
    fs::write(&p, format!("{sum:08x}\n")).map_err(|e| Error::io(&p, e))
}

fn load_adam(prefix: &str, names: &[String], table: &mut HashMap<String, Tensor<f32>>, step: u64) -> Result<AdamState<f32>> {
    let mut take = |k: String| table.remove(&k).ok_or_else(|| Error::Config(format!("missing tensor {k}")));
    let m = names.iter().map(|n| take(format!("{prefix}.m.{n}"))).collect::<Result<Vec<_>>>()?;
    let v = names.iter().map(|n| take(format!("{prefix}.v.{n}"))).collect::<Result<Vec<_>>>()?;
    Ok(AdamState { step, m, v })
}

/// Loads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let sum_path = dir.join(CHECKSUM_FILE);
    let recorded = fs::read_to_string(&sum_path).map_err(|e| Error::io(&sum_path, e))?;
    let recorded = u32::from_str_radix(recorded.trim(), 16).map_err(|_| Error::format(&sum_path, "not a hex CRC32"))?;
    if checksum(dir)? != recorded {
        return Err(Error::Checksum { path: dir.into() });
    }
    let state_path = dir.join(STATE_FILE);
    let raw = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| Error::json(&state_path, e))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: state_path,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let sf: StateFile = serde_json::from_value(value).map_err(|e| Error::json(&state_path, e))?;
    let config_path = dir.join(CONFIG_FILE);
    let raw = fs::read(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let arch: ArchConfig = serde_json::from_slice(&raw).map_err(|e| Error::json(&config_path, e))?;
    if arch != sf.config.arch {
        return Err(Error::format(&config_path, "architecture differs from state.json"));
    }

    let mut table: HashMap<String, Tensor<f32>> = read_archive(dir)?.into_iter().collect();
    let mut generator = Generator::init(&arch, 0)?;
    generator.load_tensors("g.", &mut |k| table.get(k).cloned())?;
    let mut discriminator = Discriminator::init(&arch, 0)?;
    discriminator.load_tensors("d.", &mut |k| table.get(k).cloned())?;
    let g_adam = load_adam("g_adam", generator.params().names(), &mut table, sf.g_adam_step)?;
    let d_adam = load_adam("d_adam", discriminator.params().names(), &mut table, sf.d_adam_step)?;
    let bad_rng = || Error::format(&state_path, "malformed RNG state");
    let state = TrainState {
        step: sf.step,
        generator,
        discriminator,
        g_adam,
        d_adam,
        data_rng: sf.data_rng.restore().ok_or_else(bad_rng)?,
        noise_rng: sf.noise_rng.restore().ok_or_else(bad_rng)?,
    };
    Ok((state, sf.config))
}

/// Generator weights and architecture of a checkpoint, for sampling and
/// evaluation.
pub fn load_generator(dir: &Path) -> Result<Generator<f32>> {
    Ok(load_checkpoint(dir)?.0.generator)
}
