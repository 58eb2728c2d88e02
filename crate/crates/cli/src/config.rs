use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use percgan_core::data::DatasetSpec;
use percgan_core::eval::{ClassifierTrainConfig, TargetPredicate, DEFAULT_N_PER_QUERY, DEFAULT_QUERIES, EVAL_SEED};
use percgan_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const OUT_ROOT_ENV: &str = "PERCGAN_OUT_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_per_query: usize,
    pub n_queries: usize,
    pub seed: u64,
    pub predicate: TargetPredicate,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_per_query: DEFAULT_N_PER_QUERY,
            n_queries: DEFAULT_QUERIES,
            seed: EVAL_SEED,
            predicate: TargetPredicate::SameFamily,
            grid_rows: 4,
            grid_cols: 8,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Every setting of one invocation. Built from defaults, then a JSON config
/// file, then command-line flags; the result is echoed to the output
/// directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub eval: EvalSettings,
    /// Base seeds of the runs in a comparison.
    pub compare_seeds: Vec<u64>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(file: Option<&Path>) -> Result<Self> {
        match file {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let raw = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_slice(&raw).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Writes `run_config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        let p = dir.join(RUN_CONFIG_FILE);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }
}

/// `--out` if given, else `$PERCGAN_OUT_ROOT/<default_rel>`.
pub fn resolve_out(explicit: Option<PathBuf>, from_file: Option<PathBuf>, default_rel: &str) -> Result<PathBuf> {
    if let Some(p) = explicit.or(from_file) {
        return Ok(p);
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(default_rel)),
        None => Err(crate::UsageError(format!("`--out` is required when {OUT_ROOT_ENV} is not set")).into()),
    }
}

/// Directory that holds an output file, for the config echo.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
