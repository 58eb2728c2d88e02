//! Shared fixtures for the kernel and training-step benchmarks.

use std::path::Path;

use percgan_core::data::{gen_dataset, Dataset, DatasetSpec, TrainIndex};
use percgan_core::training::{TrainConfig, TrainState};
use percgan_core::Result;

/// A small default-shaped dataset rendered into `dir`.
pub fn bench_dataset(dir: &Path) -> Result<Dataset> {
    let spec = DatasetSpec {
        n_categories: 4,
        per_category: 16,
        ..DatasetSpec::default()
    };
    gen_dataset(&spec, dir)?;
    Dataset::load(dir)
}

/// Fresh training state plus the index over the dataset's training split.
pub fn bench_state(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, TrainIndex)> {
    Ok((TrainState::init(cfg)?, TrainIndex::train_split(dataset)?))
}
