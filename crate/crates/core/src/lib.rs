//! Conditional GAN text-to-image training with contextual and perceptual
//! (pixel, activation, Gram) generator losses, on procedurally rendered
//! attribute-conditioned image datasets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use losses::{LossConfig, PerceptualVariant};
pub use models::{ArchConfig, Classifier, Discriminator, FeatureNet, FeatureNetConfig, Generator, Mode};
pub use tensor::{Real, Tape, Tensor, Var};
