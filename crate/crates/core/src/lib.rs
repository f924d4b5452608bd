//! Boundary-sample generation for imbalanced ordinal image classification.
//!
//! An encoder's final feature map is split into structural and categorical
//! blocks. Fusing the structural block of a main image with the categorical
//! block of an image from an adjacent category, and decoding the result,
//! yields an extra training image labelled with the adjacent category.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod training;

pub use config::{Ablation, Config, FusionMode};
pub use data::{Image, OrdinalDataset, OrdinalSample, SyntheticSpec};
pub use error::{CigError, Result};
pub use evaluation::{PerCategoryReport, PredictionRecord};
pub use training::{run_training, CigModel, MetricRecord, TrainOutcome, TrainState, Trainer};
