//! Multi-expert image-text misinformation classifier that stays usable when
//! words or image patches are missing.
//!
//! The crate covers the whole experiment loop: deterministic corruption of
//! samples, a three-expert model with residual adapters and learned routing,
//! the label-aware contrastive objective, training, metrics and reports.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod trainer;

pub use checkpoint::TrainedModel;
pub use config::{ExperimentConfig, Toggle};
pub use corruption::{MaskSpec, MissingRates};
pub use datasets::{Image, Sample};
pub use error::{Error, Result};
pub use model::{ExpertBundle, MmlNet};
