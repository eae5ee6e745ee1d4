//! On-device detection of model-extraction query streams.
//!
//! An autoencoder and a latent-space classifier serve predictions; a
//! per-session detector tracks reconstruction error, latent query spread and
//! output entropy, and flags sessions whose mixed leakage rate leaves the band
//! observed on benign traffic.

pub mod attacks;
pub mod autoencoder;
pub mod baselines;
mod codec;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod forest;
pub mod harness;
pub mod nn;
pub mod numeric;
pub mod persistence;
pub mod service;

pub use attacks::{AttackConfig, AttackKind, AttackResult, Pipeline, QueryTarget, Surface};
pub use autoencoder::{train_autoencoder, Autoencoder};
pub use baselines::{BaselineVerdict, Method};
pub use dataset::{DatasetSplit, SplitTag, SyntheticConfig};
pub use detector::{CalibrationTable, DetectorConfig, DetectorState, LeakageBreakdown, Verdict};
pub use error::{Error, Result};
pub use harness::{ExperimentReport, PipelineConfig};
pub use nn::{OptimizerKind, TrainConfig};
pub use numeric::{Matrix, Rng};
pub use persistence::{EncryptedState, ModelBundle, StateKey};
pub use service::{ServiceKind, ServiceModel};
