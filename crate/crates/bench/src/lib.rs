//! Fixtures shared by the criterion benches.

use leakguard_core::harness::{deploy, load_dataset, Deployment, LoadedData};
use leakguard_core::{PipelineConfig, SyntheticConfig};

/// A deployment on a reduced surrogate that trains in a few seconds.
pub fn small_deployment() -> (LoadedData, Deployment, PipelineConfig) {
    let mut cfg = PipelineConfig::default();
    if let leakguard_core::harness::DatasetSource::Synthetic { config, .. } = &mut cfg.dataset {
        *config = SyntheticConfig {
            samples: 1200,
            ..SyntheticConfig::default()
        };
    }
    cfg.autoencoder.epochs = 4;
    cfg.calibration_sessions = 20;
    cfg.detector.max_horizon = 500;
    let data = load_dataset(&cfg.dataset, cfg.seed).expect("dataset loads");
    let dep = deploy(&data.train, &cfg).expect("deployment trains");
    (data, dep, cfg)
}
