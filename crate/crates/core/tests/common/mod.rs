#![allow(dead_code)]

use std::sync::OnceLock;

use leakguard_core::harness::{deploy, load_dataset, DatasetSource, Deployment, LoadedData};
use leakguard_core::numeric::uniform;
use leakguard_core::{DetectorConfig, DetectorState, Matrix, PipelineConfig, Rng, SyntheticConfig};

/// A pipeline small enough to train in well under a second.
pub fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        dataset: DatasetSource::Synthetic {
            config: SyntheticConfig {
                features: 40,
                samples: 600,
                ..SyntheticConfig::default()
            },
            test_fraction: 1.0 / 3.0,
        },
        calibration_sessions: 30,
        benign_sessions: 12,
        adversaries: 12,
        horizon: 20,
        detector: DetectorConfig {
            max_horizon: 60,
            ..DetectorConfig::default()
        },
        seed: 11,
        ..PipelineConfig::default()
    };
    cfg.autoencoder.epochs = 8;
    cfg
}

pub struct Fixture {
    pub cfg: PipelineConfig,
    pub data: LoadedData,
    pub dep: Deployment,
}

pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = small_config();
        let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        let dep = deploy(&data.train, &cfg).unwrap();
        Fixture { cfg, data, dep }
    })
}

pub fn uniform_queries(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::new(rows, cols, uniform(&mut Rng::new(seed), -1.0, 1.0, rows * cols).unwrap()).unwrap()
}

/// Streams `queries` through a fresh detector.
pub fn stream(dep: &Deployment, queries: &Matrix) -> DetectorState {
    let mut state = DetectorState::new(dep.service.num_classes());
    for row in queries.iter_rows() {
        state
            .observe(row, &dep.autoencoder, &dep.service, &dep.detector, &dep.calibration)
            .unwrap();
    }
    state
}
