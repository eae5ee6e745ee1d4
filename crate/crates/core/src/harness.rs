//! End-to-end experiment: train, calibrate, simulate benign and adversarial
//! sessions, score every detector on identical streams, emit tables.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_decision_boundary, attack_output_diversity, sweep, AttackConfig, AttackKind, Pipeline, SweepGrid,
    SweepRecord, Surface,
};
use crate::autoencoder::{train_autoencoder, Autoencoder};
use crate::baselines::{
    fit_magnet_threshold, magnet_detector, prada_detector, random_detector, BaselineVerdict, Method,
    PRADA_THRESHOLD,
};
use crate::dataset::{
    ingest_csv, make_synthetic, train_test_split, CsvSchema, DatasetSplit, FeatureRanges, Rescale, SplitTag,
    SyntheticConfig,
};
use crate::detector::{calibrate, run_session, CalibrationTable, ComponentTiming, DetectorConfig, LeakageBreakdown, Verdict};
use crate::error::{Error, Result, StageExt};
use crate::nn::TrainConfig;
use crate::numeric::{Matrix, Rng};
use crate::persistence::{DatasetMeta, ModelBundle};
use crate::service::{train_service_model, ServiceConfig, ServiceKind, ServiceModel};

const STREAM_DATA: u64 = 1;
const STREAM_CALIBRATION: u64 = 2;
const STREAM_BENIGN: u64 = 1 << 20;
const STREAM_ADVERSARY: u64 = 2 << 20;
const STREAM_COIN: u64 = 3 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Directory holding `train.csv` and `test.csv`.
    Csv {
        dir: PathBuf,
        #[serde(default)]
        label_offset: i64,
        /// Min-max rescale to `[-1, 1]` using ranges fitted on the training file.
        #[serde(default)]
        rescale: bool,
    },
}

fn default_test_fraction() -> f64 {
    1.0 / 3.0
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            config: SyntheticConfig::default(),
            test_fraction: default_test_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub name: String,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub ranges: FeatureRanges,
}

pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<LoadedData> {
    match source {
        DatasetSource::Synthetic { config, test_fraction } => {
            let mut rng = Rng::derive(seed, STREAM_DATA);
            let all = make_synthetic(config, &mut rng)?;
            let (train, test) = train_test_split(&all, *test_fraction, &mut rng)?;
            Ok(LoadedData {
                name: "synthetic".into(),
                ranges: FeatureRanges::of(&train.features),
                train,
                test,
            })
        }
        DatasetSource::Csv {
            dir,
            label_offset,
            rescale,
        } => {
            let schema = CsvSchema {
                label_offset: *label_offset,
                rescale: if *rescale { Rescale::Fit } else { Rescale::None },
                ..CsvSchema::default()
            };
            let (train, ranges) = ingest_csv(&dir.join("train.csv"), &schema, SplitTag::Train)?;
            let test_schema = CsvSchema {
                num_classes: Some(train.num_classes),
                rescale: if *rescale {
                    Rescale::Using(ranges.clone())
                } else {
                    Rescale::None
                },
                ..schema
            };
            let (test, _) = ingest_csv(&dir.join("test.csv"), &test_schema, SplitTag::Test)?;
            if test.input_dim() != train.input_dim() {
                return Err(Error::shape("train and test files differ in feature count"));
            }
            Ok(LoadedData {
                name: dir
                    .file_name()
                    .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
                train,
                test,
                ranges,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    /// The session's label is the verdict at the horizon.
    #[default]
    AtHorizon,
    /// The session is adversarial if any verdict up to the horizon was.
    EverFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub model: ServiceKind,
    pub detector: DetectorConfig,
    pub autoencoder: TrainConfig,
    pub calibration_sessions: usize,
    pub benign_sessions: usize,
    pub adversaries: usize,
    /// Queries per evaluated session; sessions are labelled here.
    pub horizon: usize,
    pub epsilon: f64,
    /// Fixed reconstruction threshold; fitted on the training set when absent.
    pub magnet_threshold: Option<f64>,
    pub prada_threshold: f64,
    pub labeling: Labeling,
    /// Keep measured timings in the report; off keeps reports reproducible.
    pub record_timings: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            model: ServiceKind::SoftmaxRegression,
            detector: DetectorConfig::default(),
            autoencoder: TrainConfig::default(),
            calibration_sessions: 100,
            benign_sessions: 100,
            adversaries: 100,
            horizon: 50,
            epsilon: 0.01,
            magnet_threshold: None,
            prada_threshold: PRADA_THRESHOLD,
            labeling: Labeling::AtHorizon,
            record_timings: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.horizon == 0 || self.horizon > self.detector.max_horizon {
            return Err(Error::domain(format!(
                "evaluation horizon {} must lie in 1..={}",
                self.horizon, self.detector.max_horizon
            )));
        }
        if self.calibration_sessions < 2 {
            return Err(Error::domain("calibration needs at least 2 sessions"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::domain("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Everything the on-device detector needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub autoencoder: Autoencoder,
    pub autoencoder_trace: Vec<f64>,
    pub service: ServiceModel,
    pub calibration: CalibrationTable,
    pub detector: DetectorConfig,
    pub magnet_threshold: f64,
}

impl Deployment {
    pub fn target(&self) -> Pipeline<'_> {
        Pipeline {
            autoencoder: &self.autoencoder,
            model: &self.service,
        }
    }

    pub fn bundle(&self, data: &LoadedData) -> ModelBundle {
        ModelBundle {
            meta: DatasetMeta {
                name: data.name.clone(),
                input_dim: self.autoencoder.input_dim(),
                latent_dim: self.autoencoder.latent_dim(),
                num_classes: self.service.num_classes(),
                feature_min: data.ranges.min.clone(),
                feature_max: data.ranges.max.clone(),
            },
            autoencoder: self.autoencoder.clone(),
            service: self.service.clone(),
            calibration: self.calibration.clone(),
            detector: self.detector,
        }
    }
}

/// Autoencoder, then a service model on its latents (encoder frozen).
pub fn train_models(
    train: &DatasetSplit,
    kind: ServiceKind,
    ae_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Autoencoder, Vec<f64>, ServiceModel)> {
    let cfg = TrainConfig {
        seed: ae_cfg.seed ^ seed,
        ..ae_cfg.clone()
    };
    let (ae, trace) = train_autoencoder(&train.features, &cfg).stage("train autoencoder")?;
    let latents = ae.encode_all(&train.features)?;
    let service = train_service_model(
        &latents,
        &train.labels,
        train.num_classes,
        &ServiceConfig::for_kind(kind, seed),
    )
    .stage("train service model")?;
    Ok((ae, trace, service))
}

pub fn calibrate_deployment(
    train: &DatasetSplit,
    ae: &Autoencoder,
    service: &ServiceModel,
    cfg: &PipelineConfig,
) -> Result<CalibrationTable> {
    let horizon = cfg.detector.max_horizon.min(train.len());
    let detector = DetectorConfig {
        max_horizon: horizon,
        ..cfg.detector
    };
    let mut rng = Rng::derive(cfg.seed, STREAM_CALIBRATION);
    calibrate(&train.features, ae, service, &detector, cfg.calibration_sessions, &mut rng).stage("calibrate")
}

/// Trains and calibrates. The calibration horizon is capped at the training size.
pub fn deploy(train: &DatasetSplit, cfg: &PipelineConfig) -> Result<Deployment> {
    cfg.validate()?;
    let (autoencoder, autoencoder_trace, service) = train_models(train, cfg.model, &cfg.autoencoder, cfg.seed)?;
    let calibration = calibrate_deployment(train, &autoencoder, &service, cfg)?;
    if calibration.horizon() < cfg.horizon {
        return Err(Error::domain("training set is shorter than the evaluation horizon"));
    }
    let magnet_threshold = match cfg.magnet_threshold {
        Some(t) => t,
        None => fit_magnet_threshold(&train.features, &autoencoder).stage("fit magnet threshold")?,
    };
    Ok(Deployment {
        autoencoder,
        autoencoder_trace,
        service,
        calibration,
        detector: cfg.detector,
        magnet_threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Benign,
    Random,
    Perturbed,
}

impl SessionKind {
    pub const ALL: [SessionKind; 3] = [SessionKind::Benign, SessionKind::Random, SessionKind::Perturbed];

    pub fn name(self) -> &'static str {
        match self {
            SessionKind::Benign => "benign",
            SessionKind::Random => "random",
            SessionKind::Perturbed => "perturbed",
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != SessionKind::Benign
    }
}

/// One evaluated query stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub index: usize,
    pub kind: SessionKind,
    pub queries: Matrix,
    /// Attack success metric against the deployed pipeline, adversaries only.
    pub attack_metric: Option<f64>,
}

/// Benign sessions first, then adversaries: the first half random-query, the rest perturbation.
pub fn session_streams(dep: &Deployment, test: &DatasetSplit, cfg: &PipelineConfig) -> Result<Vec<SessionStream>> {
    if test.len() < cfg.horizon {
        return Err(Error::domain(format!(
            "test split has {} rows, fewer than the horizon {}",
            test.len(),
            cfg.horizon
        )));
    }
    let target = dep.target();
    let random_count = cfg.adversaries.div_ceil(2);
    let total = cfg.benign_sessions + cfg.adversaries;
    (0..total)
        .into_par_iter()
        .map(|index| {
            if index < cfg.benign_sessions {
                let mut rng = Rng::derive(cfg.seed, STREAM_BENIGN + index as u64);
                let rows = rng.sample_indices(test.len(), cfg.horizon);
                return Ok(SessionStream {
                    index,
                    kind: SessionKind::Benign,
                    queries: test.features.select_rows(&rows),
                    attack_metric: None,
                });
            }
            let j = index - cfg.benign_sessions;
            let stream = STREAM_ADVERSARY + j as u64;
            let mut rng = Rng::derive(cfg.seed, stream);
            let seed_query = test.features.row(rng.below(test.len()));
            let attack_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream;
            let (kind, result) = if j < random_count {
                let acfg = AttackConfig::random_query(cfg.horizon, attack_seed);
                (SessionKind::Random, attack_output_diversity(&target, None, &acfg, &mut rng)?)
            } else {
                let acfg = AttackConfig::perturbation(cfg.horizon, cfg.epsilon, attack_seed);
                (
                    SessionKind::Perturbed,
                    attack_decision_boundary(&target, seed_query, &acfg, &mut rng)?,
                )
            };
            Ok(SessionStream {
                index,
                kind,
                attack_metric: Some(result.metric()),
                queries: result.queries,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub index: usize,
    pub kind: SessionKind,
    pub trajectory: Vec<LeakageBreakdown>,
    pub baselines: Vec<BaselineVerdict>,
    pub attack_metric: Option<f64>,
}

impl SessionOutcome {
    /// Detector label after `t` queries under `labeling`.
    pub fn soda_label(&self, t: usize, labeling: Labeling) -> Verdict {
        let prefix = &self.trajectory[..t];
        let flagged = match labeling {
            Labeling::AtHorizon => prefix[t - 1].verdict.is_adversarial(),
            Labeling::EverFlagged => prefix.iter().any(|b| b.verdict.is_adversarial()),
        };
        if flagged {
            Verdict::Adversarial
        } else {
            Verdict::Benign
        }
    }

    pub fn baseline(&self, method: Method) -> Option<&BaselineVerdict> {
        self.baselines.iter().find(|b| b.method == method)
    }
}

/// Runs the detector and every baseline over each stream.
pub fn score_sessions(
    dep: &Deployment,
    streams: &[SessionStream],
    cfg: &PipelineConfig,
) -> Result<Vec<SessionOutcome>> {
    streams
        .par_iter()
        .map(|s| {
            let mut trajectory = run_session(&s.queries, &dep.autoencoder, &dep.service, &dep.detector, &dep.calibration)?;
            if !cfg.record_timings {
                trajectory.iter_mut().for_each(|b| b.timing_us = ComponentTiming::default());
            }
            let mut coin = Rng::derive(cfg.seed, STREAM_COIN + s.index as u64);
            let baselines = vec![
                random_detector(&mut coin),
                magnet_detector(&s.queries, &dep.autoencoder, dep.magnet_threshold)?,
                prada_detector(&s.queries, cfg.prada_threshold)?,
            ];
            Ok(SessionOutcome {
                index: s.index,
                kind: s.kind,
                trajectory,
                baselines,
                attack_metric: s.attack_metric,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, Verdict)>) -> Self {
        let mut c = Self::default();
        for (actual, predicted) in pairs {
            match (actual, predicted.is_adversarial()) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.tn) as f64 / self.total() as f64)
    }

    /// One when nothing was flagged.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// Undefined without adversarial sessions.
    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: f64,
    pub recall: Option<f64>,
}

impl MethodMetrics {
    pub fn new(method: Method, confusion: Confusion) -> Self {
        Self {
            method,
            confusion,
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub accuracy: Option<f64>,
    pub precision: f64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolComposition {
    pub benign: usize,
    pub random: usize,
    pub perturbed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub dataset: String,
    pub model: String,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub pool: PoolComposition,
    pub horizon: usize,
    pub labeling: Labeling,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub service_test_accuracy: f64,
    pub autoencoder_loss: Vec<f64>,
    pub magnet_threshold: f64,
    pub prada_threshold: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summary: ReportSummary,
    pub methods: Vec<MethodMetrics>,
    /// Detector metrics when sessions are labelled after `t` queries.
    pub curve: Vec<CurvePoint>,
    /// Benign reference leakage for `t = 1..=horizon`.
    pub reference: Vec<f64>,
    pub sessions: Vec<SessionOutcome>,
}

/// Confusion counts per method at `t` for the detector and at the full
/// stream for the baselines.
pub fn method_metrics(sessions: &[SessionOutcome], horizon: usize, labeling: Labeling) -> Vec<MethodMetrics> {
    let soda = Confusion::from_pairs(
        sessions
            .iter()
            .map(|s| (s.kind.is_adversarial(), s.soda_label(horizon, labeling))),
    );
    let mut out = vec![MethodMetrics::new(Method::Soda, soda)];
    for method in Method::BASELINES {
        let c = Confusion::from_pairs(sessions.iter().filter_map(|s| {
            s.baseline(method)
                .map(|b| (s.kind.is_adversarial(), b.verdict))
        }));
        out.push(MethodMetrics::new(method, c));
    }
    out
}

pub fn detection_curve(sessions: &[SessionOutcome], horizon: usize, labeling: Labeling) -> Vec<CurvePoint> {
    (1..=horizon)
        .map(|t| {
            let c = Confusion::from_pairs(
                sessions
                    .iter()
                    .map(|s| (s.kind.is_adversarial(), s.soda_label(t, labeling))),
            );
            CurvePoint {
                t,
                accuracy: c.accuracy(),
                precision: c.precision(),
                recall: c.recall(),
            }
        })
        .collect()
}

/// Simulates and scores sessions on `test` for an existing deployment.
pub fn evaluate(
    dep: &Deployment,
    data: &LoadedData,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let streams = session_streams(dep, &data.test, cfg).stage("simulate sessions")?;
    let sessions = score_sessions(dep, &streams, cfg).stage("score sessions")?;
    let latents = dep.autoencoder.encode_all(&data.test.features)?;
    let count = |k: SessionKind| sessions.iter().filter(|s| s.kind == k).count();
    let summary = ReportSummary {
        dataset: data.name.clone(),
        model: cfg.model.short_name().into(),
        input_dim: dep.autoencoder.input_dim(),
        latent_dim: dep.autoencoder.latent_dim(),
        classes: dep.service.num_classes(),
        train_rows: data.train.len(),
        test_rows: data.test.len(),
        pool: PoolComposition {
            benign: count(SessionKind::Benign),
            random: count(SessionKind::Random),
            perturbed: count(SessionKind::Perturbed),
        },
        horizon: cfg.horizon,
        labeling: cfg.labeling,
        seed: cfg.seed,
        detector: dep.detector,
        service_test_accuracy: dep.service.accuracy(&latents, &data.test.labels)?,
        autoencoder_loss: dep.autoencoder_trace.clone(),
        magnet_threshold: dep.magnet_threshold,
        prada_threshold: cfg.prada_threshold,
        notes: vec![
            "precision is 1 when a method flags no session".into(),
            "recall is null when the pool has no adversarial session".into(),
            "baselines label the full stream; the detector labels at the horizon".into(),
        ],
    };
    Ok(ExperimentReport {
        methods: method_metrics(&sessions, cfg.horizon, cfg.labeling),
        curve: detection_curve(&sessions, cfg.horizon, cfg.labeling),
        reference: dep.calibration.reference[..cfg.horizon].to_vec(),
        summary,
        sessions,
    })
}

/// Load, train, calibrate, simulate, score.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset, cfg.seed).stage("load dataset")?;
    let dep = deploy(&data.train, cfg)?;
    evaluate(&dep, &data, cfg)
}

/// Service model on raw features, as an attack target.
pub fn train_raw_target(train: &DatasetSplit, kind: ServiceKind, seed: u64) -> Result<ServiceModel> {
    train_service_model(
        &train.features,
        &train.labels,
        train.num_classes,
        &ServiceConfig::for_kind(kind, seed),
    )
}

/// Both attack kinds against `target`, one run per selected test seed.
pub fn attack_table(
    target: &ServiceModel,
    test: &DatasetSplit,
    queries: usize,
    epsilon: f64,
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<SweepRecord>> {
    let mut rng = Rng::derive(base_seed, STREAM_DATA);
    let rows = crate::attacks::select_seeds(&test.features, seeds, &mut rng)?;
    let seed_queries = test.features.select_rows(&rows);
    let grid = SweepGrid {
        kinds: vec![AttackKind::RandomQuery, AttackKind::Perturbation],
        surfaces: vec![Surface::WhiteBox],
        num_queries: vec![queries],
        epsilons: vec![epsilon],
        feature_fractions: vec![1.0],
        extra_features: vec![0],
        seeds: (0..seeds as u64).map(|i| base_seed.wrapping_mul(1_000_003).wrapping_add(i)).collect(),
    };
    Ok(sweep(&grid, target, &seed_queries)?.into_iter().map(|(r, _)| r).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const REPORT_FILES: [&str; 8] = [
    "summary.json",
    "metrics.csv",
    "curve.csv",
    "component_means.csv",
    "timings.csv",
    "attacks.csv",
    "trajectories.jsonl",
    "baselines.jsonl",
];

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a ReportSummary,
    methods: &'a [MethodMetrics],
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    session: usize,
    kind: SessionKind,
    l_tr: f64,
    #[serde(flatten)]
    breakdown: &'a LeakageBreakdown,
}

#[derive(Serialize)]
struct BaselineLine<'a> {
    session: usize,
    kind: SessionKind,
    #[serde(flatten)]
    verdict: &'a BaselineVerdict,
}

/// Writes [`REPORT_FILES`] into `out_dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = serde_json::to_vec_pretty(&SummaryFile {
        summary: &report.summary,
        methods: &report.methods,
    })
    .map_err(|e| Error::format("summary", e.to_string()))?;
    write_file(&out_dir.join("summary.json"), &json)?;

    let metrics = csv_bytes(
        &["method", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall"],
        report.methods.iter().map(|m| {
            vec![
                m.method.name().into(),
                m.confusion.tp.to_string(),
                m.confusion.fp.to_string(),
                m.confusion.tn.to_string(),
                m.confusion.fn_.to_string(),
                opt(m.accuracy),
                m.precision.to_string(),
                opt(m.recall),
            ]
        }),
    )?;
    write_file(&out_dir.join("metrics.csv"), &metrics)?;

    let curve = csv_bytes(
        &["t", "accuracy", "precision", "recall"],
        report
            .curve
            .iter()
            .map(|p| vec![p.t.to_string(), opt(p.accuracy), p.precision.to_string(), opt(p.recall)]),
    )?;
    write_file(&out_dir.join("curve.csv"), &curve)?;

    let horizon = report.sessions.iter().map(|s| s.trajectory.len()).min().unwrap_or(0);
    let mut means = Vec::new();
    let mut timings = Vec::new();
    for t in 0..horizon {
        for kind in SessionKind::ALL {
            let rows: Vec<&LeakageBreakdown> = report
                .sessions
                .iter()
                .filter(|s| s.kind == kind)
                .map(|s| &s.trajectory[t])
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let avg = |f: fn(&LeakageBreakdown) -> f64| (rows.iter().map(|b| f(b)).sum::<f64>() / n).to_string();
            means.push(vec![
                kind.name().into(),
                (t + 1).to_string(),
                avg(|b| b.norm_r),
                avg(|b| b.norm_d),
                avg(|b| b.norm_o),
                avg(|b| b.l),
                report.reference.get(t).map_or_else(String::new, |v| v.to_string()),
            ]);
        }
        let all: Vec<&ComponentTiming> = report.sessions.iter().map(|s| &s.trajectory[t].timing_us).collect();
        let n = all.len() as f64;
        timings.push(vec![
            (t + 1).to_string(),
            (all.iter().map(|c| c.r).sum::<f64>() / n).to_string(),
            (all.iter().map(|c| c.d).sum::<f64>() / n).to_string(),
            (all.iter().map(|c| c.o).sum::<f64>() / n).to_string(),
        ]);
    }
    write_file(
        &out_dir.join("component_means.csv"),
        &csv_bytes(&["kind", "t", "norm_r", "norm_d", "norm_o", "l", "l_tr"], means)?,
    )?;
    write_file(
        &out_dir.join("timings.csv"),
        &csv_bytes(&["t", "r_us", "d_us", "o_us"], timings)?,
    )?;

    let attacks = csv_bytes(
        &["session", "kind", "metric", "value"],
        report.sessions.iter().filter_map(|s| {
            let metric = match s.kind {
                SessionKind::Benign => return None,
                SessionKind::Random => AttackKind::RandomQuery.metric_name(),
                SessionKind::Perturbed => AttackKind::Perturbation.metric_name(),
            };
            Some(vec![
                s.index.to_string(),
                s.kind.name().into(),
                metric.into(),
                opt(s.attack_metric),
            ])
        }),
    )?;
    write_file(&out_dir.join("attacks.csv"), &attacks)?;

    let json_err = |e: serde_json::Error| Error::format("jsonl", e.to_string());
    let mut traj = Vec::new();
    let mut base = Vec::new();
    for s in &report.sessions {
        for b in &s.trajectory {
            let line = TrajectoryLine {
                session: s.index,
                kind: s.kind,
                l_tr: report.reference.get(b.t - 1).copied().unwrap_or(f64::NAN),
                breakdown: b,
            };
            serde_json::to_writer(&mut traj, &line).map_err(json_err)?;
            traj.push(b'\n');
        }
        for v in &s.baselines {
            serde_json::to_writer(
                &mut base,
                &BaselineLine {
                    session: s.index,
                    kind: s.kind,
                    verdict: v,
                },
            )
            .map_err(json_err)?;
            base.push(b'\n');
        }
    }
    write_file(&out_dir.join("trajectories.jsonl"), &traj)?;
    write_file(&out_dir.join("baselines.jsonl"), &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_conventions() {
        let c = Confusion::from_pairs([(false, Verdict::Benign), (false, Verdict::Benign)]);
        assert_eq!(c.precision(), 1.0);
        assert_eq!(c.recall(), None);
        assert_eq!(c.accuracy(), Some(1.0));
        let c = Confusion::from_pairs([
            (true, Verdict::Adversarial),
            (true, Verdict::Benign),
            (false, Verdict::Adversarial),
            (false, Verdict::Benign),
        ]);
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 1, 1));
        assert_eq!((c.accuracy(), c.precision(), c.recall()), (Some(0.5), 0.5, Some(0.5)));
        assert_eq!(Confusion::default().accuracy(), None);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "model": "rf"}"#).unwrap();
        assert_eq!((partial.seed, partial.model), (9, ServiceKind::RandomForest));
        assert_eq!(partial.horizon, 50);
    }

    #[test]
    fn invalid_configs() {
        let too_long = PipelineConfig {
            horizon: 501,
            ..PipelineConfig::default()
        };
        assert!(too_long.validate().is_err());
        let eps = PipelineConfig {
            epsilon: 0.0,
            ..PipelineConfig::default()
        };
        assert!(eps.validate().is_err());
    }
}
