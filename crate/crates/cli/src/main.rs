//! `leakguard`: train, calibrate, attack, detect and evaluate from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use leakguard_core::attacks::{write_sweep_csv, AttackKind};
use leakguard_core::dataset::read_queries;
use leakguard_core::detector::Execution;
use leakguard_core::harness::{
    attack_table, calibrate_deployment, deploy, emit_report, load_dataset, run_pipeline, train_raw_target,
    DatasetSource, Labeling,
};
use leakguard_core::persistence::{load_bundle, save_bundle, write_atomic, SessionStore, KEY_ENV};
use leakguard_core::{
    DetectorConfig, Error, ExperimentReport, PipelineConfig, ServiceKind, StateKey, SyntheticConfig,
};

#[derive(Debug, Parser)]
#[command(name = "leakguard", version, about = "Detect model-extraction query streams on device")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the autoencoder and service model, calibrate, and write a bundle.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Bundle path.
        #[arg(long, default_value = "model.sodm")]
        out: PathBuf,
    },
    /// Recompute the calibration table of an existing bundle.
    Calibrate {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Benign calibration sessions.
        #[arg(long)]
        sessions: Option<usize>,
        /// Output bundle; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both attacks against a model trained on raw features.
    Attack {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Perturbation bound for the decision-boundary attack.
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        /// Independent attack seeds per attack kind.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream queries through the detector with encrypted persistent state.
    Detect {
        #[arg(long)]
        bundle: PathBuf,
        /// Headed CSV of queries; a `label` column is ignored.
        #[arg(long)]
        input: PathBuf,
        /// Sealed state file, created when missing.
        #[arg(long, default_value = "state.sodx")]
        state: PathBuf,
        /// Directory receiving periodic sealed copies of the state.
        #[arg(long)]
        sync_dir: Option<PathBuf>,
        /// Queries between syncs.
        #[arg(long, default_value_t = leakguard_core::persistence::DEFAULT_SYNC_EVERY)]
        sync_every: usize,
        #[command(flatten)]
        weights: WeightArgs,
        /// Compute the three components on separate threads.
        #[arg(long)]
        concurrent: bool,
        /// JSON-lines output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: train, calibrate, simulate the session pool, score.
    Evaluate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Report directory; only the metric table is printed when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit report tables from a saved `report.json`.
    Report {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic surrogate as `train.csv` and `test.csv`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        features: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Lr,
    Dnn,
    Rf,
}

impl From<ModelArg> for ServiceKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lr => ServiceKind::SoftmaxRegression,
            ModelArg::Dnn => ServiceKind::Mlp,
            ModelArg::Rf => ServiceKind::RandomForest,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
struct WeightArgs {
    /// Reconstruction weight; the three weights are rescaled to sum to one.
    #[arg(long)]
    alpha: Option<f64>,
    /// Distance weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Entropy weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Relative half-width of the benign band.
    #[arg(long)]
    delta: Option<f64>,
}

impl WeightArgs {
    fn apply(&self, base: DetectorConfig) -> Result<DetectorConfig, Failure> {
        if self.alpha.is_none() && self.beta.is_none() && self.gamma.is_none() && self.delta.is_none() {
            return Ok(base);
        }
        DetectorConfig::normalized(
            self.alpha.unwrap_or(base.alpha),
            self.beta.unwrap_or(base.beta),
            self.gamma.unwrap_or(base.gamma),
            self.delta.unwrap_or(base.delta),
            base.max_horizon,
        )
        .map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, Args)]
struct ExperimentArgs {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or a directory holding `train.csv` and `test.csv`.
    #[arg(long)]
    dataset: Option<String>,
    /// Subtracted from CSV labels, e.g. 1 for labels numbered from one.
    #[arg(long, default_value_t = 0)]
    label_offset: i64,
    /// Min-max rescale CSV features to [-1, 1] using the training file.
    #[arg(long)]
    rescale: bool,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[command(flatten)]
    weights: WeightArgs,
    /// Queries per session (evaluate) or per attack run (attack).
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    adversaries: Option<usize>,
    #[arg(long)]
    benign: Option<usize>,
    /// Autoencoder training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Label a session adversarial if any verdict up to the horizon was.
    #[arg(long)]
    ever_flagged: bool,
    /// Keep measured per-component timings in reports.
    #[arg(long)]
    record_timings: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_failure(path))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        match self.dataset.as_deref() {
            None => {}
            Some("synthetic") => {
                if !matches!(cfg.dataset, DatasetSource::Synthetic { .. }) {
                    cfg.dataset = DatasetSource::default();
                }
            }
            Some(dir) => {
                cfg.dataset = DatasetSource::Csv {
                    dir: dir.into(),
                    label_offset: self.label_offset,
                    rescale: self.rescale,
                }
            }
        }
        if let Some(m) = self.model {
            cfg.model = m.into();
        }
        cfg.detector = self.weights.apply(cfg.detector)?;
        if let Some(q) = self.queries {
            cfg.horizon = q;
        }
        if let Some(n) = self.adversaries {
            cfg.adversaries = n;
        }
        if let Some(n) = self.benign {
            cfg.benign_sessions = n;
        }
        if let Some(e) = self.epochs {
            cfg.autoencoder.epochs = e;
        }
        if self.ever_flagged {
            cfg.labeling = Labeling::EverFlagged;
        }
        cfg.record_timings |= self.record_timings;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io_failure(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("io error on {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { exp, out } => {
            let cfg = exp.config()?;
            cfg.validate()?;
            let data = load_dataset(&cfg.dataset, cfg.seed)?;
            let dep = deploy(&data.train, &cfg)?;
            save_bundle(&dep.bundle(&data), &out)?;
            let latents = dep.autoencoder.encode_all(&data.test.features)?;
            print_json(&json!({
                "bundle": out,
                "dataset": data.name,
                "model": cfg.model.short_name(),
                "train_rows": data.train.len(),
                "latent_dim": dep.autoencoder.latent_dim(),
                "final_loss": dep.autoencoder_trace.last(),
                "service_test_accuracy": dep.service.accuracy(&latents, &data.test.labels)?,
                "calibrated_horizon": dep.calibration.horizon(),
            }));
            Ok(())
        }
        Command::Calibrate {
            bundle: path,
            exp,
            sessions,
            out,
        } => {
            let mut cfg = exp.config()?;
            let mut bundle = load_bundle(&path)?;
            cfg.detector = exp.weights.apply(bundle.detector)?;
            if let Some(b) = sessions {
                cfg.calibration_sessions = b;
            }
            let data = load_dataset(&cfg.dataset, cfg.seed)?;
            if data.train.input_dim() != bundle.meta.input_dim {
                return Err(Failure::Runtime(format!(
                    "dataset has {} features, bundle expects {}",
                    data.train.input_dim(),
                    bundle.meta.input_dim
                )));
            }
            let table = calibrate_deployment(&data.train, &bundle.autoencoder, &bundle.service, &cfg)?;
            bundle.detector = DetectorConfig {
                max_horizon: table.horizon(),
                ..cfg.detector
            };
            bundle.calibration = table;
            let out = out.unwrap_or(path);
            save_bundle(&bundle, &out)?;
            print_json(&json!({
                "bundle": out,
                "sessions": cfg.calibration_sessions,
                "horizon": bundle.calibration.horizon(),
                "detector": bundle.detector,
            }));
            Ok(())
        }
        Command::Attack {
            exp,
            epsilon,
            seeds,
            out,
        } => {
            let cfg = exp.config()?;
            let queries = exp.queries.unwrap_or(100);
            let data = load_dataset(&cfg.dataset, cfg.seed)?;
            let target = train_raw_target(&data.train, cfg.model, cfg.seed)?;
            let rows = attack_table(&target, &data.test, queries, epsilon, seeds, cfg.seed)?;
            let mean = |kind: AttackKind| {
                let v: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.value).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            match &out {
                Some(path) => {
                    let mut buf = Vec::new();
                    write_sweep_csv(&rows, cfg.record_timings, &mut buf)?;
                    write_atomic(path, &buf)?;
                }
                None => write_sweep_csv(&rows, cfg.record_timings, io::stdout().lock())?,
            }
            let summary = json!({
                "model": cfg.model.short_name(),
                "target_test_accuracy": target.accuracy(&data.test.features, &data.test.labels)?,
                "queries": queries,
                "seeds": seeds,
                AttackKind::RandomQuery.metric_name(): mean(AttackKind::RandomQuery),
                AttackKind::Perturbation.metric_name(): mean(AttackKind::Perturbation),
            });
            if out.is_some() {
                print_json(&summary);
            } else {
                eprintln!("{summary}");
            }
            Ok(())
        }
        Command::Detect {
            bundle,
            input,
            state,
            sync_dir,
            sync_every,
            weights,
            concurrent,
            out,
        } => {
            let bundle = load_bundle(&bundle)?;
            let detector = weights.apply(bundle.detector)?;
            let queries = read_queries(&input)?;
            if queries.cols() != bundle.meta.input_dim {
                return Err(Failure::Runtime(format!(
                    "queries have {} features, bundle expects {}",
                    queries.cols(),
                    bundle.meta.input_dim
                )));
            }
            let key = StateKey::from_env()
                .map_err(|e| Failure::Runtime(format!("{e}; set {KEY_ENV} to 64 hex digits")))?;
            if let Some(dir) = &sync_dir {
                fs::create_dir_all(dir).map_err(io_failure(dir))?;
            }
            let mut store = SessionStore::new(state, sync_dir, key);
            store.sync_every = sync_every;
            let mut session = store.load(bundle.meta.num_classes)?;
            let exec = if concurrent {
                Execution::Concurrent
            } else {
                Execution::Sequential
            };
            let mut sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(BufWriter::new(fs::File::create(path).map_err(io_failure(path))?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            let sink_path = out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
            for row in queries.iter_rows() {
                let b = session.observe_with(row, &bundle.autoencoder, &bundle.service, &detector, &bundle.calibration, exec)?;
                store.persist(&session)?;
                serde_json::to_writer(&mut sink, &b).map_err(|e| Failure::Runtime(e.to_string()))?;
                sink.write_all(b"\n").map_err(io_failure(&sink_path))?;
            }
            sink.flush().map_err(io_failure(&sink_path))?;
            store.sync_now(&session)?;
            eprintln!(
                "t={} verdict={}",
                session.t(),
                session.current_verdict().map_or("none", |v| if v.is_adversarial() { "adversarial" } else { "benign" })
            );
            Ok(())
        }
        Command::Evaluate { exp, out } => {
            let cfg = exp.config()?;
            let report = run_pipeline(&cfg)?;
            if let Some(dir) = &out {
                emit_report(&report, dir)?;
                let json = serde_json::to_vec(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                write_atomic(&dir.join("report.json"), &json)?;
            }
            print_metrics(&report);
            Ok(())
        }
        Command::Report { from, out } => {
            let text = fs::read_to_string(&from).map_err(io_failure(&from))?;
            let report: ExperimentReport =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", from.display())))?;
            emit_report(&report, &out)?;
            print_metrics(&report);
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            samples,
            features,
            classes,
        } => {
            let base = SyntheticConfig::default();
            let config = SyntheticConfig {
                samples: samples.unwrap_or(base.samples),
                features: features.unwrap_or(base.features),
                classes: classes.unwrap_or(base.classes),
                ..base
            };
            let source = DatasetSource::Synthetic {
                config,
                test_fraction: 1.0 / 3.0,
            };
            let data = load_dataset(&source, seed)?;
            fs::create_dir_all(&out).map_err(io_failure(&out))?;
            data.train.write_csv(&out.join("train.csv"))?;
            data.test.write_csv(&out.join("test.csv"))?;
            print_json(&json!({
                "dir": out,
                "train_rows": data.train.len(),
                "test_rows": data.test.len(),
                "features": data.train.input_dim(),
                "classes": data.train.num_classes,
            }));
            Ok(())
        }
    }
}

fn print_metrics(report: &ExperimentReport) {
    let s = &report.summary;
    println!(
        "dataset={} model={} horizon={} pool: benign={} random={} perturbed={}",
        s.dataset, s.model, s.horizon, s.pool.benign, s.pool.random, s.pool.perturbed
    );
    println!("{:<8} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}", "method", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for m in &report.methods {
        let c = &m.confusion;
        println!(
            "{:<8} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9.4} {:>9}",
            m.method.name(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            fmt(m.accuracy),
            m.precision,
            fmt(m.recall)
        );
    }
}
