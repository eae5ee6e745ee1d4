//! Query-based adversaries: output-diversity probing (uniform random queries)
//! and decision-boundary probing (bounded perturbations of a seed query).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::numeric::{euclidean_unchecked, Matrix, Rng};
use crate::service::ServiceModel;

/// Stream id reserved for the ignored black-box columns.
const EXTRA_FEATURE_STREAM: u64 = 0x5eed_e7a;

/// Anything an adversary can submit feature vectors to.
pub trait QueryTarget: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<usize>;
}

impl QueryTarget for ServiceModel {
    fn input_dim(&self) -> usize {
        ServiceModel::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        ServiceModel::num_classes(self)
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        ServiceModel::predict(self, x)
    }
}

/// Encoder followed by a latent-input service model.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub autoencoder: &'a Autoencoder,
    pub model: &'a ServiceModel,
}

impl QueryTarget for Pipeline<'_> {
    fn input_dim(&self) -> usize {
        self.autoencoder.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        self.model.predict(&self.autoencoder.encode(x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    RandomQuery,
    Perturbation,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::RandomQuery => "random_query",
            AttackKind::Perturbation => "perturbation",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            AttackKind::RandomQuery => "classes_recovered_fraction",
            AttackKind::Perturbation => "exploitation_accuracy",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_query" | "random" => Ok(AttackKind::RandomQuery),
            "perturbation" | "perturbed" => Ok(AttackKind::Perturbation),
            other => Err(Error::domain(format!("unknown attack kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    WhiteBox,
    BlackBox,
}

impl Surface {
    pub fn name(self) -> &'static str {
        match self {
            Surface::WhiteBox => "white_box",
            Surface::BlackBox => "black_box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub num_queries: usize,
    pub epsilon: f64,
    pub feature_fraction: f64,
    pub surface: Surface,
    /// Ignored columns appended to each black-box query.
    pub extra_features: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn random_query(num_queries: usize, seed: u64) -> Self {
        Self {
            kind: AttackKind::RandomQuery,
            num_queries,
            epsilon: 0.0,
            feature_fraction: 1.0,
            surface: Surface::WhiteBox,
            extra_features: 0,
            seed,
        }
    }

    pub fn perturbation(num_queries: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Perturbation,
            epsilon,
            ..Self::random_query(num_queries, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::domain("an attack needs at least one query"));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(Error::domain("feature fraction must lie in (0, 1]"));
        }
        if self.kind == AttackKind::Perturbation && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::domain("perturbation bound must be positive"));
        }
        if self.surface == Surface::WhiteBox && self.extra_features > 0 {
            return Err(Error::domain("extra features only exist on the black-box surface"));
        }
        Ok(())
    }

    fn chosen_features(&self, k: usize) -> usize {
        ((self.feature_fraction * k as f64).ceil() as usize).clamp(1, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// `num_queries × (k + extra_features)`.
    pub queries: Matrix,
    pub predictions: Vec<usize>,
    pub classes_recovered_fraction: f64,
    /// Share of queries predicted as the seed's class; perturbation attacks only.
    pub exploitation_accuracy: Option<f64>,
    pub seed_class: Option<usize>,
    pub wall_time: Duration,
}

impl AttackResult {
    /// The success metric of the attack kind.
    pub fn metric(&self) -> f64 {
        self.exploitation_accuracy
            .unwrap_or(self.classes_recovered_fraction)
    }
}

/// Distinct predicted classes over `classes`.
pub fn recovered_fraction(predictions: &[usize], classes: usize) -> f64 {
    let mut seen = vec![false; classes];
    for &p in predictions {
        seen[p] = true;
    }
    seen.iter().filter(|&&s| s).count() as f64 / classes as f64
}

/// `n` distinct row indices of `data`, uniform without replacement.
pub fn select_seeds(data: &Matrix, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > data.rows() {
        return Err(Error::domain(format!(
            "cannot select {n} seeds from {} rows",
            data.rows()
        )));
    }
    Ok(rng.sample_indices(data.rows(), n))
}

/// Builds queries row by row; `fill` writes the target-visible part.
fn generate<T: QueryTarget + ?Sized>(
    target: &T,
    cfg: &AttackConfig,
    rng: &mut Rng,
    mut fill: impl FnMut(&mut [f64], &[usize], &mut Rng),
) -> Result<(Matrix, Vec<usize>, Duration)> {
    let k = target.input_dim();
    let extra = match cfg.surface {
        Surface::WhiteBox => 0,
        Surface::BlackBox => cfg.extra_features,
    };
    let width = k + extra;
    let started = Instant::now();
    let mut features = rng.sample_indices(k, cfg.chosen_features(k));
    features.sort_unstable();
    let mut extra_rng = Rng::derive(cfg.seed, EXTRA_FEATURE_STREAM);
    let mut data = vec![0.0; cfg.num_queries * width];
    let mut predictions = Vec::with_capacity(cfg.num_queries);
    for row in data.chunks_exact_mut(width) {
        let (visible, ignored) = row.split_at_mut(k);
        fill(visible, &features, rng);
        for v in ignored.iter_mut() {
            *v = extra_rng.range(-1.0, 1.0);
        }
        predictions.push(target.predict(visible)?);
    }
    let wall_time = started.elapsed();
    Ok((Matrix::new(cfg.num_queries, width, data)?, predictions, wall_time))
}

fn check_seed<T: QueryTarget + ?Sized>(target: &T, seed_query: &[f64]) -> Result<()> {
    if seed_query.len() != target.input_dim() {
        return Err(Error::shape(format!(
            "seed query has {} features, target expects {}",
            seed_query.len(),
            target.input_dim()
        )));
    }
    Ok(())
}

/// Uniform `[-1, 1]` queries on the chosen features. Unchosen features are
/// copied from `seed_query`, which is required when the fraction is below one.
pub fn attack_output_diversity<T: QueryTarget + ?Sized>(
    target: &T,
    seed_query: Option<&[f64]>,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.kind != AttackKind::RandomQuery {
        return Err(Error::domain("output-diversity attack needs a random_query config"));
    }
    let base = match seed_query {
        Some(seed) => {
            check_seed(target, seed)?;
            seed.to_vec()
        }
        None if cfg.feature_fraction < 1.0 => {
            return Err(Error::domain("a partial feature subset needs a seed query"))
        }
        None => vec![0.0; target.input_dim()],
    };
    let (queries, predictions, wall_time) = generate(target, cfg, rng, |row, features, rng| {
        row.copy_from_slice(&base);
        for &f in features {
            row[f] = rng.range(-1.0, 1.0);
        }
    })?;
    Ok(AttackResult {
        classes_recovered_fraction: recovered_fraction(&predictions, target.num_classes()),
        exploitation_accuracy: None,
        seed_class: None,
        queries,
        predictions,
        wall_time,
    })
}

/// `seed_query + U[-ε, ε]` on the chosen features, clipped to `[-1, 1]`.
/// The seed's class is the target's own prediction for it.
pub fn attack_decision_boundary<T: QueryTarget + ?Sized>(
    target: &T,
    seed_query: &[f64],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Perturbation {
        return Err(Error::domain("decision-boundary attack needs a perturbation config"));
    }
    check_seed(target, seed_query)?;
    let seed_class = target.predict(seed_query)?;
    let eps = cfg.epsilon;
    let (queries, predictions, wall_time) = generate(target, cfg, rng, |row, features, rng| {
        row.copy_from_slice(seed_query);
        for &f in features {
            row[f] = (row[f] + rng.range(-eps, eps)).clamp(-1.0, 1.0);
        }
    })?;
    let hits = predictions.iter().filter(|&&p| p == seed_class).count();
    Ok(AttackResult {
        classes_recovered_fraction: recovered_fraction(&predictions, target.num_classes()),
        exploitation_accuracy: Some(hits as f64 / predictions.len() as f64),
        seed_class: Some(seed_class),
        queries,
        predictions,
        wall_time,
    })
}

/// Dispatches on `cfg.kind`.
pub fn run_attack<T: QueryTarget + ?Sized>(
    target: &T,
    seed_query: &[f64],
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AttackResult> {
    match cfg.kind {
        AttackKind::RandomQuery => attack_output_diversity(target, Some(seed_query), cfg, rng),
        AttackKind::Perturbation => attack_decision_boundary(target, seed_query, cfg, rng),
    }
}

/// Mean pairwise distance among the queries predicted as the seed's class;
/// `None` with fewer than two such queries.
pub fn mean_pairwise_distance(result: &AttackResult) -> Option<f64> {
    let class = result.seed_class?;
    let rows: Vec<&[f64]> = result
        .queries
        .iter_rows()
        .zip(&result.predictions)
        .filter(|(_, &p)| p == class)
        .map(|(r, _)| r)
        .collect();
    if rows.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += euclidean_unchecked(rows[i], rows[j]);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Cartesian grid of attack settings; each cell runs once per trial seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kinds: Vec<AttackKind>,
    pub surfaces: Vec<Surface>,
    pub num_queries: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub feature_fractions: Vec<f64>,
    pub extra_features: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn single(cfg: &AttackConfig) -> Self {
        Self {
            kinds: vec![cfg.kind],
            surfaces: vec![cfg.surface],
            num_queries: vec![cfg.num_queries],
            epsilons: vec![cfg.epsilon],
            feature_fractions: vec![cfg.feature_fraction],
            extra_features: vec![cfg.extra_features],
            seeds: vec![cfg.seed],
        }
    }

    /// Expanded configs in row-major order (kind slowest, seed fastest).
    /// Invalid combinations, such as white-box with extra features, are skipped.
    pub fn configs(&self) -> Vec<AttackConfig> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &surface in &self.surfaces {
                for &num_queries in &self.num_queries {
                    for &epsilon in &self.epsilons {
                        for &feature_fraction in &self.feature_fractions {
                            for &extra_features in &self.extra_features {
                                for &seed in &self.seeds {
                                    let cfg = AttackConfig {
                                        kind,
                                        num_queries,
                                        epsilon,
                                        feature_fraction,
                                        surface,
                                        extra_features,
                                        seed,
                                    };
                                    if cfg.validate().is_ok() {
                                        out.push(cfg);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub kind: AttackKind,
    pub surface: Surface,
    pub num_queries: usize,
    pub epsilon: f64,
    pub feature_fraction: f64,
    pub extra_features: usize,
    pub metric: String,
    pub value: f64,
    pub wall_time_us: f64,
    pub seed: u64,
}

/// Runs every grid cell against `target`. The seed query for trial seed `s`
/// is row `s mod rows` of `seed_queries`; each run draws from `Rng::new(s)`.
pub fn sweep<T: QueryTarget + ?Sized>(
    grid: &SweepGrid,
    target: &T,
    seed_queries: &Matrix,
) -> Result<Vec<(SweepRecord, AttackResult)>> {
    let configs = grid.configs();
    if configs.is_empty() {
        return Err(Error::domain("sweep grid has no valid cells"));
    }
    if seed_queries.rows() == 0 {
        return Err(Error::domain("sweep needs at least one seed query"));
    }
    configs
        .par_iter()
        .map(|cfg| {
            let seed_query = seed_queries.row((cfg.seed % seed_queries.rows() as u64) as usize);
            let result = run_attack(target, seed_query, cfg, &mut Rng::new(cfg.seed))?;
            let record = SweepRecord {
                kind: cfg.kind,
                surface: cfg.surface,
                num_queries: cfg.num_queries,
                epsilon: cfg.epsilon,
                feature_fraction: cfg.feature_fraction,
                extra_features: cfg.extra_features,
                metric: cfg.kind.metric_name().to_string(),
                value: result.metric(),
                wall_time_us: result.wall_time.as_secs_f64() * 1e6,
                seed: cfg.seed,
            };
            Ok((record, result))
        })
        .collect()
}

/// Writes sweep records as CSV. With `record_timings` off the wall-time
/// column is zero so that output depends only on the seeds.
pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], record_timings: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "kind",
        "surface",
        "num_queries",
        "epsilon",
        "feature_fraction",
        "extra_features",
        "metric",
        "value",
        "wall_time_us",
        "seed",
    ])
    .map_err(csv_error)?;
    for r in records {
        let wall = if record_timings { r.wall_time_us } else { 0.0 };
        w.write_record([
            r.kind.name().to_string(),
            r.surface.name().to_string(),
            r.num_queries.to_string(),
            r.epsilon.to_string(),
            r.feature_fraction.to_string(),
            r.extra_features.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            wall.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use crate::numeric::uniform;
    use crate::service::ServiceParams;

    /// Predicts 1 iff the first feature is positive.
    struct Sign;

    impl QueryTarget for Sign {
        fn input_dim(&self) -> usize {
            4
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn predict(&self, x: &[f64]) -> Result<usize> {
            assert_eq!(x.len(), 4);
            Ok(usize::from(x[0] > 0.0))
        }
    }

    fn linear_target(seed: u64) -> ServiceModel {
        let mut rng = Rng::new(seed);
        let layer = Dense::glorot(8, 3, Activation::Identity, &mut rng);
        ServiceModel::new(ServiceParams::Softmax(layer), 3, 8).unwrap()
    }

    #[test]
    fn select_seeds_cases() {
        let data = Matrix::new(5, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut all = select_seeds(&data, 5, &mut Rng::new(1)).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(
            select_seeds(&data, 3, &mut Rng::new(9)).unwrap(),
            select_seeds(&data, 3, &mut Rng::new(9)).unwrap()
        );
        assert!(select_seeds(&data, 6, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn output_diversity_matches_distinct_count() {
        let target = linear_target(2);
        for seed in 0..20 {
            let cfg = AttackConfig::random_query(15, seed);
            let res = attack_output_diversity(&target, None, &cfg, &mut Rng::new(seed)).unwrap();
            let mut distinct = res.predictions.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert_eq!(res.classes_recovered_fraction, distinct.len() as f64 / 3.0);
            for (row, &p) in res.queries.iter_rows().zip(&res.predictions) {
                assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
                assert_eq!(target.predict(row).unwrap(), p);
            }
        }
    }

    #[test]
    fn two_class_recovery_saturates() {
        let cfg = AttackConfig::random_query(40, 3);
        let res = attack_output_diversity(&Sign, None, &cfg, &mut Rng::new(3)).unwrap();
        let first_both = (1..=40)
            .find(|&n| recovered_fraction(&res.predictions[..n], 2) == 1.0)
            .unwrap();
        for n in first_both..=40 {
            assert_eq!(recovered_fraction(&res.predictions[..n], 2), 1.0);
        }
    }

    #[test]
    fn partial_subset_copies_seed() {
        let seed = [0.5, -0.25, 0.75, 0.1];
        let mut cfg = AttackConfig::random_query(10, 4);
        cfg.feature_fraction = 0.5;
        assert!(attack_output_diversity(&Sign, None, &cfg, &mut Rng::new(4)).is_err());
        let res = attack_output_diversity(&Sign, Some(&seed), &cfg, &mut Rng::new(4)).unwrap();
        let mut changed = vec![false; 4];
        for row in res.queries.iter_rows() {
            for (c, (a, b)) in row.iter().zip(&seed).enumerate() {
                changed[c] |= a != b;
            }
        }
        assert_eq!(changed.iter().filter(|&&c| c).count(), 2);
    }

    #[test]
    fn tiny_epsilon_preserves_seed_class() {
        let target = linear_target(5);
        let seed: Vec<f64> = uniform(&mut Rng::new(6), -1.0, 1.0, 8).unwrap();
        let cfg = AttackConfig::perturbation(50, 1e-12, 7);
        let res = attack_decision_boundary(&target, &seed, &cfg, &mut Rng::new(7)).unwrap();
        assert_eq!(res.exploitation_accuracy, Some(1.0));
        for row in res.queries.iter_rows() {
            for (a, b) in row.iter().zip(&seed) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn perturbations_are_bounded_and_recounted() {
        let target = linear_target(8);
        let seed = [1.0, -1.0, 0.99, 0.0, 0.3, -0.3, 0.5, -0.5];
        let cfg = AttackConfig::perturbation(200, 0.4, 9);
        let res = attack_decision_boundary(&target, &seed, &cfg, &mut Rng::new(9)).unwrap();
        let class = target.predict(&seed).unwrap();
        let hits = res.queries.iter_rows().filter(|r| target.predict(r).unwrap() == class).count();
        assert_eq!(res.exploitation_accuracy, Some(hits as f64 / 200.0));
        for row in res.queries.iter_rows() {
            for (a, b) in row.iter().zip(&seed) {
                assert!((a - b).abs() <= 0.4 + 1e-15 && (-1.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::random_query(0, 1).validate().is_err());
        assert!(AttackConfig::perturbation(5, 0.0, 1).validate().is_err());
        let mut cfg = AttackConfig::random_query(5, 1);
        cfg.extra_features = 3;
        assert!(cfg.validate().is_err());
        cfg.surface = Surface::BlackBox;
        assert!(cfg.validate().is_ok());
        cfg.feature_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let wrong = AttackConfig::perturbation(5, 0.1, 1);
        assert!(attack_output_diversity(&Sign, None, &wrong, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn black_box_matches_white_box_on_shared_features() {
        let target = linear_target(10);
        let seed = [0.1; 8];
        for kind in [AttackKind::RandomQuery, AttackKind::Perturbation] {
            let mut white = AttackConfig::perturbation(30, 0.2, 11);
            white.kind = kind;
            let black = AttackConfig {
                surface: Surface::BlackBox,
                extra_features: 100,
                ..white
            };
            let w = run_attack(&target, &seed, &white, &mut Rng::new(11)).unwrap();
            let b = run_attack(&target, &seed, &black, &mut Rng::new(11)).unwrap();
            assert_eq!(w.predictions, b.predictions);
            assert_eq!(b.queries.cols(), 108);
            for (wr, br) in w.queries.iter_rows().zip(b.queries.iter_rows()) {
                assert_eq!(wr, &br[..8]);
            }
        }
    }

    #[test]
    fn query_prefix_is_stable_across_sizes() {
        let target = linear_target(12);
        let seed = [0.0; 8];
        let grid = SweepGrid {
            num_queries: vec![10, 100, 1000],
            ..SweepGrid::single(&AttackConfig::random_query(1, 13))
        };
        let rows = sweep(&grid, &target, &Matrix::from_rows(&[seed]).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);
        for pair in rows.windows(2) {
            let (small, large) = (&pair[0].1, &pair[1].1);
            assert_eq!(small.predictions[..], large.predictions[..small.predictions.len()]);
            assert!(pair[0].0.value <= pair[1].0.value);
        }
    }

    #[test]
    fn single_cell_sweep_equals_direct_call() {
        let target = linear_target(14);
        let seeds = Matrix::new(3, 8, uniform(&mut Rng::new(15), -1.0, 1.0, 24).unwrap()).unwrap();
        let cfg = AttackConfig::perturbation(20, 0.3, 4);
        let rows = sweep(&SweepGrid::single(&cfg), &target, &seeds).unwrap();
        let direct = attack_decision_boundary(&target, seeds.row(1), &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].1.predictions, direct.predictions);
        assert_eq!(rows[0].1.queries, direct.queries);
        assert_eq!(rows[0].0.value, direct.metric());
    }

    #[test]
    fn sweep_csv_schema() {
        let target = linear_target(16);
        let seeds = Matrix::from_rows(&[[0.2; 8]]).unwrap();
        let grid = SweepGrid {
            kinds: vec![AttackKind::RandomQuery, AttackKind::Perturbation],
            epsilons: vec![0.01],
            ..SweepGrid::single(&AttackConfig::random_query(5, 1))
        };
        let rows: Vec<SweepRecord> = sweep(&grid, &target, &seeds).unwrap().into_iter().map(|r| r.0).collect();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "kind,surface,num_queries,epsilon,feature_fraction,extra_features,metric,value,wall_time_us,seed"
        );
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "random_query");
        assert_eq!(first[6], "classes_recovered_fraction");
        assert_eq!(first[8], "0");
        assert_eq!(lines.count(), 1);
    }

    #[test]
    fn pairwise_distance_oracle() {
        let queries = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0], [0.0, 8.0]]).unwrap();
        let res = AttackResult {
            queries,
            predictions: vec![1, 1, 0],
            classes_recovered_fraction: 1.0,
            exploitation_accuracy: Some(2.0 / 3.0),
            seed_class: Some(1),
            wall_time: Duration::ZERO,
        };
        assert_eq!(mean_pairwise_distance(&res), Some(5.0));
        let none = AttackResult {
            predictions: vec![0, 0, 0],
            ..res
        };
        assert_eq!(mean_pairwise_distance(&none), None);
    }
}
