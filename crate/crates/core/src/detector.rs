//! Streaming leakage-rate detector.
//!
//! Each session keeps three cumulative signals over its query stream:
//!
//! * `r`: running sum of per-query autoencoder reconstruction MSE;
//! * `d`: running sum, over queries, of the median latent distance between
//!   the newest encoded query and every earlier one;
//! * `o`: Shannon entropy (natural log) of the predicted-class histogram.
//!
//! Each signal is min-max normalized against benign sessions at the same
//! timestep, the three are mixed with weights `α + β + γ = 1` into the
//! leakage rate `l_t`, and the session is flagged adversarial when `l_t`
//! leaves the multiplicative band `l_tr_t · (1 ± δ)` around the benign
//! reference.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::numeric::{euclidean_unchecked, median_in_place, Matrix, Rng};
use crate::service::ServiceModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Adversarial,
}

impl Verdict {
    pub fn is_adversarial(self) -> bool {
        self == Verdict::Adversarial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Reconstruction,
    Distance,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub max_horizon: usize,
}

impl Default for DetectorConfig {
    /// Equal weights (0.33 each, rescaled to sum to one), δ = 0.2, horizon 500.
    fn default() -> Self {
        Self::normalized(0.33, 0.33, 0.33, 0.2, 500).expect("valid defaults")
    }
}

impl DetectorConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64, max_horizon: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            gamma,
            delta,
            max_horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`new`](Self::new) but rescales the weights to sum to one.
    pub fn normalized(alpha: f64, beta: f64, gamma: f64, delta: f64, max_horizon: usize) -> Result<Self> {
        let sum = alpha + beta + gamma;
        if !(sum > 0.0) || alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
            return Err(Error::domain("weights must be non-negative with a positive sum"));
        }
        Self::new(alpha / sum, beta / sum, gamma / sum, delta, max_horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("weights must be finite and non-negative"));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "weights must sum to 1, got {}",
                w.iter().sum::<f64>()
            )));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::domain("delta must be positive"));
        }
        if self.max_horizon == 0 {
            return Err(Error::domain("horizon must be positive"));
        }
        Ok(())
    }
}

/// Per-session detector memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    r_cum: f64,
    d_cum: f64,
    class_counts: Vec<u64>,
    encoded_history: Vec<Vec<f64>>,
    verdicts: Vec<Verdict>,
}

/// Entropy of a class histogram, `0·ln 0 = 0`.
pub fn entropy_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let h = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>();
    // a single occupied class gives -0.0
    h.max(0.0)
}

impl DetectorState {
    pub fn new(num_classes: usize) -> Self {
        Self {
            r_cum: 0.0,
            d_cum: 0.0,
            class_counts: vec![0; num_classes],
            encoded_history: Vec::new(),
            verdicts: Vec::new(),
        }
    }

    /// Rebuilds a state from stored parts, checking the bookkeeping invariants.
    pub fn from_parts(
        r_cum: f64,
        d_cum: f64,
        class_counts: Vec<u64>,
        encoded_history: Vec<Vec<f64>>,
        verdicts: Vec<Verdict>,
    ) -> Result<Self> {
        let t = encoded_history.len();
        if class_counts.iter().sum::<u64>() != t as u64 || verdicts.len() != t {
            return Err(Error::domain(
                "history, class counts and verdicts disagree on t",
            ));
        }
        if !(r_cum >= 0.0 && d_cum >= 0.0 && r_cum.is_finite() && d_cum.is_finite()) {
            return Err(Error::domain("cumulative components must be finite and non-negative"));
        }
        if let Some(first) = encoded_history.first() {
            if encoded_history.iter().any(|z| z.len() != first.len()) {
                return Err(Error::shape("encoded history has ragged rows"));
            }
        }
        Ok(Self {
            r_cum,
            d_cum,
            class_counts,
            encoded_history,
            verdicts,
        })
    }

    pub fn t(&self) -> usize {
        self.encoded_history.len()
    }

    pub fn r_cum(&self) -> f64 {
        self.r_cum
    }

    pub fn d_cum(&self) -> f64 {
        self.d_cum
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn encoded_history(&self) -> &[Vec<f64>] {
        &self.encoded_history
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn current_verdict(&self) -> Option<Verdict> {
        self.verdicts.last().copied()
    }

    /// Adds one query's reconstruction error to `r`; returns the new `r`.
    pub fn update_reconstruction(&mut self, x: &[f64], ae: &Autoencoder) -> Result<f64> {
        let mse = ae.reconstruction_mse(x)?;
        Ok(self.add_reconstruction_error(mse))
    }

    pub(crate) fn add_reconstruction_error(&mut self, mse: f64) -> f64 {
        self.r_cum += mse;
        self.r_cum
    }

    /// Median distance from `z` to every stored latent; zero with no history.
    pub fn distance_increment(&self, z: &[f64]) -> f64 {
        if self.encoded_history.is_empty() {
            return 0.0;
        }
        let mut dists: Vec<f64> = self
            .encoded_history
            .iter()
            .map(|prev| euclidean_unchecked(prev, z))
            .collect();
        median_in_place(&mut dists)
    }

    /// Adds the median distance to `d`, appends `z`; returns the new `d`.
    pub fn update_distance(&mut self, z: &[f64]) -> Result<f64> {
        if let Some(first) = self.encoded_history.first() {
            if first.len() != z.len() {
                return Err(Error::shape(format!(
                    "latent has {} values, history has {}",
                    z.len(),
                    first.len()
                )));
            }
        }
        let inc = self.distance_increment(z);
        Ok(self.commit_distance(inc, z.to_vec()))
    }

    fn commit_distance(&mut self, increment: f64, z: Vec<f64>) -> f64 {
        self.d_cum += increment;
        self.encoded_history.push(z);
        self.d_cum
    }

    pub fn record_prediction(&mut self, class: usize) -> Result<()> {
        let slot = self
            .class_counts
            .get_mut(class)
            .ok_or_else(|| Error::domain(format!("class {class} out of range")))?;
        *slot += 1;
        Ok(())
    }

    /// Entropy of the predicted-class distribution so far.
    pub fn output_entropy(&self) -> Result<f64> {
        if self.class_counts.iter().all(|&c| c == 0) {
            return Err(Error::domain("entropy is undefined before the first prediction"));
        }
        Ok(entropy_of_counts(&self.class_counts))
    }

    /// Runs one query through the full detector and commits the result.
    pub fn observe(
        &mut self,
        x: &[f64],
        ae: &Autoencoder,
        model: &ServiceModel,
        cfg: &DetectorConfig,
        cal: &CalibrationTable,
    ) -> Result<LeakageBreakdown> {
        self.observe_with(x, ae, model, cfg, cal, Execution::Sequential)
    }

    /// [`observe`](Self::observe) with the three components optionally
    /// computed on separate threads. Results are bit-identical either way.
    pub fn observe_with(
        &mut self,
        x: &[f64],
        ae: &Autoencoder,
        model: &ServiceModel,
        cfg: &DetectorConfig,
        cal: &CalibrationTable,
        exec: Execution,
    ) -> Result<LeakageBreakdown> {
        let t = self.t() + 1;
        let horizon = cfg.max_horizon.min(cal.horizon());
        if t > horizon {
            return Err(Error::Horizon { t, horizon });
        }
        if model.num_classes() != self.class_counts.len() {
            return Err(Error::shape("service model class count differs from detector state"));
        }

        let started = Instant::now();
        let z = ae.encode(x)?;
        let encode_time = started.elapsed();

        let reconstruction = || -> Result<(f64, Duration)> {
            let start = Instant::now();
            let x_hat = ae.decode(&z)?;
            let mse = x
                .iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x.len() as f64;
            Ok((mse, start.elapsed()))
        };
        let distance = || -> (f64, Duration) {
            let start = Instant::now();
            let inc = self.distance_increment(&z);
            (inc, start.elapsed())
        };
        let entropy = || -> Result<(usize, f64, Duration)> {
            let start = Instant::now();
            let class = model.predict(&z)?;
            let mut counts = self.class_counts.clone();
            counts[class] += 1;
            let h = entropy_of_counts(&counts);
            Ok((class, h, start.elapsed()))
        };

        let (rec, (d_inc, d_time), ent) = match exec {
            Execution::Sequential => (reconstruction(), distance(), entropy()),
            Execution::Concurrent => std::thread::scope(|s| {
                let dh = s.spawn(distance);
                let oh = s.spawn(entropy);
                let rec = reconstruction();
                (
                    rec,
                    dh.join().expect("distance worker panicked"),
                    oh.join().expect("entropy worker panicked"),
                )
            }),
        };
        let (mse, r_time) = rec?;
        let (class, raw_o, o_time) = ent?;

        // commit
        let raw_r = self.add_reconstruction_error(mse);
        let raw_d = self.commit_distance(d_inc, z);
        self.class_counts[class] += 1;

        let norm_r = normalize(raw_r, t, Component::Reconstruction, cal)?;
        let norm_d = normalize(raw_d, t, Component::Distance, cal)?;
        let norm_o = normalize(raw_o, t, Component::Entropy, cal)?;
        let l = leakage_rate(norm_r, norm_d, norm_o, cfg);
        let verdict = classify(l, t, cfg, cal)?;
        self.verdicts.push(verdict);

        Ok(LeakageBreakdown {
            t,
            raw_r,
            raw_d,
            raw_o,
            norm_r,
            norm_d,
            norm_o,
            l,
            verdict,
            timing_us: ComponentTiming {
                r: micros(encode_time + r_time),
                d: micros(d_time),
                o: micros(o_time),
            },
        })
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentTiming {
    pub r: f64,
    pub d: f64,
    pub o: f64,
}

/// One JSON-lines record per observed query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageBreakdown {
    pub t: usize,
    pub raw_r: f64,
    pub raw_d: f64,
    pub raw_o: f64,
    pub norm_r: f64,
    pub norm_d: f64,
    pub norm_o: f64,
    pub l: f64,
    pub verdict: Verdict,
    pub timing_us: ComponentTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Per-timestep benign envelope (index `t - 1`) and reference leakage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub reconstruction: ComponentRange,
    pub distance: ComponentRange,
    pub entropy: ComponentRange,
    pub reference: Vec<f64>,
}

impl CalibrationTable {
    pub fn new(
        reconstruction: ComponentRange,
        distance: ComponentRange,
        entropy: ComponentRange,
        reference: Vec<f64>,
    ) -> Result<Self> {
        let table = Self {
            reconstruction,
            distance,
            entropy,
            reference,
        };
        let n = table.reference.len();
        for range in [&table.reconstruction, &table.distance, &table.entropy] {
            if range.min.len() != n || range.max.len() != n {
                return Err(Error::shape("calibration arrays differ in length"));
            }
            if range.min.iter().zip(&range.max).any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::domain("calibration min exceeds max"));
            }
        }
        if table.reference.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite reference leakage"));
        }
        Ok(table)
    }

    pub fn horizon(&self) -> usize {
        self.reference.len()
    }

    pub fn range(&self, which: Component) -> &ComponentRange {
        match which {
            Component::Reconstruction => &self.reconstruction,
            Component::Distance => &self.distance,
            Component::Entropy => &self.entropy,
        }
    }

    pub fn reference_at(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.reference[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(Error::Horizon {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }
}

/// `(v − min_t) / (max_t − min_t)`, unclamped; zero when the envelope is degenerate.
pub fn normalize(v: f64, t: usize, which: Component, cal: &CalibrationTable) -> Result<f64> {
    cal.check(t)?;
    let range = cal.range(which);
    let (lo, hi) = (range.min[t - 1], range.max[t - 1]);
    if hi <= lo {
        return Ok(0.0);
    }
    Ok((v - lo) / (hi - lo))
}

pub fn leakage_rate(norm_r: f64, norm_d: f64, norm_o: f64, cfg: &DetectorConfig) -> f64 {
    cfg.alpha * norm_r + cfg.beta * norm_d + cfg.gamma * norm_o
}

/// Adversarial iff `l` falls outside `[l_tr − δ·l_tr, l_tr + δ·l_tr]`.
pub fn classify(l: f64, t: usize, cfg: &DetectorConfig, cal: &CalibrationTable) -> Result<Verdict> {
    if t > cfg.max_horizon {
        return Err(Error::Horizon {
            t,
            horizon: cfg.max_horizon,
        });
    }
    let reference = cal.reference_at(t)?;
    let band = cfg.delta * reference;
    Ok(if l < reference - band || l > reference + band {
        Verdict::Adversarial
    } else {
        Verdict::Benign
    })
}

/// Raw `(r, d, o)` after each query of one stream.
pub type RawTrajectory = Vec<[f64; 3]>;

/// Per-row encoder outputs reused across many simulated sessions.
pub struct EncodedRows {
    latents: Vec<Vec<f64>>,
    errors: Vec<f64>,
    classes: Vec<usize>,
    num_classes: usize,
}

impl EncodedRows {
    pub fn new(data: &Matrix, ae: &Autoencoder, model: &ServiceModel) -> Result<Self> {
        let mut latents = Vec::with_capacity(data.rows());
        let mut errors = Vec::with_capacity(data.rows());
        let mut classes = Vec::with_capacity(data.rows());
        for row in data.iter_rows() {
            let (z, e) = ae.encode_with_error(row)?;
            classes.push(model.predict(&z)?);
            latents.push(z);
            errors.push(e);
        }
        Ok(Self {
            latents,
            errors,
            classes,
            num_classes: model.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Raw component trajectory for the stream visiting `rows` in order.
    pub fn trajectory(&self, rows: &[usize]) -> RawTrajectory {
        let mut state = DetectorState::new(self.num_classes);
        rows.iter()
            .map(|&i| {
                let r = state.add_reconstruction_error(self.errors[i]);
                let inc = state.distance_increment(&self.latents[i]);
                let d = state.commit_distance(inc, self.latents[i].clone());
                state.class_counts[self.classes[i]] += 1;
                [r, d, entropy_of_counts(&state.class_counts)]
            })
            .collect()
    }
}

/// Builds the benign envelope from `sessions` simulated streams of length
/// `cfg.max_horizon`, each drawn without replacement from `train`.
pub fn calibrate(
    train: &Matrix,
    ae: &Autoencoder,
    model: &ServiceModel,
    cfg: &DetectorConfig,
    sessions: usize,
    rng: &mut Rng,
) -> Result<CalibrationTable> {
    cfg.validate()?;
    if sessions < 2 {
        return Err(Error::domain("calibration needs at least 2 sessions"));
    }
    let horizon = cfg.max_horizon;
    if train.rows() < horizon {
        return Err(Error::domain(format!(
            "training set has {} rows, fewer than the horizon {horizon}",
            train.rows()
        )));
    }
    let plans: Vec<Vec<usize>> = (0..sessions)
        .map(|_| rng.sample_indices(train.rows(), horizon))
        .collect();
    let encoded = EncodedRows::new(train, ae, model)?;
    let trajectories: Vec<RawTrajectory> =
        plans.par_iter().map(|rows| encoded.trajectory(rows)).collect();
    table_from_trajectories(&trajectories, cfg)
}

/// Envelope and reference leakage from benign raw trajectories of equal length.
pub fn table_from_trajectories(
    trajectories: &[RawTrajectory],
    cfg: &DetectorConfig,
) -> Result<CalibrationTable> {
    let horizon = trajectories.first().map_or(0, Vec::len);
    if trajectories.iter().any(|tr| tr.len() != horizon) {
        return Err(Error::shape("benign trajectories differ in length"));
    }
    let mut ranges: Vec<ComponentRange> = (0..3)
        .map(|_| ComponentRange {
            min: vec![f64::INFINITY; horizon],
            max: vec![f64::NEG_INFINITY; horizon],
        })
        .collect();
    for tr in trajectories {
        for (t, raw) in tr.iter().enumerate() {
            for (c, range) in ranges.iter_mut().enumerate() {
                range.min[t] = range.min[t].min(raw[c]);
                range.max[t] = range.max[t].max(raw[c]);
            }
        }
    }
    let entropy = ranges.pop().expect("three ranges");
    let distance = ranges.pop().expect("three ranges");
    let reconstruction = ranges.pop().expect("three ranges");
    let mut table = CalibrationTable::new(reconstruction, distance, entropy, vec![0.0; horizon])?;
    for t in 1..=horizon {
        let mut total = 0.0;
        for tr in trajectories {
            let [r, d, o] = tr[t - 1];
            total += leakage_rate(
                normalize(r, t, Component::Reconstruction, &table)?,
                normalize(d, t, Component::Distance, &table)?,
                normalize(o, t, Component::Entropy, &table)?,
                cfg,
            );
        }
        table.reference[t - 1] = total / trajectories.len() as f64;
    }
    Ok(table)
}

/// Streams every row of `queries` through a fresh detector.
pub fn run_session(
    queries: &Matrix,
    ae: &Autoencoder,
    model: &ServiceModel,
    cfg: &DetectorConfig,
    cal: &CalibrationTable,
) -> Result<Vec<LeakageBreakdown>> {
    let mut state = DetectorState::new(model.num_classes());
    queries
        .iter_rows()
        .map(|x| state.observe(x, ae, model, cfg, cal))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, Network};
    use crate::numeric::uniform;
    use crate::service::ServiceParams;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn flat_table(horizon: usize, reference: f64) -> CalibrationTable {
        let unit = || ComponentRange {
            min: vec![0.0; horizon],
            max: vec![1.0; horizon],
        };
        CalibrationTable::new(unit(), unit(), unit(), vec![reference; horizon]).unwrap()
    }

    /// Autoencoder that maps everything to zero; a softmax layer on the latent.
    fn toy_pipeline(seed: u64) -> (Autoencoder, ServiceModel) {
        let mut rng = Rng::new(seed);
        let ae = Autoencoder::init(6, &[5, 3], &mut rng).unwrap();
        let layer = Dense::glorot(3, 4, Activation::Identity, &mut rng);
        let model = ServiceModel::new(ServiceParams::Softmax(layer), 4, 3).unwrap();
        (ae, model)
    }

    #[test]
    fn reconstruction_accumulates() {
        let mut s = DetectorState::new(2);
        assert_eq!(s.add_reconstruction_error(0.0), 0.0);
        s.add_reconstruction_error(0.1);
        assert!((s.add_reconstruction_error(0.2) - 0.3).abs() < 1e-15);

        let (ae, _) = toy_pipeline(1);
        let mut rng = Rng::new(2);
        let mut state = DetectorState::new(2);
        let mut oracle = 0.0;
        for _ in 0..5 {
            let x = uniform(&mut rng, -1.0, 1.0, 6).unwrap();
            let x_hat = ae.decode(&ae.encode(&x).unwrap()).unwrap();
            oracle += x.iter().zip(&x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0;
            state.update_reconstruction(&x, &ae).unwrap();
        }
        assert!((state.r_cum() - oracle).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_leaves_r_unchanged() {
        let mut e1 = Dense::zeros(2, 1, Activation::Identity);
        e1.bias = vec![0.0];
        let mut d1 = Dense::zeros(1, 2, Activation::Identity);
        d1.bias = vec![0.25, -0.5];
        let ae = Autoencoder::new(
            Network::new(vec![e1]).unwrap(),
            Network::new(vec![d1]).unwrap(),
        )
        .unwrap();
        let mut s = DetectorState::new(2);
        assert_eq!(s.update_reconstruction(&[0.25, -0.5], &ae).unwrap(), 0.0);
    }

    #[test]
    fn distance_cases() {
        let mut s = DetectorState::new(2);
        assert_eq!(s.update_distance(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(s.update_distance(&[3.0, 4.0]).unwrap(), 5.0);
        assert!(s.update_distance(&[1.0]).is_err());
    }

    #[test]
    fn distance_matches_pairwise_oracle() {
        let mut rng = Rng::new(6);
        let zs: Vec<Vec<f64>> = (0..6).map(|_| uniform(&mut rng, -2.0, 2.0, 3).unwrap()).collect();
        let mut s = DetectorState::new(2);
        let mut oracle = 0.0;
        for t in 0..zs.len() {
            if t > 0 {
                let mut d: Vec<f64> = (0..t)
                    .map(|i| {
                        zs[i].iter().zip(&zs[t]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                    })
                    .collect();
                d.sort_by(f64::total_cmp);
                oracle += if t % 2 == 1 { d[t / 2] } else { (d[t / 2 - 1] + d[t / 2]) / 2.0 };
            }
            assert_eq!(s.update_distance(&zs[t]).unwrap(), oracle);
        }
    }

    #[test]
    fn entropy_cases() {
        let s = DetectorState::new(3);
        assert!(s.output_entropy().is_err());
        assert_eq!(entropy_of_counts(&[7, 0, 0]), 0.0);
        assert!((entropy_of_counts(&[2; 6]) - 6f64.ln()).abs() < 1e-15);
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((entropy_of_counts(&[3, 1]) - expected).abs() < 1e-15);
        assert!((expected - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn normalize_cases() {
        let range = ComponentRange {
            min: vec![1.0, 2.0],
            max: vec![3.0, 2.0],
        };
        let cal = CalibrationTable::new(range.clone(), range.clone(), range, vec![0.5, 0.5]).unwrap();
        assert_eq!(normalize(1.0, 1, Component::Reconstruction, &cal).unwrap(), 0.0);
        assert_eq!(normalize(3.0, 1, Component::Distance, &cal).unwrap(), 1.0);
        assert_eq!(normalize(5.0, 1, Component::Entropy, &cal).unwrap(), 2.0);
        assert_eq!(normalize(9.0, 2, Component::Entropy, &cal).unwrap(), 0.0);
        assert!(matches!(
            normalize(1.0, 3, Component::Entropy, &cal),
            Err(Error::Horizon { t: 3, horizon: 2 })
        ));
    }

    #[test]
    fn leakage_cases() {
        let third = 1.0 / 3.0;
        let cfg = DetectorConfig::new(third, third, 1.0 - 2.0 * third, 0.2, 10).unwrap();
        assert!((leakage_rate(0.3, 0.3, 0.3, &cfg) - 0.3).abs() < 1e-15);
        let proj = DetectorConfig::new(1.0, 0.0, 0.0, 0.2, 10).unwrap();
        assert_eq!(leakage_rate(0.7, 5.0, -3.0, &proj), 0.7);
        let rec_ent = DetectorConfig::new(0.5, 0.0, 0.5, 0.2, 10).unwrap();
        assert_eq!(leakage_rate(0.8, 9.0, 0.2, &rec_ent), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::new(0.5, 0.5, 0.5, 0.2, 10).is_err());
        assert!(DetectorConfig::new(0.5, 0.5, 0.0, 0.0, 10).is_err());
        assert!(DetectorConfig::new(1.2, -0.2, 0.0, 0.2, 10).is_err());
        let d = DetectorConfig::default();
        assert!((d.alpha - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((d.delta, d.max_horizon), (0.2, 500));
    }

    #[test]
    fn classify_band() {
        let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 10).unwrap();
        let cal = flat_table(10, 1.0);
        assert_eq!(classify(1.0, 1, &cfg, &cal).unwrap(), Verdict::Benign);
        assert_eq!(classify(1.25, 1, &cfg, &cal).unwrap(), Verdict::Adversarial);
        assert_eq!(classify(0.85, 1, &cfg, &cal).unwrap(), Verdict::Benign);
        assert_eq!(classify(0.75, 1, &cfg, &cal).unwrap(), Verdict::Adversarial);
        assert!(classify(1.0, 11, &cfg, &cal).is_err());
        // zero reference collapses the band to a point
        let zero = flat_table(10, 0.0);
        assert_eq!(classify(0.0, 1, &cfg, &zero).unwrap(), Verdict::Benign);
        assert_eq!(classify(1e-9, 1, &cfg, &zero).unwrap(), Verdict::Adversarial);
    }

    #[test]
    fn observe_rejects_empty_and_overflowing_queries() {
        let (ae, model) = toy_pipeline(3);
        let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 2).unwrap();
        let cal = flat_table(2, 0.5);
        let mut s = DetectorState::new(4);
        assert!(matches!(s.observe(&[], &ae, &model, &cfg, &cal), Err(Error::Shape(_))));
        assert_eq!(s.t(), 0);
        s.observe(&[0.1; 6], &ae, &model, &cfg, &cal).unwrap();
        s.observe(&[0.2; 6], &ae, &model, &cfg, &cal).unwrap();
        assert!(matches!(
            s.observe(&[0.3; 6], &ae, &model, &cfg, &cal),
            Err(Error::Horizon { t: 3, .. })
        ));
        assert_eq!(s.t(), 2);
    }

    #[test]
    fn concurrent_observe_is_bit_identical() {
        let (ae, model) = toy_pipeline(4);
        let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 30).unwrap();
        let train = Matrix::new(40, 6, uniform(&mut Rng::new(5), -1.0, 1.0, 240).unwrap()).unwrap();
        let cal = calibrate(&train, &ae, &model, &cfg, 4, &mut Rng::new(6)).unwrap();
        let mut a = DetectorState::new(4);
        let mut b = DetectorState::new(4);
        let mut rng = Rng::new(7);
        for _ in 0..30 {
            let x = uniform(&mut rng, -1.0, 1.0, 6).unwrap();
            let mut ra = a.observe_with(&x, &ae, &model, &cfg, &cal, Execution::Sequential).unwrap();
            let mut rb = b.observe_with(&x, &ae, &model, &cfg, &cal, Execution::Concurrent).unwrap();
            ra.timing_us = ComponentTiming::default();
            rb.timing_us = ComponentTiming::default();
            assert_eq!(ra, rb);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn observe_matches_component_functions() {
        let (ae, model) = toy_pipeline(8);
        let cfg = DetectorConfig::normalized(0.2, 0.3, 0.5, 0.2, 20).unwrap();
        let train = Matrix::new(30, 6, uniform(&mut Rng::new(9), -1.0, 1.0, 180).unwrap()).unwrap();
        let cal = calibrate(&train, &ae, &model, &cfg, 3, &mut Rng::new(10)).unwrap();
        let mut s = DetectorState::new(4);
        let mut manual = DetectorState::new(4);
        let mut rng = Rng::new(11);
        for t in 1..=20 {
            let x = uniform(&mut rng, -1.0, 1.0, 6).unwrap();
            let b = s.observe(&x, &ae, &model, &cfg, &cal).unwrap();
            let r = manual.update_reconstruction(&x, &ae).unwrap();
            let z = ae.encode(&x).unwrap();
            let d = manual.update_distance(&z).unwrap();
            manual.record_prediction(model.predict(&z).unwrap()).unwrap();
            let o = manual.output_entropy().unwrap();
            assert_eq!((b.t, b.raw_r, b.raw_d, b.raw_o), (t, r, d, o));
            let l = leakage_rate(b.norm_r, b.norm_d, b.norm_o, &cfg);
            assert!((b.l - l).abs() <= 1e-12);
            assert_eq!(b.verdict, classify(b.l, t, &cfg, &cal).unwrap());
        }
        assert_eq!(s.verdicts().len(), 20);
    }

    #[test]
    fn calibration_properties() {
        let (ae, model) = toy_pipeline(12);
        let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 15).unwrap();
        let train = Matrix::new(15, 6, uniform(&mut Rng::new(13), -1.0, 1.0, 90).unwrap()).unwrap();
        let a = calibrate(&train, &ae, &model, &cfg, 5, &mut Rng::new(14)).unwrap();
        let b = calibrate(&train, &ae, &model, &cfg, 5, &mut Rng::new(14)).unwrap();
        assert_eq!(a, b);
        for t in 0..15 {
            for range in [&a.reconstruction, &a.distance, &a.entropy] {
                assert!(range.min[t] <= range.max[t]);
            }
            assert!(a.reference[t] >= 0.0 && a.reference[t] <= 1.0 + 1e-12);
        }
        // at t = horizon = n every session holds the same multiset
        assert!((a.reconstruction.max[14] - a.reconstruction.min[14]).abs() < 1e-12);

        assert!(calibrate(&train, &ae, &model, &cfg, 1, &mut Rng::new(1)).is_err());
        let short = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 16).unwrap();
        assert!(matches!(
            calibrate(&train, &ae, &model, &short, 5, &mut Rng::new(1)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identical_sessions_give_zero_reference() {
        let tr: RawTrajectory = vec![[0.1, 0.0, 0.0], [0.3, 0.5, 0.6]];
        let cfg = DetectorConfig::default();
        let table = table_from_trajectories(&[tr.clone(), tr], &cfg).unwrap();
        assert_eq!(table.reference, vec![0.0, 0.0]);
    }

    #[test]
    fn calibrated_training_stream_reads_benign() {
        // A stream that is itself one of the calibration sessions sits inside the envelope.
        let (ae, model) = toy_pipeline(15);
        let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 10).unwrap();
        let train = Matrix::new(10, 6, uniform(&mut Rng::new(16), -1.0, 1.0, 60).unwrap()).unwrap();
        let encoded = EncodedRows::new(&train, &ae, &model).unwrap();
        let order: Vec<usize> = (0..10).collect();
        let tr = encoded.trajectory(&order);
        let table = table_from_trajectories(&[tr.clone(), tr], &cfg).unwrap();
        let out = run_session(&train, &ae, &model, &cfg, &table).unwrap();
        assert!(out.iter().all(|b| b.verdict == Verdict::Benign));
    }

    proptest! {
        #[test]
        fn cumulative_components_are_monotone(seed in any::<u64>()) {
            let (ae, model) = toy_pipeline(seed % 16);
            let cfg = DetectorConfig::normalized(1.0, 1.0, 1.0, 0.2, 12).unwrap();
            let cal = flat_table(12, 0.5);
            let mut rng = Rng::new(seed);
            let mut s = DetectorState::new(4);
            let (mut r, mut d) = (0.0, 0.0);
            for _ in 0..12 {
                let x = uniform(&mut rng, -1.0, 1.0, 6).unwrap();
                let b = s.observe(&x, &ae, &model, &cfg, &cal).unwrap();
                prop_assert!(b.raw_r >= r && b.raw_d >= d);
                prop_assert!(b.raw_o >= 0.0 && b.raw_o <= 4f64.ln() + 1e-12);
                r = b.raw_r;
                d = b.raw_d;
            }
            prop_assert_eq!(s.t(), 12);
            prop_assert_eq!(s.class_counts().iter().sum::<u64>(), 12);
        }

        #[test]
        fn verdict_is_scale_invariant(l in 0.0f64..4.0, reference in 0.05f64..3.0, scale in 0.1f64..10.0) {
            let cfg = DetectorConfig::default();
            let base = flat_table(1, reference);
            let scaled = flat_table(1, reference * scale);
            let lo = reference * (1.0 - cfg.delta);
            let hi = reference * (1.0 + cfg.delta);
            // skip values within rounding distance of the band edges
            if (l - lo).abs() > 1e-9 && (l - hi).abs() > 1e-9 {
                prop_assert_eq!(
                    classify(l, 1, &cfg, &base).unwrap(),
                    classify(l * scale, 1, &cfg, &scaled).unwrap()
                );
            }
        }
    }
}
