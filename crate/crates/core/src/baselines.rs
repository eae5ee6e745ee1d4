//! Session-level comparison detectors: a fair coin, a reconstruction-error
//! threshold, and a normality test on nearest-prior-query distances.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autoencoder::Autoencoder;
use crate::detector::Verdict;
use crate::error::{Error, Result};
use crate::numeric::{euclidean_unchecked, Matrix, Rng};

/// Default normality cut-off for the distance-distribution detector.
pub const PRADA_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Soda,
    Random,
    Magnet,
    Prada,
}

impl Method {
    pub const BASELINES: [Method; 3] = [Method::Random, Method::Magnet, Method::Prada];

    pub fn name(self) -> &'static str {
        match self {
            Method::Soda => "soda",
            Method::Random => "random",
            Method::Magnet => "magnet",
            Method::Prada => "prada",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineVerdict {
    pub method: Method,
    pub verdict: Verdict,
    pub score: f64,
}

/// Fair coin; the score is the drawn bit.
pub fn random_detector(rng: &mut Rng) -> BaselineVerdict {
    let flag = rng.coin();
    BaselineVerdict {
        method: Method::Random,
        verdict: if flag {
            Verdict::Adversarial
        } else {
            Verdict::Benign
        },
        score: if flag { 1.0 } else { 0.0 },
    }
}

/// Largest reconstruction MSE over `benign`: zero false positives on that set.
pub fn fit_magnet_threshold(benign: &Matrix, ae: &Autoencoder) -> Result<f64> {
    let mut worst = 0.0f64;
    for row in benign.iter_rows() {
        worst = worst.max(ae.reconstruction_mse(row)?);
    }
    if !(worst > 0.0) {
        return Err(Error::domain("benign reconstruction errors are all zero"));
    }
    Ok(worst)
}

/// Adversarial iff any query's reconstruction MSE exceeds `threshold`.
/// The score is the largest MSE seen.
pub fn magnet_detector(queries: &Matrix, ae: &Autoencoder, threshold: f64) -> Result<BaselineVerdict> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::domain("threshold must be positive"));
    }
    let mut worst = 0.0f64;
    for row in queries.iter_rows() {
        worst = worst.max(ae.reconstruction_mse(row)?);
    }
    Ok(BaselineVerdict {
        method: Method::Magnet,
        verdict: if worst > threshold {
            Verdict::Adversarial
        } else {
            Verdict::Benign
        },
        score: worst,
    })
}

/// Distance from each query after the first to its nearest predecessor.
pub fn min_prior_distances(queries: &Matrix) -> Vec<f64> {
    (1..queries.rows())
        .map(|j| {
            (0..j)
                .map(|i| euclidean_unchecked(queries.row(i), queries.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Adversarial iff the Shapiro–Wilk W of the nearest-predecessor distances
/// falls below `threshold`. Fewer than three distances abstain as benign
/// with score 1.
pub fn prada_detector(queries: &Matrix, threshold: f64) -> Result<BaselineVerdict> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::domain("detection threshold must lie in (0, 1]"));
    }
    let minima = min_prior_distances(queries);
    let w = if minima.len() < 3 {
        1.0
    } else {
        shapiro_wilk(&minima)?
    };
    Ok(BaselineVerdict {
        method: Method::Prada,
        verdict: if w < threshold {
            Verdict::Adversarial
        } else {
            Verdict::Benign
        },
        score: w,
    })
}

/// Shapiro–Wilk W with Royston's coefficient approximation, `3 ≤ n ≤ 5000`.
/// A sample with zero range returns 0.
pub fn shapiro_wilk(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::domain(format!("Shapiro-Wilk needs 3..=5000 values, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("Shapiro-Wilk sample is not finite"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= f64::EPSILON * x[n - 1].abs().max(x[0].abs()).max(1.0) {
        return Ok(0.0);
    }
    let a = shapiro_wilk_coefficients(n);
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = a.iter().zip(&x).map(|(a, v)| a * v).sum();
    Ok((num * num / ss).min(1.0))
}

/// Antisymmetric weights `a_1..a_n` in ascending order-statistic order.
fn shapiro_wilk_coefficients(n: usize) -> Vec<f64> {
    if n == 3 {
        let h = 0.5f64.sqrt();
        return vec![-h, 0.0, h];
    }
    const C_LAST: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C_NEXT: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let poly = |c: &[f64; 6], u: f64| c.iter().rev().fold(0.0, |acc, &k| acc * u + k);

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let nf = n as f64;
    let m: Vec<f64> = (1..=n)
        .map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let ssm: f64 = m.iter().map(|v| v * v).sum();
    let norm = ssm.sqrt();
    let u = 1.0 / nf.sqrt();

    let mut a = vec![0.0; n];
    let a_n = m[n - 1] / norm + poly(&C_LAST, u);
    let (fixed, eps) = if n > 5 {
        let a_n1 = m[n - 2] / norm + poly(&C_NEXT, u);
        a[n - 2] = a_n1;
        a[1] = -a_n1;
        let eps = (ssm - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2))
            / (1.0 - 2.0 * a_n.powi(2) - 2.0 * a_n1.powi(2));
        (2, eps)
    } else {
        let eps = (ssm - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * a_n.powi(2));
        (1, eps)
    };
    a[n - 1] = a_n;
    a[0] = -a_n;
    let scale = eps.sqrt();
    for i in fixed..n - fixed {
        a[i] = m[i] / scale;
    }
    a
}
