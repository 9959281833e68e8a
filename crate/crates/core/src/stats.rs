//! Small statistics helpers: slope fits, bootstrap errors, normal CDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::parallel::chunked_sum;

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn mean(v: &[f64]) -> f64 {
    chunked_sum(v.len(), |i| v[i]) / v.len() as f64
}

/// Unbiased sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (chunked_sum(v.len(), |i| (v[i] - m).powi(2)) / (v.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub ci95: f64,
}

/// Least-squares fit of `log y = a + s log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "slope fit needs at least two (x, y) pairs".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "log-log fit needs positive finite values".into(),
        ));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument(
            "abscissae must not all coincide".into(),
        ));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ci95 = if x.len() > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let se = (rss / (n - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 2.0)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.96);
        t * se
    } else {
        f64::INFINITY
    };
    Ok(SlopeFit {
        slope,
        intercept,
        ci95,
    })
}

/// Bootstrap standard error of the sample mean, `resamples` draws with a
/// fixed seed.
pub fn bootstrap_se_of_mean(v: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = v.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += v[rng.random_range(0..n)];
            }
            s / n as f64
        })
        .collect();
    std_dev(&means)
}

/// Bootstrap resample indices: `resamples` rows of `n` indices.
pub fn bootstrap_indices(n: usize, resamples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect()
}
