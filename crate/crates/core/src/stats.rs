//! Sample sizing for simulation experiments: how many replicates are needed
//! for a confidence interval of a given half-length.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
    #[error("finite population needs N >= 2, got {0}")]
    Population(u64),
    #[error("z = {z} is inconsistent with alpha = {alpha} (expected {expected})")]
    Inconsistent { z: f64, alpha: f64, expected: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Infinite,
    Finite(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeParams {
    /// Reliability coefficient.
    pub z: f64,
    /// Population standard deviation.
    pub sigma: f64,
    /// Target half-length of the confidence interval.
    pub halfwidth: f64,
    pub population: Population,
    pub alpha: Option<f64>,
}

impl SampleSizeParams {
    pub fn new(z: f64, sigma: f64, halfwidth: f64, population: Population) -> Result<Self, StatsError> {
        let p = Self {
            z,
            sigma,
            halfwidth,
            population,
            alpha: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_alpha(
        alpha: f64,
        sigma: f64,
        halfwidth: f64,
        population: Population,
    ) -> Result<Self, StatsError> {
        let p = Self {
            z: z_from_alpha(alpha)?,
            sigma,
            halfwidth,
            population,
            alpha: Some(alpha),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        positive(self.z, "z")?;
        positive(self.sigma, "sigma")?;
        positive(self.halfwidth, "halfwidth")?;
        if let Population::Finite(n) = self.population {
            if n < 2 {
                return Err(StatsError::Population(n));
            }
        }
        if let Some(alpha) = self.alpha {
            let expected = z_from_alpha(alpha)?;
            if (expected - self.z).abs() > 1e-3 {
                return Err(StatsError::Inconsistent {
                    z: self.z,
                    alpha,
                    expected,
                });
            }
        }
        Ok(())
    }
}

fn positive(v: f64, what: &'static str) -> Result<(), StatsError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(StatsError::NonPositive(what))
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided standard normal quantile `Φ⁻¹(1 − α/2)`.
///
/// Acklam's rational approximation (relative error ~1e-9) followed by one
/// Halley step against the erfc-based CDF.
pub fn z_from_alpha(alpha: f64) -> Result<f64, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Alpha(alpha));
    }
    // lower tail keeps full precision for small alpha
    Ok(-normal_quantile(alpha / 2.0))
}

/// `Φ⁻¹(p)` for `p` in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSize {
    pub n_raw: f64,
    pub n: u64,
}

/// Minimum replicate count `n = z²σ²/l²`, or with the finite-population
/// correction `n = N z²σ² / (l²(N − 1) + z²σ²)`. Always rounded up.
pub fn min_samples(p: &SampleSizeParams) -> Result<SampleSize, StatsError> {
    p.validate()?;
    let zs2 = (p.z * p.sigma).powi(2);
    let l2 = p.halfwidth * p.halfwidth;
    let n_raw = match p.population {
        Population::Infinite => zs2 / l2,
        Population::Finite(n) => {
            let n = n as f64;
            n * zs2 / (l2 * (n - 1.0) + zs2)
        }
    };
    Ok(SampleSize {
        n_raw,
        n: n_raw.ceil() as u64,
    })
}

/// σ estimated as range/6, treating the range as six standard deviations.
pub fn sigma_from_range(range: f64) -> Result<f64, StatsError> {
    positive(range, "range")?;
    Ok(range / 6.0)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}
