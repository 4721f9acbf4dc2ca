//! Gaussian kernel helpers shared by the density scores and the weight matrix.

use serde::{Deserialize, Serialize};

/// Smallest log-density returned by the kernel estimators.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Bandwidth selection: Silverman's rule of thumb or a fixed value.
///
/// Serialized as the string `"silverman"` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum BandwidthRule {
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<BandwidthRepr> for BandwidthRule {
    type Error = String;

    fn try_from(r: BandwidthRepr) -> Result<Self, String> {
        match r {
            BandwidthRepr::Name(n) if n.eq_ignore_ascii_case("silverman") => Ok(Self::Silverman),
            BandwidthRepr::Name(n) => Err(format!("unknown bandwidth rule `{n}`")),
            BandwidthRepr::Value(h) if h > 0.0 && h.is_finite() => Ok(Self::Fixed(h)),
            BandwidthRepr::Value(h) => Err(format!("bandwidth must be positive, got {h}")),
        }
    }
}

impl From<BandwidthRule> for BandwidthRepr {
    fn from(b: BandwidthRule) -> Self {
        match b {
            BandwidthRule::Silverman => BandwidthRepr::Name("silverman".into()),
            BandwidthRule::Fixed(h) => BandwidthRepr::Value(h),
        }
    }
}

impl BandwidthRule {
    /// Resolves the rule on a sample. A zero-spread sample falls back to a
    /// unit scale so the bandwidth stays positive.
    pub fn resolve(&self, sample: impl Iterator<Item = f64> + Clone) -> f64 {
        match *self {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Silverman => silverman(sample),
        }
    }
}

/// `1.06 · σ̂ · n^(-1/5)` with the unbiased sample standard deviation.
pub fn silverman(sample: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = sample.clone().count();
    if n == 0 {
        return 1.0;
    }
    let mean = sample.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        sample.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    1.06 * sd * (n as f64).powf(-0.2)
}

/// `K_h(d) = h^{-1} φ(d / h)` with the standard normal density `φ`.
pub fn gaussian_kernel(d: f64, h: f64) -> f64 {
    let z = d / h;
    (-0.5 * z * z - LN_SQRT_2PI).exp() / h
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Product-Gaussian kernel density estimate over a fixed point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKde {
    points: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    log_norm: f64,
}

impl ProductKde {
    /// Bandwidths are chosen per coordinate by `rule`.
    pub fn fit(points: Vec<Vec<f64>>, rule: BandwidthRule) -> Self {
        let p = points.first().map_or(0, Vec::len);
        let bandwidths: Vec<f64> = (0..p)
            .map(|d| rule.resolve(points.iter().map(move |x| x[d])))
            .collect();
        let n = points.len() as f64;
        let log_norm = n.ln() + bandwidths.iter().map(|h| h.ln() + LN_SQRT_2PI).sum::<f64>();
        Self {
            points,
            bandwidths,
            log_norm,
        }
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let exponents: Vec<f64> = self
            .points
            .iter()
            .map(|pt| {
                -0.5 * pt
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        (log_sum_exp(&exponents) - self.log_norm).max(LOG_DENSITY_FLOOR)
    }
}
