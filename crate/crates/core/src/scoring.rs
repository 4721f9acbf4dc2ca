//! Score functions for the model toolbox.
//!
//! Every score is oriented so that smaller values are stronger evidence that
//! a point is an outlier. One-class (OCC) and binary (BIC) models only look at
//! labeled training data. Positive-unlabeled (PUC) models additionally see the
//! transductive pool `X ∪ X~ ∪ X_cal`; the pool is sorted lexicographically
//! before fitting so the fitted model depends on the multiset alone, which
//! makes it invariant under permutations and under swapping `X_j` with `X~_j`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureVector, InferenceData};
use crate::error::{Error, Result};
use crate::kernel::{BandwidthRule, ProductKde};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "OCC")]
    Occ,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "PUC")]
    Puc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gaussian,
    Kde,
    Knn,
    Logistic,
    KdeRatio,
    PuLogistic,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<BandwidthRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

pub const LOGISTIC_ITERATIONS: usize = 500;
pub const LOGISTIC_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub family: Family,
    pub method: Method,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

impl ClassifierSpec {
    pub fn new(family: Family, method: Method) -> Self {
        Self {
            family,
            method,
            hyperparams: Hyperparams::default(),
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.hyperparams.k = Some(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        use Family::*;
        use Method::*;
        let supported = matches!(
            (self.family, self.method),
            (Occ, Gaussian | Kde | Knn) | (Bic, Logistic | Knn) | (Puc, KdeRatio | PuLogistic)
        );
        if !supported {
            return Err(Error::InvalidConfig(format!(
                "unsupported classifier {:?}/{:?}",
                self.family, self.method
            )));
        }
        if self.hyperparams.k == Some(0) {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if let Some(step) = self.hyperparams.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "step must be positive, got {step}"
                )));
            }
        }
        Ok(())
    }

    /// Short display label such as `OCC/kde`.
    pub fn label(&self) -> String {
        let family = match self.family {
            Family::Occ => "OCC",
            Family::Bic => "BIC",
            Family::Puc => "PUC",
        };
        let method = serde_json::to_value(self.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        match self.hyperparams.k {
            Some(k) => format!("{family}/{method}(k={k})"),
            None => format!("{family}/{method}"),
        }
    }

    fn bandwidth(&self) -> BandwidthRule {
        self.hyperparams.bandwidth.unwrap_or_default()
    }

    fn iterations(&self) -> usize {
        self.hyperparams.iterations.unwrap_or(LOGISTIC_ITERATIONS)
    }

    fn step(&self) -> f64 {
        self.hyperparams.step.unwrap_or(LOGISTIC_STEP)
    }
}

fn lexicographic(a: &FeatureVector, b: &FeatureVector) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.dim().cmp(&b.dim()))
}

fn canonical(mut v: Vec<FeatureVector>) -> Vec<FeatureVector> {
    v.sort_by(lexicographic);
    v
}

/// Training inputs for a score model. All three sets are held in canonical
/// (lexicographic) order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainContext {
    train_nulls: Vec<FeatureVector>,
    labeled_outliers: Vec<FeatureVector>,
    transductive_pool: Vec<FeatureVector>,
}

impl TrainContext {
    pub fn new(
        train_nulls: Vec<FeatureVector>,
        labeled_outliers: Vec<FeatureVector>,
        transductive_pool: Vec<FeatureVector>,
    ) -> Self {
        Self {
            train_nulls: canonical(train_nulls),
            labeled_outliers: canonical(labeled_outliers),
            transductive_pool: canonical(transductive_pool),
        }
    }

    /// Pool = test ∪ mirror ∪ calibration.
    pub fn from_data(data: &InferenceData) -> Self {
        let pool = data
            .test
            .features()
            .iter()
            .chain(&data.mirror)
            .chain(&data.cal)
            .cloned()
            .collect();
        Self::new(
            data.train_nulls.clone(),
            data.labeled_outliers.clone(),
            pool,
        )
    }

    pub fn train_nulls(&self) -> &[FeatureVector] {
        &self.train_nulls
    }

    pub fn labeled_outliers(&self) -> &[FeatureVector] {
        &self.labeled_outliers
    }

    pub fn transductive_pool(&self) -> &[FeatureVector] {
        &self.transductive_pool
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GaussianFit {
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_norm: f64,
    ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct LogisticFit {
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticFit {
    fn probability(&self, x: &[f64]) -> f64 {
        let z = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        sigmoid(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    Gaussian(GaussianFit),
    Kde(ProductKde),
    Knn {
        points: Vec<Vec<f64>>,
        k: usize,
    },
    Logistic(LogisticFit),
    KnnClassifier {
        points: Vec<(Vec<f64>, bool)>,
        k: usize,
    },
    KdeRatio {
        null: ProductKde,
        mixture: ProductKde,
    },
    PuLogistic(LogisticFit),
}

/// A fitted score function `s(·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    family: Family,
    method: Method,
    dim: usize,
    fitted: Fitted,
}

impl ScoreModel {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the score; smaller means more outlier-like.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.score_unchecked(x))
    }

    pub fn score_all(&self, xs: &[FeatureVector]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.score(x)).collect()
    }

    fn score_unchecked(&self, x: &[f64]) -> f64 {
        match &self.fitted {
            Fitted::Gaussian(g) => gaussian_log_density(g, x),
            Fitted::Kde(kde) => kde.log_density(x),
            Fitted::Knn { points, k } => {
                let mut d: Vec<f64> = points.iter().map(|pt| euclidean(pt, x)).collect();
                let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                -*kth
            }
            Fitted::Logistic(fit) => -fit.probability(x),
            Fitted::KnnClassifier { points, k } => {
                let mut d: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(i, (pt, _))| (euclidean(pt, x), i))
                    .collect();
                // ties resolved by canonical index
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let outliers = d[..*k].iter().filter(|(_, i)| points[*i].1).count();
                -(outliers as f64) / *k as f64
            }
            Fitted::KdeRatio { null, mixture } => null.log_density(x) - mixture.log_density(x),
            Fitted::PuLogistic(fit) => fit.probability(x),
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn raw(points: &[FeatureVector]) -> Vec<Vec<f64>> {
    points.iter().map(|x| x.as_slice().to_vec()).collect()
}

pub fn default_knn_k(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

/// Fits the score function described by `spec`. Fitting is deterministic:
/// every method is a closed form or a fixed-length gradient descent from zero.
pub fn fit_score(spec: &ClassifierSpec, ctx: &TrainContext) -> Result<ScoreModel> {
    spec.validate()?;
    let nulls = &ctx.train_nulls;
    if nulls.is_empty() {
        return Err(Error::DegenerateFit("empty training null set".into()));
    }
    let dim = nulls[0].dim();
    let fitted = match spec.method {
        Method::Gaussian => Fitted::Gaussian(fit_gaussian(nulls)?),
        Method::Kde => Fitted::Kde(ProductKde::fit(raw(nulls), spec.bandwidth())),
        Method::Knn if spec.family == Family::Occ => {
            let k = spec
                .hyperparams
                .k
                .unwrap_or_else(|| default_knn_k(nulls.len()));
            Fitted::Knn {
                points: raw(nulls),
                k: k.min(nulls.len()),
            }
        }
        Method::Knn => {
            let outliers = &ctx.labeled_outliers;
            if outliers.is_empty() {
                return Err(Error::MissingOutliers);
            }
            let n = nulls.len() + outliers.len();
            let k = spec
                .hyperparams
                .k
                .unwrap_or_else(|| default_knn_k(n))
                .min(n);
            let points = nulls
                .iter()
                .map(|x| (x.as_slice().to_vec(), false))
                .chain(outliers.iter().map(|x| (x.as_slice().to_vec(), true)))
                .collect();
            Fitted::KnnClassifier { points, k }
        }
        Method::Logistic => {
            if ctx.labeled_outliers.is_empty() {
                return Err(Error::MissingOutliers);
            }
            // outliers are the positive class
            Fitted::Logistic(fit_logistic(
                &ctx.labeled_outliers,
                nulls,
                spec.iterations(),
                spec.step(),
            ))
        }
        Method::KdeRatio => {
            if ctx.transductive_pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            Fitted::KdeRatio {
                null: ProductKde::fit(raw(nulls), spec.bandwidth()),
                mixture: ProductKde::fit(raw(&ctx.transductive_pool), spec.bandwidth()),
            }
        }
        Method::PuLogistic => {
            if ctx.transductive_pool.is_empty() {
                return Err(Error::EmptyPool);
            }
            // labeled nulls are the positive class, the pool is unlabeled
            Fitted::PuLogistic(fit_logistic(
                nulls,
                &ctx.transductive_pool,
                spec.iterations(),
                spec.step(),
            ))
        }
    };
    Ok(ScoreModel {
        family: spec.family,
        method: spec.method,
        dim,
        fitted,
    })
}

fn fit_gaussian(points: &[FeatureVector]) -> Result<GaussianFit> {
    let n = points.len();
    let p = points[0].dim();
    let mut mean = vec![0.0; p];
    for x in points {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; p * p];
    for x in points {
        for a in 0..p {
            let da = x[a] - mean[a];
            for b in 0..=a {
                cov[a * p + b] += da * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            cov[a * p + b] /= denom;
            cov[b * p + a] = cov[a * p + b];
        }
    }
    let trace: f64 = (0..p).map(|a| cov[a * p + a]).sum();
    let mut ridge = 1e-6 * trace / p as f64;
    for _ in 0..4 {
        let mut reg = cov.clone();
        (0..p).for_each(|a| reg[a * p + a] += ridge);
        if let Some(chol) = cholesky(&reg, p) {
            let log_det: f64 = 2.0 * (0..p).map(|a| chol[a * p + a].ln()).sum::<f64>();
            let log_norm = 0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            return Ok(GaussianFit {
                mean,
                chol,
                log_norm,
                ridge,
            });
        }
        ridge *= 10.0;
    }
    Err(Error::DegenerateFit(format!(
        "covariance is singular after regularization (ridge {ridge:e})"
    )))
}

fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * p + k] * l[j * p + k]).sum();
            if i == j {
                let d = a[i * p + i] - s;
                if !d.is_finite() || d <= 0.0 {
                    return None;
                }
                l[i * p + i] = d.sqrt();
            } else {
                l[i * p + j] = (a[i * p + j] - s) / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn gaussian_log_density(g: &GaussianFit, x: &[f64]) -> f64 {
    let p = g.mean.len();
    // forward substitution L z = x - mean
    let mut z = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| g.chol[i * p + k] * z[k]).sum();
        z[i] = (x[i] - g.mean[i] - s) / g.chol[i * p + i];
    }
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - g.log_norm
}

/// Full-batch gradient descent on the mean logistic loss, starting from zero.
fn fit_logistic(
    positive: &[FeatureVector],
    negative: &[FeatureVector],
    iterations: usize,
    step: f64,
) -> LogisticFit {
    let p = positive.first().or(negative.first()).map_or(0, |x| x.dim());
    let n = (positive.len() + negative.len()) as f64;
    let samples: Vec<(&[f64], f64)> = positive
        .iter()
        .map(|x| (x.as_slice(), 1.0))
        .chain(negative.iter().map(|x| (x.as_slice(), 0.0)))
        .collect();
    let mut fit = LogisticFit {
        weights: vec![0.0; p],
        bias: 0.0,
    };
    let mut grad = vec![0.0; p];
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_bias = 0.0;
        for (x, y) in &samples {
            let r = fit.probability(x) - y;
            grad_bias += r;
            for (g, v) in grad.iter_mut().zip(x.iter()) {
                *g += r * v;
            }
        }
        fit.bias -= step * grad_bias / n;
        for (w, g) in fit.weights.iter_mut().zip(&grad) {
            *w -= step * g / n;
        }
    }
    fit
}

/// Refits `spec` after swapping `X_j` and `X~_j` for each unit in `swap`, and
/// reports whether the fitted model (and its score at `probe`) is unchanged.
/// OCC and BIC fits ignore the pool, so they are trivially invariant.
pub fn verify_swap_invariance(
    spec: &ClassifierSpec,
    data: &InferenceData,
    swap: &[usize],
    probe: &[f64],
) -> bool {
    let original = fit_score(spec, &TrainContext::from_data(data));
    let swapped = fit_score(spec, &TrainContext::from_data(&data.swap_pairs(swap)));
    match (original, swapped) {
        (Ok(a), Ok(b)) => {
            let (sa, sb) = match (a.score(probe), b.score(probe)) {
                (Ok(sa), Ok(sb)) => (sa, sb),
                _ => return false,
            };
            let scores_match = match spec.method {
                Method::Logistic | Method::PuLogistic => {
                    (sa - sb).abs() <= 1e-12 * sa.abs().max(sb.abs())
                }
                _ => sa.to_bits() == sb.to_bits(),
            };
            a == b && scores_match
        }
        (Err(_), Err(_)) => true,
        _ => false,
    }
}
