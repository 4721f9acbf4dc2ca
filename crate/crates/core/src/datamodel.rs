//! Core data types: feature vectors, labeled null pools, the three-way null
//! split, test sets with side information, CSV ingestion, and the synthetic
//! hierarchical benchmark generator.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite point in `R^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                row: 0,
                column: format!("x{}", pos + 1),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

fn common_dim<'a>(vectors: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Option<usize>> {
    let mut dim = None;
    for v in vectors {
        match dim {
            None => dim = Some(v.dim()),
            Some(d) if d != v.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.dim(),
                })
            }
            _ => {}
        }
    }
    Ok(dim)
}

/// Labeled training data: inliers (`Y = 0`) and optional labeled outliers (`Y = 1`).
///
/// The pool only checks that dimensions agree. Whether there are enough
/// inliers for a three-way split is checked by [`split_nulls`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    inliers: Vec<FeatureVector>,
    outliers: Vec<FeatureVector>,
}

impl LabeledPool {
    pub fn new(inliers: Vec<FeatureVector>, outliers: Vec<FeatureVector>) -> Result<Self> {
        common_dim(inliers.iter().chain(outliers.iter()))?;
        Ok(Self { inliers, outliers })
    }

    pub fn inliers(&self) -> &[FeatureVector] {
        &self.inliers
    }

    pub fn outliers(&self) -> &[FeatureVector] {
        &self.outliers
    }

    pub fn dim(&self) -> Option<usize> {
        self.inliers
            .first()
            .or(self.outliers.first())
            .map(|v| v.dim())
    }
}

/// Disjoint partition of the inliers into training, calibration and mirror sets.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSplit {
    pub train: Vec<FeatureVector>,
    pub cal: Vec<FeatureVector>,
    pub mirror: Vec<FeatureVector>,
}

/// Default share of the residual (non-mirror) nulls assigned to training.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

/// Randomly partitions the pool's inliers into `(train, cal, mirror)` with
/// `|mirror| = m`. The remaining `n0 - m` inliers are divided between train
/// and calibration by `train_fraction`, keeping at least one point in each.
pub fn split_nulls<R: Rng + ?Sized>(
    pool: &LabeledPool,
    m: usize,
    train_fraction: f64,
    rng: &mut R,
) -> Result<NullSplit> {
    let n0 = pool.inliers.len();
    if m == 0 || n0 < m + 2 {
        return Err(Error::InsufficientNulls { available: n0, m });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n0).collect();
    order.shuffle(rng);
    let rest = n0 - m;
    let n_train = ((rest as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, rest - 1);

    let pick = |idx: &[usize]| {
        idx.iter()
            .map(|&i| pool.inliers[i].clone())
            .collect::<Vec<_>>()
    };
    Ok(NullSplit {
        mirror: pick(&order[..m]),
        train: pick(&order[m..m + n_train]),
        cal: pick(&order[m + n_train..]),
    })
}

/// External covariate attached to a test unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideInfo {
    Group(i64),
    Position(f64),
}

impl SideInfo {
    pub fn is_group(&self) -> bool {
        matches!(self, SideInfo::Group(_))
    }
}

/// Unlabeled test units with their side information and, in simulations,
/// the ground truth (`true` = outlier).
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    features: Vec<FeatureVector>,
    side_info: Vec<SideInfo>,
    truth: Option<Vec<bool>>,
}

impl TestSet {
    pub fn new(
        features: Vec<FeatureVector>,
        side_info: Vec<SideInfo>,
        truth: Option<Vec<bool>>,
    ) -> Result<Self> {
        if features.len() != side_info.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} test features but {} side-information values",
                features.len(),
                side_info.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != features.len() {
                return Err(Error::SchemaMismatch(format!(
                    "{} test features but {} truth labels",
                    features.len(),
                    t.len()
                )));
            }
        }
        if let Some(first) = side_info.first() {
            if side_info.iter().any(|s| s.is_group() != first.is_group()) {
                return Err(Error::VariantMismatch);
            }
        }
        common_dim(features.iter())?;
        Ok(Self {
            features,
            side_info,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn side_info(&self) -> &[SideInfo] {
        &self.side_info
    }

    pub fn truth(&self) -> Option<&[bool]> {
        self.truth.as_deref()
    }

    /// Replaces the feature rows, keeping side information and truth.
    pub fn with_features(&self, features: Vec<FeatureVector>) -> Result<Self> {
        Self::new(features, self.side_info.clone(), self.truth.clone())
    }
}

/// Everything one inference run consumes: the null split, optional labeled
/// outliers and the test set. `mirror[j]` is paired with test unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceData {
    pub train_nulls: Vec<FeatureVector>,
    pub cal: Vec<FeatureVector>,
    pub mirror: Vec<FeatureVector>,
    pub labeled_outliers: Vec<FeatureVector>,
    pub test: TestSet,
}

impl InferenceData {
    pub fn new(
        split: NullSplit,
        labeled_outliers: Vec<FeatureVector>,
        test: TestSet,
    ) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::NoTestRows);
        }
        if split.mirror.len() != test.len() {
            return Err(Error::SchemaMismatch(format!(
                "mirror set has {} points but the test set has {}",
                split.mirror.len(),
                test.len()
            )));
        }
        if split.train.is_empty() || split.cal.is_empty() {
            return Err(Error::InsufficientNulls {
                available: split.train.len() + split.cal.len() + split.mirror.len(),
                m: test.len(),
            });
        }
        common_dim(
            split
                .train
                .iter()
                .chain(&split.cal)
                .chain(&split.mirror)
                .chain(&labeled_outliers)
                .chain(test.features()),
        )?;
        Ok(Self {
            train_nulls: split.train,
            cal: split.cal,
            mirror: split.mirror,
            labeled_outliers,
            test,
        })
    }

    /// Splits the pool's inliers with a mirror set sized to the test set.
    pub fn from_pool<R: Rng + ?Sized>(
        pool: &LabeledPool,
        test: TestSet,
        train_fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::NoTestRows);
        }
        let split = split_nulls(pool, test.len(), train_fraction, rng)?;
        Self::new(split, pool.outliers().to_vec(), test)
    }

    pub fn m(&self) -> usize {
        self.test.len()
    }

    pub fn dim(&self) -> usize {
        self.train_nulls[0].dim()
    }

    /// Exchanges `X_j` and `X~_j` for every listed unit.
    pub fn swap_pairs(&self, units: &[usize]) -> Self {
        let mut features = self.test.features().to_vec();
        let mut mirror = self.mirror.clone();
        for &j in units {
            std::mem::swap(&mut features[j], &mut mirror[j]);
        }
        Self {
            train_nulls: self.train_nulls.clone(),
            cal: self.cal.clone(),
            mirror,
            labeled_outliers: self.labeled_outliers.clone(),
            test: TestSet {
                features,
                side_info: self.test.side_info.clone(),
                truth: self.test.truth.clone(),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic hierarchical model
// ---------------------------------------------------------------------------

/// Closed index interval `[start, end]` over the 1-based test units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, j: usize) -> bool {
        self.start <= j && j <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityBlock {
    pub interval: Interval,
    pub pi: f64,
}

/// Mean of an alternative component, either a constant vector `c·1` or explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Constant(f64),
    Vector(Vec<f64>),
}

impl MeanSpec {
    fn coord(&self, d: usize) -> f64 {
        match self {
            MeanSpec::Constant(c) => *c,
            MeanSpec::Vector(v) => v[d],
        }
    }
}

/// Gaussian alternative `N(mean, scale^2 I_p)` used for outliers inside `interval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltComponent {
    pub interval: Interval,
    pub mean: MeanSpec,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub m: usize,
    pub p: usize,
    #[serde(default)]
    pub sparsity_blocks: Vec<SparsityBlock>,
    pub background_pi: f64,
    pub alt_components: Vec<AltComponent>,
    pub null_pool_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m == 0 || self.p == 0 {
            return bad("m and p must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background_pi) {
            return bad(format!(
                "background_pi {} outside [0, 1]",
                self.background_pi
            ));
        }
        for b in &self.sparsity_blocks {
            if !(0.0..=1.0).contains(&b.pi) {
                return bad(format!("block pi {} outside [0, 1]", b.pi));
            }
            if b.interval.start < 1 || b.interval.end > self.m || b.interval.is_empty() {
                return bad(format!(
                    "sparsity block [{}, {}] not within [1, {}]",
                    b.interval.start, b.interval.end, self.m
                ));
            }
        }
        for a in &self.alt_components {
            if a.interval.start < 1 || a.interval.end > self.m || a.interval.is_empty() {
                return bad(format!(
                    "alternative interval [{}, {}] not within [1, {}]",
                    a.interval.start, a.interval.end, self.m
                ));
            }
            if !(a.scale > 0.0 && a.scale.is_finite()) {
                return bad(format!("alternative scale {} must be positive", a.scale));
            }
            if let MeanSpec::Vector(v) = &a.mean {
                if v.len() != self.p {
                    return bad(format!(
                        "alternative mean has length {}, expected {}",
                        v.len(),
                        self.p
                    ));
                }
            }
        }
        for j in 1..=self.m {
            if self.pi_at(j) > 0.0 && self.alt_at(j).is_none() {
                return bad(format!(
                    "unit {j} can be an outlier but no alternative covers it"
                ));
            }
        }
        Ok(())
    }

    /// Local outlier probability `π(S_j)` for the 1-based unit `j`; the first
    /// matching block wins.
    pub fn pi_at(&self, j: usize) -> f64 {
        self.sparsity_blocks
            .iter()
            .find(|b| b.interval.contains(j))
            .map_or(self.background_pi, |b| b.pi)
    }

    pub fn pi_vector(&self) -> Vec<f64> {
        (1..=self.m).map(|j| self.pi_at(j)).collect()
    }

    fn alt_at(&self, j: usize) -> Option<&AltComponent> {
        self.alt_components.iter().find(|a| a.interval.contains(j))
    }

    /// The block layout of the reference simulation (`m = 3000`) rescaled to
    /// `m` units: `π = 0.6` on two blocks, `π = 0.9` on two others, background
    /// `0.01`; outliers are `N(μ·1, I)` on the first half and `N(−2·1, 0.5² I)`
    /// on the second.
    pub fn structured(m: usize, p: usize, mu: f64, null_pool_size: usize) -> Self {
        Self::structured_with_levels(m, p, mu, null_pool_size, 0.6, 0.9, 0.01)
    }

    pub fn structured_with_levels(
        m: usize,
        p: usize,
        mu: f64,
        null_pool_size: usize,
        mid_pi: f64,
        high_pi: f64,
        background_pi: f64,
    ) -> Self {
        let scale = |s: usize, e: usize| {
            let start = ((s - 1) as f64 * m as f64 / 3000.0).round() as usize + 1;
            let end = ((e as f64 * m as f64 / 3000.0).round() as usize).max(start);
            Interval::new(start, end.min(m))
        };
        let blocks = [
            (scale(201, 300), mid_pi),
            (scale(601, 700), mid_pi),
            (scale(1000, 1100), high_pi),
            (scale(1400, 1500), high_pi),
        ];
        let half = scale(1, 1500);
        let mut alt_components = vec![AltComponent {
            interval: half,
            mean: MeanSpec::Constant(mu),
            scale: 1.0,
        }];
        if half.end < m {
            alt_components.push(AltComponent {
                interval: Interval::new(half.end + 1, m),
                mean: MeanSpec::Constant(-2.0),
                scale: 0.5,
            });
        }
        Self {
            m,
            p,
            sparsity_blocks: blocks
                .into_iter()
                .map(|(interval, pi)| SparsityBlock { interval, pi })
                .collect(),
            background_pi,
            alt_components,
            null_pool_size,
            seed: 0,
        }
    }

    /// One-dimensional growth scaling used to study FDR attainment:
    /// `μ_m = sqrt(2·1.25·(log m)^1.25)`, `π_m = m^(-0.1)` on two blocks and
    /// `2π_m/3` on two more, each of length `⌈m/30⌉`, background `0.01`.
    pub fn attainment(m: usize, null_pool_size: usize) -> Self {
        let mf = m as f64;
        let mu = (2.0 * 1.25 * mf.ln().powf(1.25)).sqrt();
        let pi_m = mf.powf(-0.1);
        let h = (mf / 30.0).ceil() as usize;
        let block = |k: f64| {
            let start = (k * mf / 30.0).ceil() as usize + 1;
            Interval::new(start, (start + h - 1).min(m))
        };
        let sparsity_blocks = vec![
            SparsityBlock {
                interval: block(2.0),
                pi: pi_m,
            },
            SparsityBlock {
                interval: block(6.0),
                pi: pi_m,
            },
            SparsityBlock {
                interval: block(10.0),
                pi: 2.0 * pi_m / 3.0,
            },
            SparsityBlock {
                interval: block(14.0),
                pi: 2.0 * pi_m / 3.0,
            },
        ];
        Self {
            m,
            p: 1,
            sparsity_blocks,
            background_pi: 0.01,
            alt_components: vec![AltComponent {
                interval: Interval::new(1, m),
                mean: MeanSpec::Constant(mu),
                scale: 1.0,
            }],
            null_pool_size,
            seed: 0,
        }
    }
}

fn gaussian_vector<R: Rng + ?Sized>(
    rng: &mut R,
    p: usize,
    mean: impl Fn(usize) -> f64,
    scale: f64,
) -> FeatureVector {
    let values = (0..p)
        .map(|d| {
            let z: f64 = StandardNormal.sample(rng);
            mean(d) + scale * z
        })
        .collect();
    FeatureVector(values)
}

/// Draws a null pool and a test set from the hierarchical model. Side
/// information is the unit position `S_j = j`.
pub fn generate_hierarchical<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<(LabeledPool, TestSet)> {
    cfg.validate()?;
    let p = cfg.p;
    let inliers = (0..cfg.null_pool_size)
        .map(|_| gaussian_vector(rng, p, |_| 0.0, 1.0))
        .collect();

    let mut features = Vec::with_capacity(cfg.m);
    let mut truth = Vec::with_capacity(cfg.m);
    for j in 1..=cfg.m {
        let pi = cfg.pi_at(j);
        let is_outlier = Bernoulli::new(pi)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng);
        let x = match (is_outlier, cfg.alt_at(j)) {
            (true, Some(alt)) => gaussian_vector(rng, p, |d| alt.mean.coord(d), alt.scale),
            _ => gaussian_vector(rng, p, |_| 0.0, 1.0),
        };
        features.push(x);
        truth.push(is_outlier);
    }
    let side_info = (1..=cfg.m).map(|j| SideInfo::Position(j as f64)).collect();
    Ok((
        LabeledPool::new(inliers, Vec::new())?,
        TestSet::new(features, side_info, Some(truth))?,
    ))
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

pub const ROLE_COLUMN: &str = "__role__";
pub const LABEL_COLUMN: &str = "__label__";
pub const SIDE_COLUMN: &str = "__side__";

/// Column layout of a CSV dataset. Every column that is not one of the
/// reserved ones is a feature unless `feature_columns` restricts the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub role_column: String,
    pub label_column: String,
    pub side_column: String,
    pub feature_columns: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            role_column: ROLE_COLUMN.to_string(),
            label_column: LABEL_COLUMN.to_string(),
            side_column: SIDE_COLUMN.to_string(),
            feature_columns: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    TrainNull,
    TrainOutlier,
    Test,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<(LabeledPool, TestSet)> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<(LabeledPool, TestSet)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let role_idx = find(&schema.role_column).ok_or_else(|| {
        Error::SchemaMismatch(format!("missing role column `{}`", schema.role_column))
    })?;
    let label_idx = find(&schema.label_column);
    let side_idx = find(&schema.side_column);
    let reserved = [Some(role_idx), label_idx, side_idx];
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(names) => names
            .iter()
            .map(|n| {
                find(n)
                    .ok_or_else(|| Error::SchemaMismatch(format!("missing feature column `{n}`")))
            })
            .collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| !reserved.contains(&Some(*i)))
            .collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::SchemaMismatch("no feature columns".into()));
    }

    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    let mut test_features = Vec::new();
    let mut test_labels: Vec<Option<bool>> = Vec::new();
    let mut test_side_raw: Vec<(usize, Option<String>)> = Vec::new();

    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |col: usize, message: String| Error::Parse {
            row,
            column: headers[col].clone(),
            message,
        };

        let role = match cell(role_idx) {
            "train-null" => Role::TrainNull,
            "train-outlier" => Role::TrainOutlier,
            "test" => Role::Test,
            other => return Err(parse_err(role_idx, format!("unknown role `{other}`"))),
        };
        let label = match label_idx.map(cell) {
            None | Some("") => None,
            Some("0") => Some(false),
            Some("1") => Some(true),
            Some(other) => {
                return Err(parse_err(
                    label_idx.unwrap(),
                    format!("label must be 0, 1 or empty, got `{other}`"),
                ))
            }
        };

        let mut values = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let v: f64 = cell(i)
                .parse()
                .map_err(|_| parse_err(i, format!("`{}` is not a number", cell(i))))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature {
                    row,
                    column: headers[i].clone(),
                });
            }
            values.push(v);
        }
        let x = FeatureVector(values);

        match role {
            Role::TrainNull => {
                if label == Some(true) {
                    return Err(parse_err(
                        label_idx.unwrap(),
                        "train-null row labeled as outlier".into(),
                    ));
                }
                inliers.push(x);
            }
            Role::TrainOutlier => {
                if label == Some(false) {
                    return Err(parse_err(
                        label_idx.unwrap(),
                        "train-outlier row labeled as inlier".into(),
                    ));
                }
                outliers.push(x);
            }
            Role::Test => {
                test_features.push(x);
                test_labels.push(label);
                let side = side_idx
                    .map(cell)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string);
                test_side_raw.push((row, side));
            }
        }
    }

    let side_info = parse_side_info(&test_side_raw, side_idx.map(|i| headers[i].as_str()))?;
    let truth = if !test_labels.is_empty() && test_labels.iter().all(Option::is_some) {
        Some(test_labels.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    Ok((
        LabeledPool::new(inliers, outliers)?,
        TestSet::new(test_features, side_info, truth)?,
    ))
}

/// Integer side values become groups; anything else is positional. Without a
/// side column the test-row order is used as position.
fn parse_side_info(raw: &[(usize, Option<String>)], column: Option<&str>) -> Result<Vec<SideInfo>> {
    let Some(column) = column else {
        return Ok((1..=raw.len())
            .map(|j| SideInfo::Position(j as f64))
            .collect());
    };
    let values = raw
        .iter()
        .map(|(row, v)| {
            v.as_deref().ok_or_else(|| Error::Parse {
                row: *row,
                column: column.to_string(),
                message: "test row has no side information".into(),
            })
        })
        .collect::<Result<Vec<&str>>>()?;
    if values.iter().all(|v| v.parse::<i64>().is_ok()) {
        return Ok(values
            .iter()
            .map(|v| SideInfo::Group(v.parse().unwrap()))
            .collect());
    }
    raw.iter()
        .zip(&values)
        .map(|((row, _), v)| match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(SideInfo::Position(x)),
            _ => Err(Error::Parse {
                row: *row,
                column: column.to_string(),
                message: format!("`{v}` is not a valid side value"),
            }),
        })
        .collect()
}

pub fn save_csv(path: impl AsRef<Path>, pool: &LabeledPool, test: &TestSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(file, pool, test)
}

/// Writes the data model in the reserved-column layout with features named
/// `x1..xp`. Positions are written with a decimal point so they are read
/// back as positions rather than groups.
pub fn write_csv<W: Write>(writer: W, pool: &LabeledPool, test: &TestSet) -> Result<()> {
    let p = pool
        .dim()
        .or_else(|| test.features().first().map(|x| x.dim()))
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=p).map(|d| format!("x{d}")).collect();
    header.extend([ROLE_COLUMN, LABEL_COLUMN, SIDE_COLUMN].map(String::from));
    w.write_record(&header)?;

    let row = |x: &FeatureVector, role: &str, label: &str, side: String| {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.extend([role.to_string(), label.to_string(), side]);
        rec
    };
    for x in pool.inliers() {
        w.write_record(row(x, "train-null", "0", String::new()))?;
    }
    for x in pool.outliers() {
        w.write_record(row(x, "train-outlier", "1", String::new()))?;
    }
    for (j, x) in test.features().iter().enumerate() {
        let label = match test.truth() {
            Some(t) => {
                if t[j] {
                    "1"
                } else {
                    "0"
                }
            }
            None => "",
        };
        let side = match test.side_info()[j] {
            SideInfo::Group(g) => g.to_string(),
            SideInfo::Position(s) => format!("{s:?}"),
        };
        w.write_record(row(x, "test", label, side))?;
    }
    w.flush()?;
    Ok(())
}

/// Number of distinct groups in grouped side information.
pub fn distinct_groups(side: &[SideInfo]) -> usize {
    side.iter()
        .filter_map(|s| match s {
            SideInfo::Group(g) => Some(*g),
            SideInfo::Position(_) => None,
        })
        .collect::<BTreeSet<_>>()
        .len()
}
