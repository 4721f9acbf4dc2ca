//! Seeded replication harness: paired synthetic datasets, method runs, and
//! FDR / power summaries with Monte Carlo standard errors.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::RejectionSet;
use crate::datamodel::{
    generate_hierarchical, InferenceData, SyntheticConfig, DEFAULT_TRAIN_FRACTION,
};
use crate::error::{Error, Result};
use crate::modelselect::{ptams, ptams_plus, SelectionOptions, Toolbox, DEFAULT_LAMBDA_GRID};
use crate::pipeline::{
    check_level, oracle_scheme, run_cfbh, run_scq, ScqOptions, StructureWeighting, WeightScheme,
};
use crate::scoring::ClassifierSpec;
use crate::seeding::derive_seed;

/// Largest tolerated share of failed replications per method.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Weighting used by a method; oracle weights come from the true sparsity
/// levels of the synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WeightMode {
    Structure(StructureWeighting),
    Oracle,
    Unit,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Structure(StructureWeighting::default())
    }
}

/// A toolbox member with an optional display name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolboxEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub spec: ClassifierSpec,
}

impl From<ClassifierSpec> for ToolboxEntry {
    fn from(spec: ClassifierSpec) -> Self {
        Self { name: None, spec }
    }
}

pub fn build_toolbox(entries: &[ToolboxEntry]) -> Result<Toolbox> {
    let names = entries
        .iter()
        .map(|e| e.name.clone().unwrap_or_else(|| e.spec.label()))
        .collect();
    Toolbox::with_names(entries.iter().map(|e| e.spec.clone()).collect(), names)
}

fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline")]
pub enum Pipeline {
    #[serde(rename = "scq")]
    Scq {
        classifier: ClassifierSpec,
        #[serde(default)]
        weights: WeightMode,
    },
    #[serde(rename = "bc-unweighted")]
    BcUnweighted { classifier: ClassifierSpec },
    #[serde(rename = "cfbh")]
    Cfbh {
        classifier: ClassifierSpec,
        #[serde(default)]
        storey: bool,
    },
    #[serde(rename = "ptams")]
    Ptams {
        toolbox: Vec<ToolboxEntry>,
        #[serde(default)]
        weights: WeightMode,
    },
    #[serde(rename = "ptams_plus")]
    PtamsPlus {
        toolbox: Vec<ToolboxEntry>,
        #[serde(default = "default_grid")]
        grid: Vec<f64>,
        #[serde(default)]
        structure: StructureWeighting,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub pipeline: Pipeline,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, pipeline: Pipeline) -> Self {
        Self {
            name: name.into(),
            pipeline,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.pipeline {
            Pipeline::Scq { classifier, .. }
            | Pipeline::BcUnweighted { classifier }
            | Pipeline::Cfbh { classifier, .. } => classifier.validate(),
            Pipeline::Ptams { toolbox, .. } => build_toolbox(toolbox).map(drop),
            Pipeline::PtamsPlus { toolbox, grid, .. } => {
                build_toolbox(toolbox)?;
                if grid.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "method `{}` has an empty grid",
                        self.name
                    )));
                }
                grid.iter().try_for_each(|&l| check_level("lambda", l))
            }
        }
    }
}

/// Level and tuning shared by every method in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub alpha: f64,
    pub alpha0: Option<f64>,
    pub train_fraction: f64,
    /// Break p-value ties with keyed jitter.
    pub jitter: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            alpha0: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            jitter: false,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        check_level("alpha", self.alpha)?;
        if let Some(a0) = self.alpha0 {
            check_level("alpha0", a0)?;
        }
        check_level("train_fraction", self.train_fraction)
    }
}

/// False discovery proportion `#false / max(1, |R|)`.
pub fn fdp(rejection: &RejectionSet, truth: &[bool]) -> f64 {
    let false_hits = rejection.indices.iter().filter(|&&j| !truth[j]).count();
    false_hits as f64 / rejection.len().max(1) as f64
}

pub fn true_positives(rejection: &RejectionSet, truth: &[bool]) -> usize {
    rejection.indices.iter().filter(|&&j| truth[j]).count()
}

/// Share of true outliers detected, `|R ∩ H1| / max(1, |H1|)`.
pub fn power(rejection: &RejectionSet, truth: &[bool]) -> f64 {
    let signals = truth.iter().filter(|&&t| t).count();
    true_positives(rejection, truth) as f64 / signals.max(1) as f64
}

/// Metrics of one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub fdp: f64,
    pub power: f64,
    pub tp: usize,
    pub rejections: usize,
    pub selected: Option<usize>,
    pub lambda_star: Option<f64>,
}

/// Per-replication seeds: data generation, coins, jitter.
fn rep_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

pub fn replication_data(
    cfg: &SyntheticConfig,
    settings: &RunSettings,
    seed: u64,
) -> Result<InferenceData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let (pool, test) = generate_hierarchical(cfg, &mut rng)?;
    InferenceData::from_pool(&pool, test, settings.train_fraction, &mut rng)
}

/// Runs one method on one dataset carrying ground truth.
pub fn run_method(
    method: &MethodSpec,
    data: &InferenceData,
    pi: &[f64],
    settings: &RunSettings,
    seed: u64,
) -> Result<RepOutcome> {
    let truth = data
        .test
        .truth()
        .ok_or_else(|| Error::InvalidConfig("benchmark data needs truth labels".into()))?;
    let jitter_seed = settings.jitter.then(|| derive_seed(seed, 2));
    let scq_opts = ScqOptions {
        alpha: settings.alpha,
        jitter_seed,
    };
    let sel_opts = SelectionOptions {
        alpha: settings.alpha,
        alpha0: settings.alpha0,
        coins: crate::modelselect::CoinStream::new(derive_seed(seed, 1)),
        jitter_seed,
    };
    let scheme = |mode: &WeightMode| match mode {
        WeightMode::Structure(s) => Ok(WeightScheme::Structure(s.clone())),
        WeightMode::Unit => Ok(WeightScheme::Unit),
        WeightMode::Oracle => oracle_scheme(pi),
    };
    let (rejection, selected, lambda_star) = match &method.pipeline {
        Pipeline::Scq {
            classifier,
            weights,
        } => (
            run_scq(classifier, data, &scheme(weights)?, &scq_opts)?.rejection,
            None,
            None,
        ),
        Pipeline::BcUnweighted { classifier } => (
            run_scq(classifier, data, &WeightScheme::Unit, &scq_opts)?.rejection,
            None,
            None,
        ),
        Pipeline::Cfbh { classifier, storey } => (
            run_cfbh(classifier, data, settings.alpha, *storey)?,
            None,
            None,
        ),
        Pipeline::Ptams { toolbox, weights } => {
            let sel = ptams(&build_toolbox(toolbox)?, data, &scheme(weights)?, &sel_opts)?;
            (sel.outcome.rejection, Some(sel.trace.selected), None)
        }
        Pipeline::PtamsPlus {
            toolbox,
            grid,
            structure,
        } => {
            let sel = ptams_plus(&build_toolbox(toolbox)?, data, structure, grid, &sel_opts)?;
            (
                sel.outcome.rejection,
                Some(sel.trace.selected),
                sel.trace.lambda_star,
            )
        }
    };
    Ok(RepOutcome {
        fdp: fdp(&rejection, truth),
        power: power(&rejection, truth),
        tp: true_positives(&rejection, truth),
        rejections: rejection.len(),
        selected,
        lambda_star,
    })
}

/// Raw per-replication outcomes of a paired comparison.
#[derive(Debug, Clone)]
pub struct Replications {
    pub methods: Vec<String>,
    /// `outcomes[r][k]` is method `k` on replication `r`; errors are kept as text.
    pub outcomes: Vec<Vec<std::result::Result<RepOutcome, String>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Fdr,
    Ap,
    Etp,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Fdr, Metric::Ap, Metric::Etp];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fdr => "fdr",
            Metric::Ap => "ap",
            Metric::Etp => "etp",
        }
    }

    fn of(self, o: &RepOutcome) -> f64 {
        match self {
            Metric::Fdr => o.fdp,
            Metric::Ap => o.power,
            Metric::Etp => o.tp as f64,
        }
    }
}

/// Mean and standard error `sd / sqrt(n)` with the `n - 1` variance; the
/// error is zero for a single value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

impl Replications {
    pub fn reps(&self) -> usize {
        self.outcomes.len()
    }

    pub fn successes(&self, k: usize) -> impl Iterator<Item = &RepOutcome> {
        self.outcomes
            .iter()
            .filter_map(move |row| row[k].as_ref().ok())
    }

    pub fn failures(&self, k: usize) -> usize {
        self.outcomes.iter().filter(|row| row[k].is_err()).count()
    }

    fn check_failures(&self) -> Result<()> {
        for k in 0..self.methods.len() {
            let failed = self.failures(k);
            if failed as f64 > MAX_FAILURE_RATE * self.reps() as f64 {
                let first = self
                    .outcomes
                    .iter()
                    .find_map(|row| row[k].as_ref().err().cloned())
                    .unwrap_or_default();
                return Err(Error::TooManyFailures {
                    failed,
                    reps: self.reps(),
                    first: format!("{}: {first}", self.methods[k]),
                });
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Vec<MetricsRow>> {
        self.check_failures()?;
        Ok((0..self.methods.len())
            .map(|k| {
                let col =
                    |m: Metric| mean_se(&self.successes(k).map(|o| m.of(o)).collect::<Vec<_>>());
                let (fdr, fdr_se) = col(Metric::Fdr);
                let (ap, ap_se) = col(Metric::Ap);
                let (etp, etp_se) = col(Metric::Etp);
                MetricsRow {
                    method: self.methods[k].clone(),
                    fdr,
                    fdr_se,
                    ap,
                    ap_se,
                    etp,
                    etp_se,
                    reps: self.successes(k).count(),
                }
            })
            .collect())
    }

    /// Mean and standard error of the per-replication difference `a - b`,
    /// over replications where both methods succeeded.
    pub fn paired_difference(&self, a: usize, b: usize, metric: Metric) -> (f64, f64) {
        let diffs: Vec<f64> = self
            .outcomes
            .iter()
            .filter_map(|row| match (&row[a], &row[b]) {
                (Ok(x), Ok(y)) => Some(metric.of(x) - metric.of(y)),
                _ => None,
            })
            .collect();
        mean_se(&diffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub fdr: f64,
    pub fdr_se: f64,
    pub ap: f64,
    pub ap_se: f64,
    pub etp: f64,
    pub etp_se: f64,
    pub reps: usize,
}

/// Runs every method on the same `reps` datasets. Replications run in
/// parallel; results are collected in replication order.
pub fn replicate(
    methods: &[MethodSpec],
    cfg: &SyntheticConfig,
    reps: usize,
    master_seed: u64,
    settings: &RunSettings,
) -> Result<Replications> {
    if reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods given".into()));
    }
    settings.validate()?;
    cfg.validate()?;
    for m in methods {
        m.validate()?;
    }
    let pi = cfg.pi_vector();
    let outcomes = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = rep_seed(master_seed, r);
            match replication_data(cfg, settings, seed) {
                Ok(data) => methods
                    .iter()
                    .map(|m| run_method(m, &data, &pi, settings, seed).map_err(|e| e.to_string()))
                    .collect(),
                Err(e) => vec![Err(e.to_string()); methods.len()],
            }
        })
        .collect();
    Ok(Replications {
        methods: methods.iter().map(|m| m.name.clone()).collect(),
        outcomes,
    })
}

pub fn compare(
    methods: &[MethodSpec],
    cfg: &SyntheticConfig,
    reps: usize,
    master_seed: u64,
    settings: &RunSettings,
) -> Result<Vec<MetricsRow>> {
    replicate(methods, cfg, reps, master_seed, settings)?.metrics()
}

pub fn run_replications(
    method: &MethodSpec,
    cfg: &SyntheticConfig,
    reps: usize,
    master_seed: u64,
    settings: &RunSettings,
) -> Result<MetricsRow> {
    let mut rows = compare(
        std::slice::from_ref(method),
        cfg,
        reps,
        master_seed,
        settings,
    )?;
    Ok(rows.remove(0))
}

pub const METRICS_HEADER: [&str; 8] = [
    "method", "fdr", "fdr_se", "ap", "ap_se", "etp", "etp_se", "reps",
];
pub const LONG_HEADER: [&str; 5] = ["method", "param_value", "metric", "value", "se"];

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub method: String,
    pub param_value: String,
    pub metric: String,
    pub value: f64,
    pub se: f64,
}

pub fn long_rows(rows: &[MetricsRow], param_value: &str) -> Vec<LongRow> {
    rows.iter()
        .flat_map(|r| {
            [
                ("fdr", r.fdr, r.fdr_se),
                ("ap", r.ap, r.ap_se),
                ("etp", r.etp, r.etp_se),
            ]
            .into_iter()
            .map(move |(metric, value, se)| LongRow {
                method: r.method.clone(),
                param_value: param_value.to_string(),
                metric: metric.to_string(),
                value,
                se,
            })
        })
        .collect()
}

pub fn write_long_csv<W: Write>(writer: W, rows: &[LongRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Scenario description: one of the built-in layouts or a full config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase")]
pub enum Scenario {
    Structured {
        m: usize,
        p: usize,
        mu: f64,
        null_pool_size: usize,
        #[serde(default = "mid_pi")]
        mid_pi: f64,
        #[serde(default = "high_pi")]
        high_pi: f64,
        #[serde(default = "background_pi")]
        background_pi: f64,
    },
    Attainment {
        m: usize,
        null_pool_size: usize,
    },
    Custom(SyntheticConfig),
}

fn mid_pi() -> f64 {
    0.6
}

fn high_pi() -> f64 {
    0.9
}

fn background_pi() -> f64 {
    0.01
}

impl Scenario {
    pub fn config(&self) -> SyntheticConfig {
        match self {
            Scenario::Structured {
                m,
                p,
                mu,
                null_pool_size,
                mid_pi,
                high_pi,
                background_pi,
            } => SyntheticConfig::structured_with_levels(
                *m,
                *p,
                *mu,
                *null_pool_size,
                *mid_pi,
                *high_pi,
                *background_pi,
            ),
            Scenario::Attainment { m, null_pool_size } => {
                SyntheticConfig::attainment(*m, *null_pool_size)
            }
            Scenario::Custom(cfg) => cfg.clone(),
        }
    }
}

/// Varies one scenario field over a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub field: String,
    pub values: Vec<serde_json::Value>,
}

impl Sweep {
    /// The scenario with `field` set to `value`.
    pub fn apply(&self, scenario: &Scenario, value: &serde_json::Value) -> Result<Scenario> {
        let mut json = serde_json::to_value(scenario)?;
        let obj = json
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig("scenario is not an object".into()))?;
        if !obj.contains_key(&self.field) {
            return Err(Error::InvalidConfig(format!(
                "sweep field `{}` is not a scenario field",
                self.field
            )));
        }
        obj.insert(self.field.clone(), value.clone());
        Ok(serde_json::from_value(json)?)
    }
}

/// Printable form of a sweep value, e.g. `3` or `0.5`.
pub fn param_label(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
