//! Pseudo-score guided model selection over a toolbox of classifiers, with an
//! optional second stage that also picks the sparsity screening level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{bh, scq_qvalues, scq_reject, ConformalP, RejectionSet, ScorePair};
use crate::datamodel::InferenceData;
use crate::error::{Error, Result};
use crate::pipeline::{
    check_level, compute_weights, fit_and_pvalues, scq_from_pvalues, weighted_pairs, PValuePairs,
    ScqOptions, ScqOutcome, StructureWeighting, WeightScheme,
};
use crate::scoring::ClassifierSpec;
use crate::seeding::splitmix64;
use crate::weights::DEFAULT_LAMBDA;

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];

/// Ordered candidate classifiers with display names.
#[derive(Debug, Clone, PartialEq)]
pub struct Toolbox {
    candidates: Vec<ClassifierSpec>,
    names: Vec<String>,
}

impl Toolbox {
    pub fn new(candidates: Vec<ClassifierSpec>) -> Result<Self> {
        let names = candidates.iter().map(ClassifierSpec::label).collect();
        Self::with_names(candidates, names)
    }

    pub fn with_names(candidates: Vec<ClassifierSpec>, names: Vec<String>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidConfig(
                "toolbox needs at least one candidate".into(),
            ));
        }
        if names.len() != candidates.len() {
            return Err(Error::InvalidConfig(format!(
                "{} names for {} candidates",
                names.len(),
                candidates.len()
            )));
        }
        for c in &candidates {
            c.validate()?;
        }
        Ok(Self { candidates, names })
    }

    pub fn candidates(&self) -> &[ClassifierSpec] {
        &self.candidates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Fair coins keyed by unit index only, so they cannot depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinStream {
    seed: u64,
}

impl CoinStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bit(&self, j: usize) -> bool {
        splitmix64(splitmix64(self.seed) ^ j as u64) >> 63 == 1
    }
}

/// BH at level `alpha0` on the pairwise minima `min(p_j, p̃_j)`.
pub fn preliminary_partition(
    p: &[ConformalP],
    p_tilde: &[ConformalP],
    alpha0: f64,
) -> RejectionSet {
    let mins: Vec<f64> = p
        .iter()
        .zip(p_tilde)
        .map(|(a, b)| a.min(b).value())
        .collect();
    bh(&mins, alpha0)
}

/// Swap-invariant pseudo pairs. Units in `prelim` are ordered small-first;
/// the rest are ordered by their coin: heads puts the smaller value first,
/// tails puts the larger value first. Each output pair is a permutation of
/// its input pair and does not change when the input pair is swapped.
pub fn pseudo_scores(
    pairs: &[ScorePair],
    prelim: &RejectionSet,
    coins: &CoinStream,
) -> Vec<ScorePair> {
    let mut in_prelim = vec![false; pairs.len()];
    for &j in &prelim.indices {
        in_prelim[j] = true;
    }
    pairs
        .iter()
        .enumerate()
        .map(|(j, pair)| {
            let lo = pair.v.min(pair.v_tilde);
            let hi = pair.v.max(pair.v_tilde);
            if in_prelim[j] || coins.bit(j) {
                ScorePair::new(lo, hi, pair.index)
            } else {
                ScorePair::new(hi, lo, pair.index)
            }
        })
        .collect()
}

/// Number of SCQ rejections on the pseudo pairs.
pub fn pseudo_rejections(pseudo: &[ScorePair], alpha: f64) -> usize {
    scq_reject(&scq_qvalues(pseudo), alpha).len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub alpha: f64,
    /// Preliminary BH level; twice `alpha` (capped below one) when absent.
    pub alpha0: Option<f64>,
    pub coins: CoinStream,
    pub jitter_seed: Option<u64>,
}

impl SelectionOptions {
    pub fn new(alpha: f64, coin_seed: u64) -> Self {
        Self {
            alpha,
            alpha0: None,
            coins: CoinStream::new(coin_seed),
            jitter_seed: None,
        }
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0.unwrap_or((2.0 * self.alpha).min(0.999))
    }

    fn scq(&self) -> ScqOptions {
        ScqOptions {
            alpha: self.alpha,
            jitter_seed: self.jitter_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        check_level("alpha", self.alpha)?;
        check_level("alpha0", self.alpha0())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub name: String,
    /// Pseudo-rejection count; `-1` when the candidate failed to fit.
    pub r_k: i64,
    pub prelim_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub lambda: f64,
    pub r: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub candidates: Vec<CandidateRecord>,
    /// 0-based position of the chosen candidate.
    pub selected: usize,
    pub selected_name: String,
    pub tie_rule_applied: bool,
    pub lambda_star: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lambdas: Vec<LambdaRecord>,
}

/// Result of a selection run: the trace plus the final SCQ on true pairs.
#[derive(Debug, Clone)]
pub struct Selection {
    pub trace: SelectionTrace,
    pub outcome: ScqOutcome,
}

/// First index attaining the maximum, and whether the maximum was shared.
fn argmax_first(values: &[i64]) -> (usize, bool) {
    let best = *values.iter().max().expect("nonempty");
    let idx = values.iter().position(|&v| v == best).expect("present");
    let ties = values.iter().filter(|&&v| v == best).count() > 1;
    (idx, ties)
}

struct Evaluated {
    pv: PValuePairs,
    prelim: RejectionSet,
    r: usize,
}

fn evaluate(
    spec: &ClassifierSpec,
    data: &InferenceData,
    scheme: &WeightScheme,
    opts: &SelectionOptions,
) -> Result<Evaluated> {
    let pv = fit_and_pvalues(spec, data)?;
    let prelim = preliminary_partition(&pv.p, &pv.p_tilde, opts.alpha0());
    let r = pseudo_count(&pv, &prelim, data, scheme, opts)?;
    Ok(Evaluated { pv, prelim, r })
}

fn pseudo_count(
    pv: &PValuePairs,
    prelim: &RejectionSet,
    data: &InferenceData,
    scheme: &WeightScheme,
    opts: &SelectionOptions,
) -> Result<usize> {
    let (weights, _) = compute_weights(scheme, data.test.side_info(), pv)?;
    let pairs = weighted_pairs(pv, &weights, opts.jitter_seed)?;
    let pseudo = pseudo_scores(&pairs, prelim, &opts.coins);
    Ok(pseudo_rejections(&pseudo, opts.alpha))
}

struct Stage {
    trace: SelectionTrace,
    chosen: Evaluated,
}

fn select_candidate(
    toolbox: &Toolbox,
    data: &InferenceData,
    scheme: &WeightScheme,
    opts: &SelectionOptions,
) -> Result<Stage> {
    opts.validate()?;
    let results: Vec<Result<Evaluated>> = toolbox
        .candidates
        .par_iter()
        .map(|spec| evaluate(spec, data, scheme, opts))
        .collect();
    let counts: Vec<i64> = results
        .iter()
        .map(|r| r.as_ref().map_or(-1, |e| e.r as i64))
        .collect();
    if counts.iter().all(|&c| c < 0) {
        return Err(Error::AllCandidatesFailed);
    }
    let candidates = results
        .iter()
        .zip(&toolbox.names)
        .map(|(res, name)| match res {
            Ok(e) => CandidateRecord {
                name: name.clone(),
                r_k: e.r as i64,
                prelim_size: e.prelim.len(),
                error: None,
            },
            Err(err) => CandidateRecord {
                name: name.clone(),
                r_k: -1,
                prelim_size: 0,
                error: Some(err.to_string()),
            },
        })
        .collect();
    let (selected, tie_rule_applied) = argmax_first(&counts);
    let chosen = results
        .into_iter()
        .nth(selected)
        .expect("selected index in range")
        .expect("selected candidate fitted");
    Ok(Stage {
        trace: SelectionTrace {
            candidates,
            selected,
            selected_name: toolbox.names[selected].clone(),
            tie_rule_applied,
            lambda_star: None,
            lambdas: Vec::new(),
        },
        chosen,
    })
}

/// Selects the candidate with the most pseudo-rejections and runs SCQ with it.
pub fn ptams(
    toolbox: &Toolbox,
    data: &InferenceData,
    scheme: &WeightScheme,
    opts: &SelectionOptions,
) -> Result<Selection> {
    let stage = select_candidate(toolbox, data, scheme, opts)?;
    let outcome = scq_from_pvalues(stage.chosen.pv, data.test.side_info(), scheme, &opts.scq())?;
    Ok(Selection {
        trace: stage.trace,
        outcome,
    })
}

/// Two-stage selection: the classifier at the default screening level, then
/// the screening level `λ` for that classifier.
pub fn ptams_plus(
    toolbox: &Toolbox,
    data: &InferenceData,
    structure: &StructureWeighting,
    lambda_grid: &[f64],
    opts: &SelectionOptions,
) -> Result<Selection> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    for &l in lambda_grid {
        check_level("lambda", l)?;
    }
    let stage1 = WeightScheme::Structure(structure.with_lambda(DEFAULT_LAMBDA));
    let Stage { mut trace, chosen } = select_candidate(toolbox, data, &stage1, opts)?;

    let counts = lambda_grid
        .par_iter()
        .map(|&l| {
            let scheme = WeightScheme::Structure(structure.with_lambda(l));
            pseudo_count(&chosen.pv, &chosen.prelim, data, &scheme, opts).map(|r| r as i64)
        })
        .collect::<Result<Vec<_>>>()?;
    // ties go to the smallest grid value, not the first listed
    let best = *counts.iter().max().expect("nonempty grid");
    let lambda_star = lambda_grid
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c == best)
        .map(|(&l, _)| l)
        .fold(f64::INFINITY, f64::min);

    trace.lambda_star = Some(lambda_star);
    trace.lambdas = lambda_grid
        .iter()
        .zip(&counts)
        .map(|(&lambda, &r)| LambdaRecord { lambda, r })
        .collect();
    let scheme = WeightScheme::Structure(structure.with_lambda(lambda_star));
    let outcome = scq_from_pvalues(chosen.pv, data.test.side_info(), &scheme, &opts.scq())?;
    Ok(Selection { trace, outcome })
}
