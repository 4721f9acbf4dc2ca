//! Two-stage calibration.
//!
//! Stage one turns raw scores into conformal p-values against a calibration
//! set. Stage two divides each test/mirror p-value pair by a unit weight and
//! calibrates the weighted pairs `(V_j, Ṽ_j)` with the mirror process
//!
//! ```text
//! H(t) = (1 + #{j : Ṽ_j ≤ t, Ṽ_j < V_j}) / max(1, #{j : V_j ≤ t, V_j < Ṽ_j})
//! ```
//!
//! from which both the q-values and the equivalent data-driven threshold
//! `τ = max{t ∈ V ∪ Ṽ : H(t) ≤ α}` follow. Comparisons are exact on `f64`;
//! pairs with `V_j = Ṽ_j` count on neither side and always get `q_j = 1`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::keyed_uniform;

/// Conformal p-value `(1 + #{cal ≤ s}) / (1 + N)`, kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConformalP {
    numerator: usize,
    n_cal: usize,
}

impl ConformalP {
    pub fn new(numerator: usize, n_cal: usize) -> Self {
        assert!(
            (1..=n_cal + 1).contains(&numerator),
            "numerator {numerator} outside 1..={}",
            n_cal + 1
        );
        Self { numerator, n_cal }
    }

    pub fn numerator(&self) -> usize {
        self.numerator
    }

    pub fn n_cal(&self) -> usize {
        self.n_cal
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / (self.n_cal + 1) as f64
    }
}

impl PartialOrd for ConformalP {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ConformalP {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = self.numerator as u128 * (other.n_cal + 1) as u128;
        let b = other.numerator as u128 * (self.n_cal + 1) as u128;
        a.cmp(&b)
    }
}

pub fn conformal_pvalue(cal_scores: &[f64], s_x: f64) -> ConformalP {
    let count = cal_scores.iter().filter(|&&c| c <= s_x).count();
    ConformalP::new(1 + count, cal_scores.len())
}

/// Calibration scores sorted once for `O(log N)` p-value lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    sorted: Vec<f64>,
}

impl Calibration {
    pub fn new(mut scores: Vec<f64>) -> Self {
        scores.sort_by(f64::total_cmp);
        Self { sorted: scores }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn pvalue(&self, s_x: f64) -> ConformalP {
        let count = self.sorted.partition_point(|&c| c <= s_x);
        ConformalP::new(1 + count, self.sorted.len())
    }
}

/// Breaks ties between p-values by adding `u / (M (N + 1))`, `M = 10^6`,
/// with `u` uniform and keyed by `(seed, j)`. The shift is smaller than the
/// p-value grid spacing, so distinct p-values keep their order.
pub fn jitter_pvalues(p: &[ConformalP], seed: u64) -> Vec<f64> {
    const M: f64 = 1e6;
    p.iter()
        .enumerate()
        .map(|(j, pv)| pv.value() + keyed_uniform(seed, j as u64) / (M * (pv.n_cal + 1) as f64))
        .collect()
}

/// Weighted conformity scores of one test unit: `V = p / w`, `Ṽ = p~ / w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub v: f64,
    pub v_tilde: f64,
    pub index: usize,
}

impl ScorePair {
    pub fn new(v: f64, v_tilde: f64, index: usize) -> Self {
        Self { v, v_tilde, index }
    }

    pub fn is_forward(&self) -> bool {
        self.v < self.v_tilde
    }

    pub fn is_reversed(&self) -> bool {
        self.v_tilde < self.v
    }

    pub fn is_tied(&self) -> bool {
        self.v == self.v_tilde
    }
}

pub fn build_pairs(p: &[ConformalP], p_tilde: &[ConformalP], w: &[f64]) -> Result<Vec<ScorePair>> {
    let p: Vec<f64> = p.iter().map(ConformalP::value).collect();
    let p_tilde: Vec<f64> = p_tilde.iter().map(ConformalP::value).collect();
    build_pairs_from_values(&p, &p_tilde, w)
}

pub fn build_pairs_from_values(p: &[f64], p_tilde: &[f64], w: &[f64]) -> Result<Vec<ScorePair>> {
    if p.len() != p_tilde.len() || p.len() != w.len() {
        return Err(Error::SchemaMismatch(format!(
            "pair inputs have lengths {}, {}, {}",
            p.len(),
            p_tilde.len(),
            w.len()
        )));
    }
    p.iter()
        .zip(p_tilde)
        .zip(w)
        .enumerate()
        .map(|(j, ((&a, &b), &wj))| {
            if !(wj > 0.0 && wj.is_finite()) {
                return Err(Error::NonPositiveWeight {
                    index: j,
                    value: wj,
                });
            }
            Ok(ScorePair::new(a / wj, b / wj, j))
        })
        .collect()
}

pub fn num_tied_pairs(pairs: &[ScorePair]) -> usize {
    pairs.iter().filter(|p| p.is_tied()).count()
}

/// Evaluates `H(t)` directly.
pub fn mirror_stat(pairs: &[ScorePair], t: f64) -> f64 {
    let mirror = pairs
        .iter()
        .filter(|p| p.v_tilde <= t && p.is_reversed())
        .count();
    let test = pairs.iter().filter(|p| p.v <= t && p.is_forward()).count();
    (1 + mirror) as f64 / test.max(1) as f64
}

/// `H` on the sorted distinct grid `V ∪ Ṽ`, computed by one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorCurve {
    pub grid: Vec<f64>,
    pub h: Vec<f64>,
}

impl MirrorCurve {
    pub fn new(pairs: &[ScorePair]) -> Self {
        // (value, +1 to the test count, +1 to the mirror count)
        let mut events: Vec<(f64, bool, bool)> = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            events.push((p.v, p.is_forward(), false));
            events.push((p.v_tilde, false, p.is_reversed()));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut grid = Vec::new();
        let mut h = Vec::new();
        let (mut test, mut mirror) = (0usize, 0usize);
        let mut i = 0;
        while i < events.len() {
            let t = events[i].0;
            while i < events.len() && events[i].0 == t {
                test += events[i].1 as usize;
                mirror += events[i].2 as usize;
                i += 1;
            }
            grid.push(t);
            h.push((1 + mirror) as f64 / test.max(1) as f64);
        }
        Self { grid, h }
    }

    /// Index of the first grid point `≥ t`.
    fn position(&self, t: f64) -> usize {
        self.grid.partition_point(|&g| g < t)
    }
}

/// Conformal q-values, one per pair, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QValueVector(pub Vec<f64>);

impl QValueVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `q_j = min_{t ∈ V ∪ Ṽ, t ≥ V_j} H(t)` (capped at 1) when `V_j < Ṽ_j`,
/// otherwise 1. Runs in `O(m log m)` via suffix minima over the sorted grid.
pub fn scq_qvalues(pairs: &[ScorePair]) -> QValueVector {
    let curve = MirrorCurve::new(pairs);
    let mut suffix_min = curve.h.clone();
    for i in (0..suffix_min.len().saturating_sub(1)).rev() {
        suffix_min[i] = suffix_min[i].min(suffix_min[i + 1]);
    }
    let q = pairs
        .iter()
        .map(|p| {
            if p.is_forward() {
                suffix_min[curve.position(p.v)].min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    QValueVector(q)
}

/// Rejected units (positions in the input) with an optional threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionSet {
    pub indices: Vec<usize>,
    pub threshold: Option<f64>,
    pub alpha: f64,
}

impl RejectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

pub fn scq_reject(q: &QValueVector, alpha: f64) -> RejectionSet {
    RejectionSet {
        indices: (0..q.len()).filter(|&j| q.0[j] <= alpha).collect(),
        threshold: None,
        alpha,
    }
}

/// Data-driven threshold `τ` (absent when no grid point has `H ≤ α`) and the
/// rejection set `{j : V_j ≤ τ, V_j < Ṽ_j}`.
pub fn bc_threshold(pairs: &[ScorePair], alpha: f64) -> RejectionSet {
    let curve = MirrorCurve::new(pairs);
    let tau = curve
        .grid
        .iter()
        .zip(&curve.h)
        .rev()
        .find(|(_, &h)| h <= alpha)
        .map(|(&t, _)| t);
    let indices = match tau {
        Some(tau) => (0..pairs.len())
            .filter(|&j| pairs[j].v <= tau && pairs[j].is_forward())
            .collect(),
        None => Vec::new(),
    };
    RejectionSet {
        indices,
        threshold: tau,
        alpha,
    }
}

/// A nonnegative e-value held as the exact fraction `numerator / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EValue {
    pub numerator: u64,
    pub denominator: u64,
}

impl EValue {
    pub const ZERO: EValue = EValue {
        numerator: 0,
        denominator: 1,
    };

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    fn cmp_value(&self, other: &Self) -> Ordering {
        let a = self.numerator as u128 * other.denominator as u128;
        let b = other.numerator as u128 * self.denominator as u128;
        a.cmp(&b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EValueVector(pub Vec<EValue>);

impl EValueVector {
    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(EValue::value).collect()
    }
}

/// `e_j = m · 1{V_j ≤ τ, V_j < Ṽ_j} / (1 + #{i : Ṽ_i ≤ τ, Ṽ_i < V_i})`,
/// all zero when `τ` is absent.
pub fn evalues(pairs: &[ScorePair], alpha: f64) -> EValueVector {
    let bc = bc_threshold(pairs, alpha);
    let m = pairs.len() as u64;
    let Some(tau) = bc.threshold else {
        return EValueVector(vec![EValue::ZERO; pairs.len()]);
    };
    let mirror = pairs
        .iter()
        .filter(|p| p.v_tilde <= tau && p.is_reversed())
        .count() as u64;
    let e = pairs
        .iter()
        .map(|p| {
            if p.v <= tau && p.is_forward() {
                EValue {
                    numerator: m,
                    denominator: 1 + mirror,
                }
            } else {
                EValue::ZERO
            }
        })
        .collect();
    EValueVector(e)
}

/// e-BH: reject the `k*` largest e-values, `k* = max{k : e_(k) ≥ m / (α k)}`.
pub fn ebh(e: &EValueVector, alpha: f64) -> RejectionSet {
    let m = e.0.len() as u64;
    let mut order: Vec<usize> = (0..e.0.len()).collect();
    order.sort_by(|&a, &b| e.0[b].cmp_value(&e.0[a]).then(a.cmp(&b)));
    let passes = |k: usize| {
        let ev = e.0[order[k - 1]];
        // e ≥ m/(αk)  ⟺  m·den / (num·k) ≤ α
        ev.numerator > 0
            && (m as u128 * ev.denominator as u128) as f64
                / (ev.numerator as u128 * k as u128) as f64
                <= alpha
    };
    let k_star = (1..=e.0.len()).rev().find(|&k| passes(k)).unwrap_or(0);
    let mut indices: Vec<usize> = order[..k_star].to_vec();
    indices.sort_unstable();
    RejectionSet {
        indices,
        threshold: None,
        alpha,
    }
}

/// Benjamini–Hochberg step-up.
pub fn bh(pvals: &[f64], alpha: f64) -> RejectionSet {
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let k_star = (1..=m)
        .rev()
        .find(|&k| pvals[order[k - 1]] <= k as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut indices: Vec<usize> = order[..k_star].to_vec();
    indices.sort_unstable();
    RejectionSet {
        indices,
        threshold: (k_star > 0).then(|| pvals[order[k_star - 1]]),
        alpha,
    }
}

pub const DEFAULT_STOREY_LAMBDA: f64 = 0.5;

/// Storey null-proportion estimate `(1 + #{p > λ}) / (m (1 − λ))`, capped at 1.
pub fn storey_pi0(pvals: &[f64], lambda: f64) -> f64 {
    let m = pvals.len() as f64;
    let above = pvals.iter().filter(|&&p| p > lambda).count() as f64;
    ((1.0 + above) / (m * (1.0 - lambda))).min(1.0)
}

/// BH at level `α / π̂₀`.
pub fn storey_bh(pvals: &[f64], alpha: f64, lambda: f64) -> RejectionSet {
    let pi0 = storey_pi0(pvals, lambda);
    let mut r = bh(pvals, alpha / pi0);
    r.alpha = alpha;
    r
}

/// Output document of a single inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub alpha: f64,
    pub tau: Option<f64>,
    pub rejected: Vec<usize>,
    pub qvalues: Vec<f64>,
    pub num_tied_pairs: usize,
}

impl RejectionReport {
    pub fn from_pairs(pairs: &[ScorePair], alpha: f64) -> Self {
        let q = scq_qvalues(pairs);
        let bc = bc_threshold(pairs, alpha);
        Self {
            alpha,
            tau: bc.threshold,
            rejected: scq_reject(&q, alpha).indices,
            qvalues: q.0,
            num_tied_pairs: num_tied_pairs(pairs),
        }
    }
}
