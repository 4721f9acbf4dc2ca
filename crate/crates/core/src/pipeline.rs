//! End-to-end SCQ runs: fit a score, compute test/mirror conformal p-values,
//! weight them, and calibrate with the mirror process.

use serde::{Deserialize, Serialize};

use crate::conformal::{
    bc_threshold, bh, build_pairs, build_pairs_from_values, jitter_pvalues, num_tied_pairs,
    scq_qvalues, scq_reject, storey_bh, Calibration, ConformalP, QValueVector, RejectionReport,
    RejectionSet, ScorePair, DEFAULT_STOREY_LAMBDA,
};
use crate::datamodel::{InferenceData, SideInfo};
use crate::error::{Error, Result};
use crate::kernel::BandwidthRule;
use crate::scoring::{fit_score, ClassifierSpec, ScoreModel, TrainContext};
use crate::seeding::derive_seed;
use crate::weights::{
    estimate_sparsity, oracle_weights, structure_weights, weight_matrix, MatrixKind,
    SparsityEstimate, WeightVector, DEFAULT_LAMBDA,
};

/// Settings for the data-driven structure weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureWeighting {
    /// Matrix kind; inferred from the side-information variant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<MatrixKind>,
    pub bandwidth: BandwidthRule,
    pub lambda: f64,
}

impl Default for StructureWeighting {
    fn default() -> Self {
        Self {
            kind: None,
            bandwidth: BandwidthRule::Silverman,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl StructureWeighting {
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }
}

/// How unit weights `w(S_j)` are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WeightScheme {
    /// `w ≡ 1` (plain mirror thresholding).
    Unit,
    /// Fixed, externally supplied weights.
    Oracle {
        weights: Vec<f64>,
    },
    Structure(StructureWeighting),
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::Structure(StructureWeighting::default())
    }
}

/// Conformal p-values of the test points and of their paired mirror points.
#[derive(Debug, Clone, PartialEq)]
pub struct PValuePairs {
    pub p: Vec<ConformalP>,
    pub p_tilde: Vec<ConformalP>,
}

impl PValuePairs {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// The values with test and mirror exchanged at each listed unit.
    pub fn swapped(&self, units: &[usize]) -> Self {
        let mut out = self.clone();
        for &j in units {
            std::mem::swap(&mut out.p[j], &mut out.p_tilde[j]);
        }
        out
    }
}

pub fn conformal_pairs(model: &ScoreModel, data: &InferenceData) -> Result<PValuePairs> {
    let cal = Calibration::new(model.score_all(&data.cal)?);
    let p = data
        .test
        .features()
        .iter()
        .map(|x| model.score(x).map(|s| cal.pvalue(s)))
        .collect::<Result<_>>()?;
    let p_tilde = data
        .mirror
        .iter()
        .map(|x| model.score(x).map(|s| cal.pvalue(s)))
        .collect::<Result<_>>()?;
    Ok(PValuePairs { p, p_tilde })
}

pub fn fit_and_pvalues(spec: &ClassifierSpec, data: &InferenceData) -> Result<PValuePairs> {
    let model = fit_score(spec, &TrainContext::from_data(data))?;
    conformal_pairs(&model, data)
}

/// Weights and, for structure weighting, the sparsity diagnostics.
pub fn compute_weights(
    scheme: &WeightScheme,
    side: &[SideInfo],
    pv: &PValuePairs,
) -> Result<(WeightVector, Option<SparsityEstimate>)> {
    match scheme {
        WeightScheme::Unit => Ok((WeightVector::unit(pv.len()), None)),
        WeightScheme::Oracle { weights } => {
            if weights.len() != pv.len() {
                return Err(Error::SchemaMismatch(format!(
                    "{} oracle weights for {} test units",
                    weights.len(),
                    pv.len()
                )));
            }
            Ok((WeightVector(weights.clone()), None))
        }
        WeightScheme::Structure(cfg) => {
            let kind = cfg.kind.unwrap_or_else(|| MatrixKind::infer(side));
            let omega = weight_matrix(side, kind, cfg.bandwidth)?;
            let est = estimate_sparsity(&omega, &pv.p, &pv.p_tilde, cfg.lambda)?;
            Ok((structure_weights(&est), Some(est)))
        }
    }
}

/// Oracle weights from known local sparsity levels.
pub fn oracle_scheme(pi: &[f64]) -> Result<WeightScheme> {
    Ok(WeightScheme::Oracle {
        weights: oracle_weights(pi)?.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScqOptions {
    pub alpha: f64,
    /// Seed for breaking p-value ties; `None` keeps exact p-values.
    pub jitter_seed: Option<u64>,
}

impl ScqOptions {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            jitter_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_level("alpha", self.alpha)
    }
}

pub(crate) fn check_level(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must lie in (0, 1), got {value}"
        )))
    }
}

pub fn weighted_pairs(
    pv: &PValuePairs,
    weights: &WeightVector,
    jitter_seed: Option<u64>,
) -> Result<Vec<ScorePair>> {
    match jitter_seed {
        None => build_pairs(&pv.p, &pv.p_tilde, &weights.0),
        Some(seed) => build_pairs_from_values(
            &jitter_pvalues(&pv.p, derive_seed(seed, 0)),
            &jitter_pvalues(&pv.p_tilde, derive_seed(seed, 1)),
            &weights.0,
        ),
    }
}

/// Full state of one SCQ run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScqOutcome {
    pub pvalues: PValuePairs,
    pub weights: WeightVector,
    pub sparsity: Option<SparsityEstimate>,
    pub pairs: Vec<ScorePair>,
    pub qvalues: QValueVector,
    /// q-value rejections; `threshold` carries the equivalent `τ`.
    pub rejection: RejectionSet,
}

impl ScqOutcome {
    pub fn report(&self) -> RejectionReport {
        RejectionReport {
            alpha: self.rejection.alpha,
            tau: self.rejection.threshold,
            rejected: self.rejection.indices.clone(),
            qvalues: self.qvalues.0.clone(),
            num_tied_pairs: num_tied_pairs(&self.pairs),
        }
    }
}

/// SCQ from precomputed p-value pairs.
pub fn scq_from_pvalues(
    pv: PValuePairs,
    side: &[SideInfo],
    scheme: &WeightScheme,
    opts: &ScqOptions,
) -> Result<ScqOutcome> {
    opts.validate()?;
    let (weights, sparsity) = compute_weights(scheme, side, &pv)?;
    let pairs = weighted_pairs(&pv, &weights, opts.jitter_seed)?;
    let qvalues = scq_qvalues(&pairs);
    let mut rejection = scq_reject(&qvalues, opts.alpha);
    rejection.threshold = bc_threshold(&pairs, opts.alpha).threshold;
    Ok(ScqOutcome {
        pvalues: pv,
        weights,
        sparsity,
        pairs,
        qvalues,
        rejection,
    })
}

/// The practical SCQ procedure with classifier `spec`.
pub fn run_scq(
    spec: &ClassifierSpec,
    data: &InferenceData,
    scheme: &WeightScheme,
    opts: &ScqOptions,
) -> Result<ScqOutcome> {
    let pv = fit_and_pvalues(spec, data)?;
    scq_from_pvalues(pv, data.test.side_info(), scheme, opts)
}

/// Split-conformal BH (or Storey-BH) on the test p-values; the mirror set is
/// not used.
pub fn run_cfbh(
    spec: &ClassifierSpec,
    data: &InferenceData,
    alpha: f64,
    storey: bool,
) -> Result<RejectionSet> {
    check_level("alpha", alpha)?;
    let model = fit_score(spec, &TrainContext::from_data(data))?;
    let cal = Calibration::new(model.score_all(&data.cal)?);
    let p: Vec<f64> = data
        .test
        .features()
        .iter()
        .map(|x| model.score(x).map(|s| cal.pvalue(s).value()))
        .collect::<Result<_>>()?;
    Ok(if storey {
        storey_bh(&p, alpha, DEFAULT_STOREY_LAMBDA)
    } else {
        bh(&p, alpha)
    })
}
