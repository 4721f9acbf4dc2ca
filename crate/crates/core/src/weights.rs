//! Structure-adaptive unit weights learned from side information.
//!
//! The local outlier frequency around each unit is estimated by a screened,
//! kernel- or group-smoothed count of large p-values that pools the test and
//! mirror p-value of every unit symmetrically. Because each unit enters only
//! through `1{p_i > λ} + 1{p~_i > λ}`, the weights are unchanged when any
//! subset of test/mirror pairs is swapped.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::ConformalP;
use crate::datamodel::SideInfo;
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, BandwidthRule};

/// Lower clip for `π̂`; the upper clip is `1/2 − EPS_PI`.
pub const EPS_PI: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Group,
    Kernel,
}

impl MatrixKind {
    /// Group matrices for categorical side information, kernels otherwise.
    pub fn infer(side: &[SideInfo]) -> Self {
        match side.first() {
            Some(SideInfo::Group(_)) => MatrixKind::Group,
            _ => MatrixKind::Kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    /// Dense group label per unit.
    Group(Vec<usize>),
    Kernel {
        positions: Vec<f64>,
        bandwidth: f64,
    },
}

/// The `m × m` matrix `Ω`, stored lazily as a group partition or a kernel
/// over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    repr: Repr,
}

impl WeightMatrix {
    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Group(g) => g.len(),
            Repr::Kernel { positions, .. } => positions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> MatrixKind {
        match self.repr {
            Repr::Group(_) => MatrixKind::Group,
            Repr::Kernel { .. } => MatrixKind::Kernel,
        }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.repr {
            Repr::Group(_) => None,
            Repr::Kernel { bandwidth, .. } => Some(bandwidth),
        }
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        match &self.repr {
            Repr::Group(g) => (g[j] == g[k]) as u8 as f64,
            Repr::Kernel {
                positions,
                bandwidth,
            } => gaussian_kernel((positions[j] - positions[k]).abs(), *bandwidth),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.len();
        (0..m)
            .map(|j| (0..m).map(|k| self.entry(j, k)).collect())
            .collect()
    }

    /// `(Σ_i ω_ij x_i, Σ_i ω_ij)` for every `j`.
    fn smooth(&self, x: &[f64]) -> Vec<(f64, f64)> {
        match &self.repr {
            Repr::Group(g) => {
                let groups = g.iter().copied().max().map_or(0, |n| n + 1);
                let mut sums = vec![(0.0, 0.0); groups];
                for (gi, xi) in g.iter().zip(x) {
                    sums[*gi].0 += xi;
                    sums[*gi].1 += 1.0;
                }
                g.iter().map(|gi| sums[*gi]).collect()
            }
            Repr::Kernel {
                positions,
                bandwidth,
            } => positions
                .iter()
                .map(|sj| {
                    positions
                        .iter()
                        .zip(x)
                        .fold((0.0, 0.0), |(num, den), (si, xi)| {
                            let w = gaussian_kernel((si - sj).abs(), *bandwidth);
                            (num + w * xi, den + w)
                        })
                })
                .collect(),
        }
    }
}

/// Builds `Ω` from side information alone.
pub fn weight_matrix(
    side_info: &[SideInfo],
    kind: MatrixKind,
    bandwidth: BandwidthRule,
) -> Result<WeightMatrix> {
    let repr = match kind {
        MatrixKind::Group => {
            let mut ids: HashMap<i64, usize> = HashMap::new();
            let groups = side_info
                .iter()
                .map(|s| match s {
                    SideInfo::Group(g) => {
                        let next = ids.len();
                        Ok(*ids.entry(*g).or_insert(next))
                    }
                    SideInfo::Position(_) => Err(Error::VariantMismatch),
                })
                .collect::<Result<Vec<_>>>()?;
            Repr::Group(groups)
        }
        MatrixKind::Kernel => {
            let positions = side_info
                .iter()
                .map(|s| match s {
                    SideInfo::Position(x) => Ok(*x),
                    SideInfo::Group(_) => Err(Error::VariantMismatch),
                })
                .collect::<Result<Vec<_>>>()?;
            let bandwidth = bandwidth.resolve(positions.iter().copied());
            Repr::Kernel {
                positions,
                bandwidth,
            }
        }
    };
    Ok(WeightMatrix { repr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEstimate {
    pub pi_hat: Vec<f64>,
    pub lambda: f64,
    pub raw: Vec<f64>,
}

/// Screened sparsity estimate
/// `π̂_j = 1 − Σ_i ω_ij [1{p_i > λ} + 1{p~_i > λ}] / (2 (1 − λ) Σ_i ω_ij)`,
/// clipped to `[ε, 1/2 − ε]`.
pub fn estimate_sparsity(
    omega: &WeightMatrix,
    p: &[ConformalP],
    p_tilde: &[ConformalP],
    lambda: f64,
) -> Result<SparsityEstimate> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if p.len() != omega.len() || p_tilde.len() != omega.len() {
        return Err(Error::SchemaMismatch(format!(
            "weight matrix has {} units but {} / {} p-values were given",
            omega.len(),
            p.len(),
            p_tilde.len()
        )));
    }
    let exceed: Vec<f64> = p
        .iter()
        .zip(p_tilde)
        .map(|(a, b)| ((a.value() > lambda) as u8 + (b.value() > lambda) as u8) as f64)
        .collect();
    let raw: Vec<f64> = omega
        .smooth(&exceed)
        .into_iter()
        .map(|(num, den)| 1.0 - num / (2.0 * (1.0 - lambda) * den))
        .collect();
    let pi_hat = raw.iter().map(|r| r.clamp(EPS_PI, 0.5 - EPS_PI)).collect();
    Ok(SparsityEstimate {
        pi_hat,
        lambda,
        raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn unit(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Bias-corrected weights `w_j = π̂_j / (1/2 − π̂_j)`.
pub fn structure_weights(est: &SparsityEstimate) -> WeightVector {
    WeightVector(
        est.pi_hat
            .iter()
            .map(|pi| {
                let pi = pi.clamp(EPS_PI, 0.5 - EPS_PI);
                pi / (0.5 - pi)
            })
            .collect(),
    )
}

/// Odds weights `π / (1 − π)` from known local sparsity levels.
pub fn oracle_weights(pi: &[f64]) -> Result<WeightVector> {
    pi.iter()
        .enumerate()
        .map(|(index, &value)| {
            if value > 0.0 && value < 1.0 {
                Ok(value / (1.0 - value))
            } else {
                Err(Error::PiOutOfRange { index, value })
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(WeightVector)
}

/// Writes `unit,side,pi_raw,pi_clipped,weight`.
pub fn write_weights_csv<W: Write>(
    writer: W,
    side: &[SideInfo],
    est: Option<&SparsityEstimate>,
    weights: &WeightVector,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "side", "pi_raw", "pi_clipped", "weight"])?;
    for (j, wj) in weights.0.iter().enumerate() {
        let side = match side.get(j) {
            Some(SideInfo::Group(g)) => g.to_string(),
            Some(SideInfo::Position(x)) => format!("{x:?}"),
            None => String::new(),
        };
        let (raw, clipped) = match est {
            Some(e) => (e.raw[j].to_string(), e.pi_hat[j].to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([j.to_string(), side, raw, clipped, wj.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(g: &[i64]) -> Vec<SideInfo> {
        g.iter().map(|&x| SideInfo::Group(x)).collect()
    }

    fn p(n: usize, cal: usize) -> ConformalP {
        ConformalP::new(n, cal)
    }

    #[test]
    fn group_matrix() {
        let om = weight_matrix(
            &groups(&[1, 1, 2]),
            MatrixKind::Group,
            BandwidthRule::Silverman,
        )
        .unwrap();
        assert_eq!(
            om.to_dense(),
            vec![
                vec![1.0, 1.0, 0.0],
                vec![1.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0]
            ]
        );
    }

    #[test]
    fn kernel_ratio_at_one_bandwidth() {
        let h = 2.5;
        let side: Vec<SideInfo> = [0.0, h, 2.0 * h]
            .iter()
            .map(|&x| SideInfo::Position(x))
            .collect();
        let om = weight_matrix(&side, MatrixKind::Kernel, BandwidthRule::Fixed(h)).unwrap();
        assert!((om.entry(0, 1) / om.entry(0, 0) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_unit() {
        let om = weight_matrix(&groups(&[7]), MatrixKind::Group, BandwidthRule::Silverman).unwrap();
        assert_eq!(om.to_dense(), vec![vec![1.0]]);
        let om = weight_matrix(
            &[SideInfo::Position(3.0)],
            MatrixKind::Kernel,
            BandwidthRule::Silverman,
        )
        .unwrap();
        assert_eq!(om.len(), 1);
    }

    #[test]
    fn variant_mismatch() {
        assert!(matches!(
            weight_matrix(&groups(&[1]), MatrixKind::Kernel, BandwidthRule::Silverman),
            Err(Error::VariantMismatch)
        ));
        assert!(matches!(
            weight_matrix(
                &[SideInfo::Position(1.0)],
                MatrixKind::Group,
                BandwidthRule::Silverman
            ),
            Err(Error::VariantMismatch)
        ));
    }

    #[test]
    fn sparsity_example() {
        // p = (0.6, 0.2), p~ = (0.7, 0.9) on a 9-point calibration grid
        let om = weight_matrix(
            &groups(&[1, 1]),
            MatrixKind::Group,
            BandwidthRule::Silverman,
        )
        .unwrap();
        let est = estimate_sparsity(&om, &[p(6, 9), p(2, 9)], &[p(7, 9), p(9, 9)], 0.5).unwrap();
        assert_eq!(est.raw, vec![-0.5, -0.5]);
        assert_eq!(est.pi_hat, vec![EPS_PI, EPS_PI]);
    }

    #[test]
    fn sparsity_saturation() {
        let om = weight_matrix(
            &groups(&[1, 1, 2]),
            MatrixKind::Group,
            BandwidthRule::Silverman,
        )
        .unwrap();
        let ones = [p(4, 3); 3];
        let est = estimate_sparsity(&om, &ones, &ones, 0.5).unwrap();
        assert_eq!(est.raw, vec![-1.0; 3]);
        assert_eq!(est.pi_hat, vec![EPS_PI; 3]);
        let small = [p(1, 3); 3];
        let est = estimate_sparsity(&om, &small, &small, 0.5).unwrap();
        assert_eq!(est.raw, vec![1.0; 3]);
        assert_eq!(est.pi_hat, vec![0.5 - EPS_PI; 3]);
    }

    #[test]
    fn structure_weight_examples() {
        let est = |pi: f64| SparsityEstimate {
            pi_hat: vec![pi],
            lambda: 0.1,
            raw: vec![pi],
        };
        assert_eq!(structure_weights(&est(0.25)).0, vec![1.0]);
        assert!((structure_weights(&est(1.0 / 3.0)).0[0] - 2.0).abs() < 1e-12);
        let w = structure_weights(&est(EPS_PI)).0[0];
        assert!((w - 1e-3 / 0.499).abs() < 1e-15);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_weights(&[0.5]).unwrap().0, vec![1.0]);
        assert!((oracle_weights(&[0.9]).unwrap().0[0] - 9.0).abs() < 1e-12);
        let w = oracle_weights(&[0.01, 0.6]).unwrap().0;
        assert!((w[0] - 0.01 / 0.99).abs() < 1e-15);
        assert!((w[1] - 1.5).abs() < 1e-12);
        assert!(matches!(
            oracle_weights(&[0.2, 1.0]),
            Err(Error::PiOutOfRange { index: 1, .. })
        ));
        assert!(oracle_weights(&[0.0]).is_err());
    }

    #[test]
    fn weights_csv_header() {
        let om = weight_matrix(
            &groups(&[1, 2]),
            MatrixKind::Group,
            BandwidthRule::Silverman,
        )
        .unwrap();
        let est = estimate_sparsity(&om, &[p(1, 9), p(9, 9)], &[p(2, 9), p(10, 9)], 0.1).unwrap();
        let w = structure_weights(&est);
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &groups(&[1, 2]), Some(&est), &w).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("unit,side,pi_raw,pi_clipped,weight\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
