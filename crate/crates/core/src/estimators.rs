//! Point estimators and their cluster-level influence curves.

use std::fmt;
use std::str::FromStr;

use crate::dgp::Dataset;
use crate::error::Error;
use crate::nuisance::NuisancePredictions;
use crate::targeting::TargetedPredictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    /// Two-stage targeted estimator of the nested functional.
    SaTmle,
    /// Shares the targeted point estimate; its influence curve weights the
    /// residual to the intermediate regression by the composite propensity.
    Aipw,
    /// Plug-in of the untargeted intermediate regression.
    GComp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::SaTmle, EstimatorKind::Aipw, EstimatorKind::GComp];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::SaTmle => "SA-TMLE",
            EstimatorKind::Aipw => "AIPW",
            EstimatorKind::GComp => "G-comp",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "satmle" | "sa-tmle" => Ok(EstimatorKind::SaTmle),
            "aipw" => Ok(EstimatorKind::Aipw),
            "gcomp" | "g-comp" => Ok(EstimatorKind::GComp),
            other => Err(Error::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Sum of the unit influence curve over one cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterEif {
    pub cluster_id: u32,
    pub eif_sum: f64,
    pub size: usize,
}

/// Everything the influence curves read for one unit, natural outcome scale.
/// Arrays are indexed by arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EicInput {
    pub a: u8,
    pub delta: u8,
    pub y: f64,
    pub g_a: [f64; 2],
    pub g_delta: [f64; 2],
    pub q_y_star: [f64; 2],
    pub q_int_star: [f64; 2],
}

pub fn eic_inputs(targeted: &TargetedPredictions, preds: &NuisancePredictions, data: &Dataset) -> Vec<EicInput> {
    data.records()
        .iter()
        .enumerate()
        .map(|(i, r)| EicInput {
            a: r.a,
            delta: r.delta,
            y: r.y,
            g_a: preds.units[i].g_a,
            g_delta: preds.units[i].g_delta,
            q_y_star: targeted.q_y_star[i],
            q_int_star: targeted.q_int_star[i],
        })
        .collect()
}

/// `(Psi_0, Psi_1)`: means of the per-arm predictions.
pub fn psi_by_arm(q: &[[f64; 2]]) -> (f64, f64) {
    let n = q.len() as f64;
    let (s0, s1) = q.iter().fold((0.0, 0.0), |(s0, s1), v| (s0 + v[0], s1 + v[1]));
    (s0 / n, s1 / n)
}

fn mean_contrast(q: &[[f64; 2]]) -> f64 {
    q.iter().map(|v| v[1] - v[0]).sum::<f64>() / q.len() as f64
}

/// Mean over all units of `Q*_int(1, W) - Q*_int(0, W)`, each from the
/// unit's own fold.
pub fn satmle_point(targeted: &TargetedPredictions) -> f64 {
    mean_contrast(&targeted.q_int_star)
}

/// Mean of the untargeted intermediate contrast.
pub fn gcomp_point(q_int: &[[f64; 2]]) -> f64 {
    mean_contrast(q_int)
}

fn arm_sign(arm: usize) -> f64 {
    if arm == 1 {
        1.0
    } else {
        -1.0
    }
}

/// The three-component efficient influence curve of every unit.
pub fn unit_eic(inputs: &[EicInput], psi_by_arm: (f64, f64)) -> Vec<f64> {
    let psi = [psi_by_arm.0, psi_by_arm.1];
    inputs
        .iter()
        .map(|u| {
            (0..2)
                .map(|k| {
                    let treated = f64::from(u8::from(usize::from(u.a) == k));
                    let observed = f64::from(u.delta);
                    let y = if u.delta == 1 { u.y } else { 0.0 };
                    let d_y = treated * observed / (u.g_a[k] * u.g_delta[k]) * (y - u.q_y_star[k]);
                    let d_s = treated / u.g_a[k] * (u.q_y_star[k] - u.q_int_star[k]);
                    let d_w = u.q_int_star[k] - psi[k];
                    arm_sign(k) * (d_y + d_s + d_w)
                })
                .sum()
        })
        .collect()
}

/// Single-stage influence curve with the composite weight applied to the
/// residual from the intermediate regression.
pub fn aipw_unit_eic(inputs: &[EicInput], psi_by_arm: (f64, f64)) -> Vec<f64> {
    let psi = [psi_by_arm.0, psi_by_arm.1];
    inputs
        .iter()
        .map(|u| {
            (0..2)
                .map(|k| {
                    let weight = if usize::from(u.a) == k && u.delta == 1 {
                        1.0 / (u.g_a[k] * u.g_delta[k])
                    } else {
                        0.0
                    };
                    let resid = if weight > 0.0 { u.y - u.q_int_star[k] } else { 0.0 };
                    arm_sign(k) * (weight * resid + u.q_int_star[k] - psi[k])
                })
                .sum()
        })
        .collect()
}

/// Plug-in deviation `Q_int(1,W) - Q_int(0,W) - Psi`.
pub fn gcomp_unit_eic(q_int: &[[f64; 2]], psi: f64) -> Vec<f64> {
    q_int.iter().map(|q| q[1] - q[0] - psi).collect()
}

/// Sums unit values within clusters, in cluster-id order.
pub fn cluster_sums(data: &Dataset, unit: &[f64]) -> Vec<ClusterEif> {
    assert_eq!(unit.len(), data.len());
    data.cluster_index()
        .iter()
        .map(|(&cluster_id, rows)| ClusterEif {
            cluster_id,
            eif_sum: rows.iter().map(|&i| unit[i]).sum(),
            size: rows.len(),
        })
        .collect()
}

pub fn compute_eic(
    targeted: &TargetedPredictions,
    preds: &NuisancePredictions,
    data: &Dataset,
    psi_by_arm: (f64, f64),
) -> Vec<ClusterEif> {
    cluster_sums(data, &unit_eic(&eic_inputs(targeted, preds, data), psi_by_arm))
}

pub fn aipw_eic(
    targeted: &TargetedPredictions,
    preds: &NuisancePredictions,
    data: &Dataset,
    psi_by_arm: (f64, f64),
) -> Vec<ClusterEif> {
    cluster_sums(data, &aipw_unit_eic(&eic_inputs(targeted, preds, data), psi_by_arm))
}

pub fn gcomp_eic(q_int: &[[f64; 2]], data: &Dataset, psi: f64) -> Vec<ClusterEif> {
    cluster_sums(data, &gcomp_unit_eic(q_int, psi))
}
