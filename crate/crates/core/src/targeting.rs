//! Two-stage logistic-link targeting.
//!
//! Stage 1 fluctuates the scaled outcome regression within each
//! (arm, fold) cell of observed units, with clever covariate
//! `1 / (g_A(a|W) g_Delta(S,a,W))`. Stage 2 regresses the targeted outcome
//! regression on `(A, W)` without any propensity input, then fluctuates that
//! intermediate regression with clever covariate `1 / g_A(a|W)`.

use crate::dgp::Dataset;
use crate::error::{Error, Result, Stage};
use crate::glm::{self, expit, logit, Covariates, FluctuationMethod};
use crate::nuisance::{self, clamp_unit, DELTA_CLAMP, IntermediateFit, NuisancePredictions, ScaleParams, TreatmentPropensity};

/// Tolerance on per-cell score equations after targeting.
pub const SCORE_CHECK_TOLERANCE: f64 = 1e-6;

/// Fluctuation of one (arm, fold) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationResult {
    pub stage: Stage,
    pub arm: u8,
    pub fold: usize,
    pub epsilon: f64,
    pub method: FluctuationMethod,
    /// Empirical score of the cell evaluated at the clamped targeted values.
    pub score_residual: f64,
    pub n_rows: usize,
}

/// Output of the outcome targeting step. Vectors are per record, arrays per
/// arm.
#[derive(Debug, Clone)]
pub struct OutcomeTargeting {
    pub q_y_star_scaled: Vec<[f64; 2]>,
    pub q_y_star: Vec<[f64; 2]>,
    pub fluctuations: Vec<FluctuationResult>,
}

impl OutcomeTargeting {
    /// `Q*_Y(S_i, A_i, W_i)` at each record's observed arm.
    pub fn at_observed_arm(&self, data: &Dataset) -> Vec<f64> {
        data.records()
            .iter()
            .zip(&self.q_y_star)
            .map(|(r, q)| q[usize::from(r.a)])
            .collect()
    }
}

/// Fully targeted predictions.
#[derive(Debug, Clone)]
pub struct TargetedPredictions {
    pub q_y_star: Vec<[f64; 2]>,
    pub q_y_star_scaled: Vec<[f64; 2]>,
    /// Initial intermediate regression, natural scale.
    pub q_int: Vec<[f64; 2]>,
    pub q_int_scaled: Vec<[f64; 2]>,
    pub q_int_star: Vec<[f64; 2]>,
    pub q_int_star_scaled: Vec<[f64; 2]>,
    /// Stage 2 response `Q*_Y(S_i, A_i, W_i)` on the intermediate scale,
    /// unclamped.
    pub intermediate_response_scaled: Vec<f64>,
    pub initial_intermediate: IntermediateFit,
    pub intermediate_scales: Vec<ScaleParams>,
    pub stage1: Vec<FluctuationResult>,
    pub stage2: Vec<FluctuationResult>,
}

impl TargetedPredictions {
    pub fn fluctuations(&self) -> impl Iterator<Item = &FluctuationResult> {
        self.stage1.iter().chain(&self.stage2)
    }

    /// Fails on the first converged cell whose score exceeds
    /// [`SCORE_CHECK_TOLERANCE`].
    pub fn check_scores(&self) -> Result<()> {
        for f in self.fluctuations() {
            if f.method == FluctuationMethod::ConvergedNewton && !(f.score_residual.abs() < SCORE_CHECK_TOLERANCE) {
                return Err(Error::ScoreEquation {
                    stage: f.stage,
                    arm: f.arm,
                    fold: f.fold,
                    residual: f.score_residual,
                });
            }
        }
        Ok(())
    }

    pub fn used_fallback(&self) -> bool {
        self.fluctuations().any(|f| f.method == FluctuationMethod::OneStepFallback)
    }

    fn epsilon(&self, stage: Stage, fold: usize, arm: u8) -> f64 {
        let cells = match stage {
            Stage::Outcome => &self.stage1,
            Stage::Intermediate => &self.stage2,
        };
        cells
            .iter()
            .find(|f| f.fold == fold && f.arm == arm)
            .map_or(0.0, |f| f.epsilon)
    }

    /// Targeted intermediate regression `Q*_int(arm, W)` of fold `fold` at an
    /// arbitrary covariate value.
    pub fn intermediate_at(
        &self,
        preds: &NuisancePredictions,
        fold: usize,
        arm: u8,
        x: &Covariates,
        treatment_override: Option<&TreatmentPropensity>,
    ) -> f64 {
        let design = preds.config.intermediate_design();
        let q = design.predict(&self.initial_intermediate.coefficients[fold], &x.with_arm(arm));
        let scale = self.intermediate_scales[fold];
        let p1 = match treatment_override {
            Some(f) => f(x),
            None => preds
                .treatment_at(fold, x)
                .expect("fitted treatment model when no override is given"),
        };
        let g = nuisance::truncate_propensity(if arm == 1 { p1 } else { 1.0 - p1 });
        let eps = self.epsilon(Stage::Intermediate, fold, arm);
        scale.unscale(clamp_unit(expit(logit(scale.scale(q)) + eps / g)))
    }
}

/// Rows of each (arm, fold) cell.
fn cells(folds: &[usize], n_folds: usize, include: impl Fn(usize) -> Option<u8>) -> Vec<[Vec<usize>; 2]> {
    let mut out: Vec<[Vec<usize>; 2]> = (0..n_folds).map(|_| [Vec::new(), Vec::new()]).collect();
    for (i, &v) in folds.iter().enumerate() {
        if let Some(arm) = include(i) {
            out[v][usize::from(arm)].push(i);
        }
    }
    out
}

/// Targets the outcome regression.
pub fn stage1_target(preds: &NuisancePredictions, data: &Dataset) -> Result<OutcomeTargeting> {
    let records = data.records();
    let unit_folds: Vec<usize> = preds.units.iter().map(|u| u.fold).collect();
    let n_folds = preds.folds.n_folds();
    let cell_rows = cells(&unit_folds, n_folds, |i| records[i].is_observed().then_some(records[i].a));
    let clever = |i: usize, k: usize| 1.0 / (preds.units[i].g_a[k] * preds.units[i].g_delta[k]);

    let mut q_y_star_scaled = vec![[0.0; 2]; records.len()];
    let mut q_y_star = vec![[0.0; 2]; records.len()];
    let mut fluctuations = Vec::with_capacity(2 * n_folds);
    let mut eps = vec![[0.0; 2]; n_folds];
    for (v, arms) in cell_rows.iter().enumerate() {
        let scale = preds.models[v].scale;
        for (k, rows) in arms.iter().enumerate() {
            let arm = k as u8;
            if rows.is_empty() {
                return Err(Error::EmptyCell {
                    stage: Stage::Outcome,
                    arm,
                    fold: v,
                });
            }
            let offset: Vec<f64> = rows.iter().map(|&i| logit(preds.units[i].q_y_scaled[k])).collect();
            let h: Vec<f64> = rows.iter().map(|&i| clever(i, k)).collect();
            let resp: Vec<f64> = rows.iter().map(|&i| scale.to_unit(records[i].y)).collect();
            let fit = glm::fit_offset_fluctuation(&offset, &h, &resp)?;
            let epsilon = match fit.method {
                FluctuationMethod::ConvergedNewton => {
                    glm::refine_clamped_fluctuation(&offset, &h, &resp, fit.epsilon, DELTA_CLAMP, 1.0 - DELTA_CLAMP).0
                }
                FluctuationMethod::OneStepFallback => fit.epsilon,
            };
            eps[v][k] = epsilon;
            fluctuations.push(FluctuationResult {
                stage: Stage::Outcome,
                arm,
                fold: v,
                epsilon,
                method: fit.method,
                score_residual: 0.0,
                n_rows: rows.len(),
            });
        }
    }
    for (i, u) in preds.units.iter().enumerate() {
        let scale = preds.models[u.fold].scale;
        for k in 0..2 {
            let sc = clamp_unit(expit(logit(u.q_y_scaled[k]) + eps[u.fold][k] * clever(i, k)));
            q_y_star_scaled[i][k] = sc;
            q_y_star[i][k] = scale.unscale(sc);
        }
    }
    for f in &mut fluctuations {
        let k = usize::from(f.arm);
        let scale = preds.models[f.fold].scale;
        f.score_residual = cell_rows[f.fold][k]
            .iter()
            .map(|&i| clever(i, k) * (scale.to_unit(records[i].y) - q_y_star_scaled[i][k]))
            .sum();
    }
    Ok(OutcomeTargeting {
        q_y_star_scaled,
        q_y_star,
        fluctuations,
    })
}

/// Fits the initial intermediate regression on the targeted outcome
/// regression and targets it.
pub fn stage2_target(outcome: &OutcomeTargeting, preds: &NuisancePredictions, data: &Dataset) -> Result<TargetedPredictions> {
    let records = data.records();
    let n = records.len();
    let n_folds = preds.folds.n_folds();
    let unit_folds: Vec<usize> = preds.units.iter().map(|u| u.fold).collect();
    let response = outcome.at_observed_arm(data);
    let initial = nuisance::fit_intermediate_regression(data, &preds.folds, preds.config, &response)?;

    let mut intermediate_scales = Vec::with_capacity(n_folds);
    for v in 0..n_folds {
        let train: Vec<f64> = (0..n).filter(|&i| unit_folds[i] != v).map(|i| response[i]).collect();
        intermediate_scales.push(ScaleParams::fit(&train)?);
    }
    let q_int_scaled: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let s = intermediate_scales[unit_folds[i]];
            let q = initial.predictions[i];
            [s.scale(q[0]), s.scale(q[1])]
        })
        .collect();
    let response_scaled: Vec<f64> = (0..n)
        .map(|i| intermediate_scales[unit_folds[i]].to_unit(response[i]))
        .collect();
    let clever = |i: usize, k: usize| 1.0 / preds.units[i].g_a[k];

    let cell_rows = cells(&unit_folds, n_folds, |i| Some(records[i].a));
    let mut eps = vec![[0.0; 2]; n_folds];
    let mut fluctuations = Vec::with_capacity(2 * n_folds);
    for (v, arms) in cell_rows.iter().enumerate() {
        for (k, rows) in arms.iter().enumerate() {
            let arm = k as u8;
            if rows.is_empty() {
                return Err(Error::EmptyCell {
                    stage: Stage::Intermediate,
                    arm,
                    fold: v,
                });
            }
            let offset: Vec<f64> = rows.iter().map(|&i| logit(q_int_scaled[i][k])).collect();
            let h: Vec<f64> = rows.iter().map(|&i| clever(i, k)).collect();
            let resp: Vec<f64> = rows.iter().map(|&i| response_scaled[i]).collect();
            let fit = glm::fit_offset_fluctuation(&offset, &h, &resp)?;
            let epsilon = match fit.method {
                FluctuationMethod::ConvergedNewton => {
                    glm::refine_clamped_fluctuation(&offset, &h, &resp, fit.epsilon, DELTA_CLAMP, 1.0 - DELTA_CLAMP).0
                }
                FluctuationMethod::OneStepFallback => fit.epsilon,
            };
            eps[v][k] = epsilon;
            fluctuations.push(FluctuationResult {
                stage: Stage::Intermediate,
                arm,
                fold: v,
                epsilon,
                method: fit.method,
                score_residual: 0.0,
                n_rows: rows.len(),
            });
        }
    }
    let mut q_int_star_scaled = vec![[0.0; 2]; n];
    let mut q_int_star = vec![[0.0; 2]; n];
    for i in 0..n {
        let v = unit_folds[i];
        for k in 0..2 {
            let sc = clamp_unit(expit(logit(q_int_scaled[i][k]) + eps[v][k] * clever(i, k)));
            q_int_star_scaled[i][k] = sc;
            q_int_star[i][k] = intermediate_scales[v].unscale(sc);
        }
    }
    for f in &mut fluctuations {
        let k = usize::from(f.arm);
        f.score_residual = cell_rows[f.fold][k]
            .iter()
            .map(|&i| clever(i, k) * (response_scaled[i] - q_int_star_scaled[i][k]))
            .sum();
    }
    Ok(TargetedPredictions {
        q_y_star: outcome.q_y_star.clone(),
        q_y_star_scaled: outcome.q_y_star_scaled.clone(),
        q_int: initial.predictions.clone(),
        q_int_scaled,
        q_int_star,
        q_int_star_scaled,
        intermediate_response_scaled: response_scaled,
        initial_intermediate: initial,
        intermediate_scales,
        stage1: outcome.fluctuations.clone(),
        stage2: fluctuations,
    })
}

/// Runs both stages.
pub fn target(preds: &NuisancePredictions, data: &Dataset) -> Result<TargetedPredictions> {
    let outcome = stage1_target(preds, data)?;
    stage2_target(&outcome, preds, data)
}
