//! The full estimation procedure on one dataset: fold assignment, nuisance
//! cross-fitting, two-stage targeting, point estimates, influence curves and
//! (optionally) the leave-one-cluster-out jackknife.

use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorKind};
use crate::nuisance::{self, FoldAssignment, NuisanceConfig, NuisancePredictions, TreatmentPropensity};
use crate::rng;
use crate::targeting::{self, TargetedPredictions};
use crate::variance::{self, EstimateFlags, EstimateResult};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_SEED: u64 = 2024;

/// How leave-one-cluster-out refits partition the remaining clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LooFolds {
    /// Keep the full-data fold of every remaining cluster; a fold emptied by
    /// the removal disappears.
    #[default]
    Inherit,
    /// Deal `min(V, J - 1)` fresh folds from a seed extended with the
    /// left-out cluster id.
    Reassign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub nuisance: NuisanceConfig,
    /// Number of cross-fitting folds.
    pub folds: usize,
    /// Seeds fold assignment.
    pub seed: u64,
    pub loo_folds: LooFolds,
}

impl PipelineConfig {
    pub fn new(nuisance: NuisanceConfig, seed: u64) -> Self {
        PipelineConfig {
            nuisance,
            folds: DEFAULT_FOLDS,
            seed,
            loo_folds: LooFolds::default(),
        }
    }

    /// Configuration of a freshly dealt refit that leaves out `cluster_id`:
    /// at most `J - 1` folds and a seed extended with the cluster id.
    pub fn leave_one_out(&self, n_clusters: usize, cluster_id: u32) -> Self {
        PipelineConfig {
            folds: self.folds.min(n_clusters - 1),
            seed: rng::derive_seed(self.seed, &[u64::from(cluster_id) + 1]),
            ..*self
        }
    }
}

/// The fold assignment of the refit without `cluster_id`. Inherited folds
/// that are no longer balanced fall back to a fresh balanced deal.
pub fn loo_fold_assignment(config: &PipelineConfig, full: &FoldAssignment, loo_data: &Dataset, n_clusters: usize, cluster_id: u32) -> Result<FoldAssignment> {
    if config.loo_folds == LooFolds::Inherit {
        let folds = full.without_cluster(cluster_id);
        if folds.n_folds() >= 2 && nuisance::folds_are_balanced(loo_data, &folds) {
            return Ok(folds);
        }
    }
    let c = config.leave_one_out(n_clusters, cluster_id);
    nuisance::assign_folds_balanced(loo_data, c.folds, c.seed)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub folds: FoldAssignment,
    pub nuisance: NuisancePredictions,
    pub targeted: TargetedPredictions,
    /// Untargeted intermediate regression used by G-computation.
    pub q_int_untargeted: Vec<[f64; 2]>,
    pub psi_by_arm: (f64, f64),
    pub satmle: f64,
    pub gcomp: f64,
}

/// Point estimates of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimates {
    pub satmle: f64,
    pub gcomp: f64,
}

impl PointEstimates {
    pub fn get(&self, kind: EstimatorKind) -> f64 {
        match kind {
            EstimatorKind::SaTmle | EstimatorKind::Aipw => self.satmle,
            EstimatorKind::GComp => self.gcomp,
        }
    }
}

impl PipelineOutput {
    pub fn point_estimates(&self) -> PointEstimates {
        PointEstimates {
            satmle: self.satmle,
            gcomp: self.gcomp,
        }
    }

    /// Per-unit SA-TMLE influence curve.
    pub fn unit_eic(&self, data: &Dataset) -> Vec<f64> {
        estimators::unit_eic(
            &estimators::eic_inputs(&self.targeted, &self.nuisance, data),
            self.psi_by_arm,
        )
    }
}

/// Runs nuisance fitting, targeting and point estimation.
///
/// Fails if any converged fluctuation leaves its score equation above the
/// check tolerance.
pub fn run(data: &Dataset, config: &PipelineConfig, treatment_override: Option<&TreatmentPropensity>) -> Result<PipelineOutput> {
    let folds = nuisance::assign_folds_balanced(data, config.folds, config.seed)?;
    run_with_folds(data, config.nuisance, folds, treatment_override)
}

/// [`run`] with a given fold assignment.
pub fn run_with_folds(
    data: &Dataset,
    config: NuisanceConfig,
    folds: FoldAssignment,
    treatment_override: Option<&TreatmentPropensity>,
) -> Result<PipelineOutput> {
    let preds = nuisance::fit_nuisances(data, &folds, config, treatment_override)?;
    let targeted = targeting::target(&preds, data)?;
    targeted.check_scores()?;

    let initial_response: Vec<f64> = data
        .records()
        .iter()
        .zip(&preds.units)
        .map(|(r, u)| u.q_y[usize::from(r.a)])
        .collect();
    let untargeted = nuisance::fit_intermediate_regression(data, &folds, config, &initial_response)?;

    let psi_by_arm = estimators::psi_by_arm(&targeted.q_int_star);
    let satmle = estimators::satmle_point(&targeted);
    let gcomp = estimators::gcomp_point(&untargeted.predictions);
    Ok(PipelineOutput {
        folds,
        nuisance: preds,
        targeted,
        q_int_untargeted: untargeted.predictions,
        psi_by_arm,
        satmle,
        gcomp,
    })
}

pub fn point_estimates(data: &Dataset, config: &PipelineConfig, treatment_override: Option<&TreatmentPropensity>) -> Result<PointEstimates> {
    run(data, config, treatment_override).map(|o| o.point_estimates())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub jackknife: bool,
    pub alpha: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            jackknife: true,
            alpha: 0.05,
        }
    }
}

/// Results for every estimator from one run of the procedure.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub output: PipelineOutput,
    pub results: Vec<EstimateResult>,
}

impl Estimates {
    pub fn result(&self, kind: EstimatorKind) -> Option<&EstimateResult> {
        self.results.iter().find(|r| r.estimator == kind)
    }
}

/// Runs the procedure, computes every estimator's influence curve and
/// sandwich variance, and with `options.jackknife` the leave-one-cluster-out
/// variance from full refits. Jackknife failures are recorded in the flags
/// instead of failing the whole estimate.
pub fn estimate(
    data: &Dataset,
    config: &PipelineConfig,
    treatment_override: Option<&TreatmentPropensity>,
    options: InferenceOptions,
) -> Result<Estimates> {
    let output = run(data, config, treatment_override)?;
    let j = data.n_clusters();

    let mut loo: Option<Vec<PointEstimates>> = None;
    let mut loo_error: Option<(usize, Error)> = None;
    if options.jackknife {
        if j < 3 {
            return Err(Error::DegenerateClusters { needed: 3, clusters: j });
        }
        let results = variance::leave_one_cluster_out(data, |d, id| {
            let folds = loo_fold_assignment(config, &output.folds, d, j, id)?;
            run_with_folds(d, config.nuisance, folds, treatment_override).map(|o| o.point_estimates())
        });
        match variance::collect_loo(results) {
            Ok(v) => loo = Some(v),
            Err(Error::Jackknife { failed, first, .. }) => loo_error = Some((failed, *first)),
            Err(e) => return Err(e),
        }
    }

    let psi = output.psi_by_arm;
    let inputs = estimators::eic_inputs(&output.targeted, &output.nuisance, data);
    let flags = EstimateFlags {
        fallback_used: output.targeted.used_fallback(),
        loo_failures: loo_error.as_ref().map_or(0, |e| e.0),
        loo_error: loo_error.as_ref().map(|e| e.1.to_string()),
    };
    let mut results = Vec::with_capacity(3);
    for kind in EstimatorKind::ALL {
        let (point, eifs) = match kind {
            EstimatorKind::SaTmle => (output.satmle, estimators::cluster_sums(data, &estimators::unit_eic(&inputs, psi))),
            EstimatorKind::Aipw => (output.satmle, estimators::cluster_sums(data, &estimators::aipw_unit_eic(&inputs, psi))),
            EstimatorKind::GComp => (output.gcomp, estimators::gcomp_eic(&output.q_int_untargeted, data, output.gcomp)),
        };
        let loo_k = loo.as_ref().map(|v| v.iter().map(|p| p.get(kind)).collect());
        let mut r = EstimateResult::new(kind, point, eifs, loo_k, options.alpha)?;
        r.flags = flags.clone();
        results.push(r);
    }
    Ok(Estimates { output, results })
}
