//! Cluster-level cross-fitting of the nuisance functions.
//!
//! For every fold `v`, the treatment propensity `g_A`, the censoring
//! propensity `g_Delta` and the outcome regression `Q_Y` are fit on the
//! clusters outside `v` and evaluated on the clusters inside `v`, under both
//! treatment arms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::dgp::Dataset;
use crate::error::{Error, ModelKind, Result};
use crate::glm::{self, expit, Covariates, DesignSpec, Term};
use crate::rng;

/// Propensities are clamped to `[TRUNCATION, 1 - TRUNCATION]`.
pub const TRUNCATION: f64 = 0.025;
/// Total headroom added to the observed range before min-max scaling, split
/// evenly between the two ends.
pub const HEADROOM: f64 = 0.2;
/// Scaled values are clamped to `[DELTA_CLAMP, 1 - DELTA_CLAMP]`.
pub const DELTA_CLAMP: f64 = 0.005;
/// Re-deal attempts when a training complement misses a class.
pub const MAX_FOLD_ATTEMPTS: u64 = 10;

/// Which nuisance models are misspecified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NuisanceConfig {
    /// All models correctly specified.
    Correct,
    /// Treatment propensity omits `W1^2`.
    MisspecifiedPropensity,
    /// Outcome and intermediate regressions omit `A * W1`.
    MisspecifiedOutcome,
}

impl NuisanceConfig {
    pub const ALL: [NuisanceConfig; 3] = [
        NuisanceConfig::Correct,
        NuisanceConfig::MisspecifiedPropensity,
        NuisanceConfig::MisspecifiedOutcome,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NuisanceConfig::Correct => "C",
            NuisanceConfig::MisspecifiedPropensity => "M_gA",
            NuisanceConfig::MisspecifiedOutcome => "M_Q",
        }
    }

    pub fn treatment_design(self) -> DesignSpec {
        let terms = match self {
            NuisanceConfig::MisspecifiedPropensity => vec![Term::Intercept, Term::W1],
            _ => vec![Term::Intercept, Term::W1, Term::W1Sq],
        };
        DesignSpec::new(terms).expect("static design")
    }

    /// The censoring model is correctly specified under every configuration.
    pub fn censoring_design(self) -> DesignSpec {
        DesignSpec::new(vec![Term::Intercept, Term::S, Term::A, Term::W3]).expect("static design")
    }

    pub fn outcome_design(self) -> DesignSpec {
        let mut terms = vec![Term::Intercept, Term::A, Term::W1];
        if self != NuisanceConfig::MisspecifiedOutcome {
            terms.push(Term::AW1);
        }
        terms.extend([Term::S, Term::W2, Term::W3]);
        DesignSpec::new(terms).expect("static design")
    }

    /// Regression of the outcome regression on `(A, W)`. Contains no
    /// propensity term.
    pub fn intermediate_design(self) -> DesignSpec {
        let mut terms = vec![Term::Intercept, Term::A, Term::W1];
        if self != NuisanceConfig::MisspecifiedOutcome {
            terms.push(Term::AW1);
        }
        terms.extend([Term::W2, Term::W3]);
        DesignSpec::new(terms).expect("static design")
    }
}

impl fmt::Display for NuisanceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NuisanceConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" | "c" => Ok(NuisanceConfig::Correct),
            "M_gA" | "m_ga" | "MgA" => Ok(NuisanceConfig::MisspecifiedPropensity),
            "M_Q" | "m_q" | "MQ" => Ok(NuisanceConfig::MisspecifiedOutcome),
            other => Err(Error::InvalidConfig(format!("unknown nuisance configuration {other:?}"))),
        }
    }
}

/// Cluster-to-fold map. Folds are numbered `0..v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    v: usize,
    fold_of_cluster: BTreeMap<u32, usize>,
}

impl FoldAssignment {
    pub fn n_folds(&self) -> usize {
        self.v
    }

    pub fn fold_of(&self, cluster_id: u32) -> usize {
        self.fold_of_cluster[&cluster_id]
    }

    pub fn fold_of_cluster(&self) -> &BTreeMap<u32, usize> {
        &self.fold_of_cluster
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.v];
        for &f in self.fold_of_cluster.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// The assignment with `cluster_id` removed. A fold left empty is
    /// dropped and later folds are renumbered down.
    pub fn without_cluster(&self, cluster_id: u32) -> FoldAssignment {
        let mut fold_of_cluster = self.fold_of_cluster.clone();
        let Some(f) = fold_of_cluster.remove(&cluster_id) else {
            return self.clone();
        };
        if fold_of_cluster.values().any(|&g| g == f) {
            return FoldAssignment {
                v: self.v,
                fold_of_cluster,
            };
        }
        for g in fold_of_cluster.values_mut() {
            if *g > f {
                *g -= 1;
            }
        }
        FoldAssignment {
            v: self.v - 1,
            fold_of_cluster,
        }
    }

    /// Fold of every record, in record order.
    pub fn unit_folds(&self, data: &Dataset) -> Vec<usize> {
        data.records().iter().map(|r| self.fold_of(r.cluster_id)).collect()
    }
}

/// Randomly permutes the clusters and deals them round-robin into `v` folds.
pub fn assign_folds(data: &Dataset, v: usize, seed: u64) -> Result<FoldAssignment> {
    let j = data.n_clusters();
    if v < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {v}")));
    }
    if v > j {
        return Err(Error::TooFewClusters { folds: v, clusters: j });
    }
    let mut ids: Vec<u32> = data.cluster_ids().collect();
    ids.shuffle(&mut rng::stream(rng::derive_seed(seed, &[0xF01D]), 0));
    let fold_of_cluster = ids.iter().enumerate().map(|(k, &id)| (id, k % v)).collect();
    Ok(FoldAssignment { v, fold_of_cluster })
}

/// [`assign_folds`], re-dealt with an incremented seed until the split
/// passes [`folds_are_balanced`].
pub fn assign_folds_balanced(data: &Dataset, v: usize, seed: u64) -> Result<FoldAssignment> {
    for attempt in 0..MAX_FOLD_ATTEMPTS {
        let folds = assign_folds(data, v, seed.wrapping_add(attempt))?;
        if folds_are_balanced(data, &folds) {
            return Ok(folds);
        }
    }
    Err(Error::UnbalancedFolds)
}

/// Whether every training complement contains both treatment arms and both
/// censoring classes, and every held-out fold has uncensored units in both
/// arms (otherwise a Stage 1 fluctuation cell is empty).
pub fn folds_are_balanced(data: &Dataset, folds: &FoldAssignment) -> bool {
    // counts[f] = [A=0, A=1, D=0, D=1, D=1 & A=0, D=1 & A=1] inside fold f
    let mut counts = vec![[0usize; 6]; folds.n_folds()];
    let mut total = [0usize; 6];
    for r in data.records() {
        let f = folds.fold_of(r.cluster_id);
        let mut keys = vec![usize::from(r.a), 2 + usize::from(r.delta)];
        if r.is_observed() {
            keys.push(4 + usize::from(r.a));
        }
        for k in keys {
            counts[f][k] += 1;
            total[k] += 1;
        }
    }
    counts
        .iter()
        .all(|c| (0..4).all(|k| total[k] - c[k] > 0) && c[4] > 0 && c[5] > 0)
}

pub fn truncate_propensity(p: f64) -> f64 {
    p.clamp(TRUNCATION, 1.0 - TRUNCATION)
}

/// Min-max scaling with symmetric headroom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub y_min: f64,
    pub y_max: f64,
}

impl ScaleParams {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::DegenerateRange {
                value: values.first().copied().unwrap_or(f64::NAN),
            });
        }
        let pad = 0.5 * HEADROOM * range;
        Ok(ScaleParams {
            y_min: lo - pad,
            y_max: hi + pad,
        })
    }

    /// Affine map to the unit interval, clamped to `[DELTA_CLAMP, 1 - DELTA_CLAMP]`.
    pub fn scale(&self, y: f64) -> f64 {
        clamp_unit((y - self.y_min) / (self.y_max - self.y_min))
    }

    /// The affine map without the clamp, for fluctuation responses.
    pub fn to_unit(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn unscale(&self, u: f64) -> f64 {
        self.y_min + u * (self.y_max - self.y_min)
    }

    pub fn width(&self) -> f64 {
        self.y_max - self.y_min
    }
}

pub fn fit_scale(observed_y: &[f64]) -> Result<ScaleParams> {
    ScaleParams::fit(observed_y)
}

pub fn clamp_unit(u: f64) -> f64 {
    u.clamp(DELTA_CLAMP, 1.0 - DELTA_CLAMP)
}

/// Known treatment propensity `P(A = 1 | W)`, used instead of a fitted model
/// in oracle runs.
pub type TreatmentPropensity = dyn Fn(&Covariates) -> f64 + Sync;

/// Models fit on the training complement of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels {
    /// `None` when the propensity was supplied by an oracle.
    pub treatment: Option<Vec<f64>>,
    pub censoring: Vec<f64>,
    pub outcome: Vec<f64>,
    pub scale: ScaleParams,
    pub training_clusters: Vec<u32>,
}

/// Cross-fitted nuisance values for one observation. Arrays are indexed by
/// the treatment arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitNuisance {
    pub fold: usize,
    /// Untruncated `P(A = 1 | W)`.
    pub g_a_raw: f64,
    /// Truncated `g_A(a | W)`.
    pub g_a: [f64; 2],
    /// Truncated `g_Delta(S, a, W)` at the observed surrogate.
    pub g_delta: [f64; 2],
    /// `Q_Y(S, a, W)` on the outcome scale.
    pub q_y: [f64; 2],
    /// `Q_Y(S, a, W)` through the fold's scaling.
    pub q_y_scaled: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct NuisancePredictions {
    pub config: NuisanceConfig,
    pub folds: FoldAssignment,
    pub units: Vec<UnitNuisance>,
    pub models: Vec<FoldModels>,
}

impl NuisancePredictions {
    /// Fitted `P(A = 1 | W)` of fold `fold`, untruncated. `None` for oracle runs.
    pub fn treatment_at(&self, fold: usize, x: &Covariates) -> Option<f64> {
        let beta = self.models[fold].treatment.as_ref()?;
        Some(expit(self.config.treatment_design().predict(beta, x)))
    }

    /// Fitted `Q_Y(S, arm, W)` of fold `fold` on the outcome scale.
    pub fn outcome_at(&self, fold: usize, x: &Covariates, arm: u8) -> f64 {
        self.config
            .outcome_design()
            .predict(&self.models[fold].outcome, &x.with_arm(arm))
    }
}

fn annotate(fold: usize, model: ModelKind) -> impl FnOnce(Error) -> Error {
    move |e| Error::NuisanceFit {
        fold,
        model,
        source: Box::new(e),
    }
}

/// Cross-fits `g_A`, `g_Delta` and `Q_Y` and predicts them for both arms.
///
/// With `treatment_override`, `g_A` comes from the supplied function
/// (still truncated) and no treatment model is fit.
pub fn fit_nuisances(
    data: &Dataset,
    folds: &FoldAssignment,
    config: NuisanceConfig,
    treatment_override: Option<&TreatmentPropensity>,
) -> Result<NuisancePredictions> {
    let records = data.records();
    let covs: Vec<Covariates> = records.iter().map(Covariates::from_record).collect();
    let unit_fold = folds.unit_folds(data);
    let ga_design = config.treatment_design();
    let gd_design = config.censoring_design();
    let qy_design = config.outcome_design();

    let mut units = vec![None; records.len()];
    let mut models = Vec::with_capacity(folds.n_folds());
    for v in 0..folds.n_folds() {
        let train: Vec<usize> = (0..records.len()).filter(|&i| unit_fold[i] != v).collect();
        let train_obs: Vec<usize> = train.iter().copied().filter(|&i| records[i].is_observed()).collect();

        let treatment = match treatment_override {
            Some(_) => None,
            None => {
                let x = ga_design.matrix(train.iter().map(|&i| &covs[i]));
                let y: Vec<f64> = train.iter().map(|&i| f64::from(records[i].a)).collect();
                Some(
                    glm::fit_logistic_irls(&x, &y)
                        .map_err(annotate(v, ModelKind::TreatmentPropensity))?
                        .coefficients,
                )
            }
        };
        let censoring = {
            let x = gd_design.matrix(train.iter().map(|&i| &covs[i]));
            let y: Vec<f64> = train.iter().map(|&i| f64::from(records[i].delta)).collect();
            glm::fit_logistic_irls(&x, &y)
                .map_err(annotate(v, ModelKind::CensoringPropensity))?
                .coefficients
        };
        let y_obs: Vec<f64> = train_obs.iter().map(|&i| records[i].y).collect();
        let outcome = {
            let x = qy_design.matrix(train_obs.iter().map(|&i| &covs[i]));
            glm::fit_ols(&x, &y_obs)
                .map_err(annotate(v, ModelKind::OutcomeRegression))?
                .coefficients
        };
        let scale = ScaleParams::fit(&y_obs).map_err(annotate(v, ModelKind::OutcomeRegression))?;

        for i in (0..records.len()).filter(|&i| unit_fold[i] == v) {
            let x = covs[i];
            let p1 = match (treatment_override, &treatment) {
                (Some(f), _) => f(&x),
                (None, Some(beta)) => expit(ga_design.predict(beta, &x)),
                (None, None) => unreachable!(),
            };
            let mut u = UnitNuisance {
                fold: v,
                g_a_raw: p1,
                g_a: [truncate_propensity(1.0 - p1), truncate_propensity(p1)],
                g_delta: [0.0; 2],
                q_y: [0.0; 2],
                q_y_scaled: [0.0; 2],
            };
            for arm in 0..2u8 {
                let xa = x.with_arm(arm);
                let k = usize::from(arm);
                u.g_delta[k] = truncate_propensity(expit(gd_design.predict(&censoring, &xa)));
                u.q_y[k] = qy_design.predict(&outcome, &xa);
                u.q_y_scaled[k] = scale.scale(u.q_y[k]);
            }
            units[i] = Some(u);
        }
        let training_clusters: Vec<u32> = train
            .iter()
            .map(|&i| records[i].cluster_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        models.push(FoldModels {
            treatment,
            censoring,
            outcome,
            scale,
            training_clusters,
        });
    }
    Ok(NuisancePredictions {
        config,
        folds: folds.clone(),
        units: units.into_iter().map(|u| u.expect("every unit lies in a fold")).collect(),
        models,
    })
}

/// Cross-fitted regression of `response` (one value per record, taken at the
/// observed arm) on the intermediate design.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateFit {
    pub coefficients: Vec<Vec<f64>>,
    /// Predictions at both arms, indexed by arm.
    pub predictions: Vec<[f64; 2]>,
}

/// Fits the intermediate regression per fold on the training complement.
/// The signature takes no propensity: the fit cannot depend on `g_A`.
pub fn fit_intermediate_regression(
    data: &Dataset,
    folds: &FoldAssignment,
    config: NuisanceConfig,
    response: &[f64],
) -> Result<IntermediateFit> {
    let records = data.records();
    assert_eq!(response.len(), records.len());
    let covs: Vec<Covariates> = records.iter().map(Covariates::from_record).collect();
    let unit_fold = folds.unit_folds(data);
    let design = config.intermediate_design();
    let mut coefficients = Vec::with_capacity(folds.n_folds());
    let mut predictions = vec![[0.0; 2]; records.len()];
    for v in 0..folds.n_folds() {
        let train: Vec<usize> = (0..records.len()).filter(|&i| unit_fold[i] != v).collect();
        let x = design.matrix(train.iter().map(|&i| &covs[i]));
        let y: Vec<f64> = train.iter().map(|&i| response[i]).collect();
        let beta = glm::fit_ols(&x, &y)
            .map_err(annotate(v, ModelKind::IntermediateRegression))?
            .coefficients;
        for i in (0..records.len()).filter(|&i| unit_fold[i] == v) {
            for arm in 0..2u8 {
                predictions[i][usize::from(arm)] = design.predict(&beta, &covs[i].with_arm(arm));
            }
        }
        coefficients.push(beta);
    }
    Ok(IntermediateFit {
        coefficients,
        predictions,
    })
}
