//! Cluster-robust sandwich and leave-one-cluster-out jackknife variances,
//! t intervals, the variance-ratio diagnostic and the oracle decomposition.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{ClusterEif, EstimatorKind};
use crate::nuisance::TreatmentPropensity;
use crate::pipeline::{self, InferenceOptions, PipelineConfig};

/// Between-cluster variance of the cluster influence curves.
///
/// Cluster sums are divided by the mean cluster size `N / J`, so the result
/// estimates `Var(psi_hat)` directly:
/// `V = sum_j (EIF_j - mean)^2 / (J (J - 1))`.
pub fn sandwich_variance(eifs: &[ClusterEif]) -> Result<f64> {
    let j = eifs.len();
    if j < 2 {
        return Err(Error::DegenerateClusters { needed: 2, clusters: j });
    }
    let n: usize = eifs.iter().map(|c| c.size).sum();
    let mean_size = n as f64 / j as f64;
    let scaled: Vec<f64> = eifs.iter().map(|c| c.eif_sum / mean_size).collect();
    // Centred on the first value so equal inputs give exactly zero.
    let mean = scaled[0] + scaled.iter().map(|x| x - scaled[0]).sum::<f64>() / j as f64;
    let ss: f64 = scaled.iter().map(|x| (x - mean).powi(2)).sum();
    Ok(ss / (j as f64 * (j as f64 - 1.0)))
}

/// `(J - 1) / J * sum_j (psi_(-j) - mean)^2`.
pub fn jackknife_variance(loo_estimates: &[f64]) -> f64 {
    let j = loo_estimates.len() as f64;
    let first = loo_estimates[0];
    let mean = first + loo_estimates.iter().map(|x| x - first).sum::<f64>() / j;
    (j - 1.0) / j * loo_estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
}

/// Runs `estimate` on every leave-one-cluster-out dataset, in parallel.
/// Results are in cluster-id order.
pub fn leave_one_cluster_out<T, F>(data: &Dataset, estimate: F) -> Vec<(u32, Result<T>)>
where
    T: Send,
    F: Fn(&Dataset, u32) -> Result<T> + Sync,
{
    let ids: Vec<u32> = data.cluster_ids().collect();
    ids.par_iter()
        .map(|&id| (id, estimate(&data.without_cluster(id), id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeResult {
    pub v_jk: f64,
    pub loo_estimates: Vec<f64>,
}

/// Leave-one-cluster-out jackknife of a scalar estimator. Fails if any
/// refit fails.
pub fn jackknife<F>(data: &Dataset, estimate: F) -> Result<JackknifeResult>
where
    F: Fn(&Dataset, u32) -> Result<f64> + Sync,
{
    let j = data.n_clusters();
    if j < 3 {
        return Err(Error::DegenerateClusters { needed: 3, clusters: j });
    }
    let loo = collect_loo(leave_one_cluster_out(data, estimate))?;
    Ok(JackknifeResult {
        v_jk: jackknife_variance(&loo),
        loo_estimates: loo,
    })
}

pub(crate) fn collect_loo<T>(results: Vec<(u32, Result<T>)>) -> Result<Vec<T>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = 0;
    let mut first = None;
    for (_, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(ok),
        Some(first) => Err(Error::Jackknife {
            failed,
            total,
            first: Box::new(first),
        }),
    }
}

/// Two-sided critical value `t_{df, 1 - alpha/2}`.
pub fn t_critical(df: usize, alpha: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    t.inverse_cdf(1.0 - alpha / 2.0)
}

/// `psi +/- t_{J-1, alpha/2} sqrt(v)`.
pub fn confidence_interval(psi: f64, v: f64, n_clusters: usize, alpha: f64) -> (f64, f64) {
    if v == 0.0 {
        return (psi, psi);
    }
    let half = t_critical(n_clusters - 1, alpha) * v.sqrt();
    (psi - half, psi + half)
}

/// Provenance flags attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateFlags {
    /// Some fluctuation fell back to the one-step update.
    pub fallback_used: bool,
    /// Failed leave-one-out refits; when non-zero the jackknife fields are
    /// absent.
    pub loo_failures: usize,
    pub loo_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub estimator: EstimatorKind,
    pub psi_hat: f64,
    pub n_clusters: usize,
    pub v_sand: f64,
    pub v_jk: Option<f64>,
    pub ci_sand: (f64, f64),
    pub ci_jk: Option<(f64, f64)>,
    /// `v_jk / v_sand`, present when both exist and `v_sand > 0`.
    pub rho: Option<f64>,
    pub loo_estimates: Vec<f64>,
    pub cluster_eifs: Vec<ClusterEif>,
    pub flags: EstimateFlags,
}

impl EstimateResult {
    pub fn new(
        estimator: EstimatorKind,
        psi_hat: f64,
        cluster_eifs: Vec<ClusterEif>,
        loo_estimates: Option<Vec<f64>>,
        alpha: f64,
    ) -> Result<Self> {
        let j = cluster_eifs.len();
        let v_sand = sandwich_variance(&cluster_eifs)?;
        let v_jk = loo_estimates.as_deref().map(jackknife_variance);
        let rho = v_jk.filter(|_| v_sand > 0.0).map(|v| v / v_sand);
        Ok(EstimateResult {
            estimator,
            psi_hat,
            n_clusters: j,
            v_sand,
            v_jk,
            ci_sand: confidence_interval(psi_hat, v_sand, j, alpha),
            ci_jk: v_jk.map(|v| confidence_interval(psi_hat, v, j, alpha)),
            rho,
            loo_estimates: loo_estimates.unwrap_or_default(),
            cluster_eifs,
            flags: EstimateFlags::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRho {
    pub rho: f64,
    pub rho_oracle: f64,
    pub delta_rho: f64,
}

/// Runs the full procedure with the fitted and with the true treatment
/// propensity on the same data and compares the SA-TMLE variance ratios.
pub fn oracle_rho(data: &Dataset, config: &PipelineConfig, true_propensity: &TreatmentPropensity, alpha: f64) -> Result<OracleRho> {
    let opts = InferenceOptions { jackknife: true, alpha };
    let rho_of = |over: Option<&TreatmentPropensity>| -> Result<f64> {
        let est = pipeline::estimate(data, config, over, opts)?;
        let r = est.result(EstimatorKind::SaTmle).expect("SA-TMLE always estimated");
        match (r.rho, &r.flags.loo_error) {
            (Some(rho), _) => Ok(rho),
            (None, Some(e)) => Err(Error::InvalidConfig(format!("jackknife failed: {e}"))),
            (None, None) => Err(Error::InvalidConfig("sandwich variance is zero".into())),
        }
    };
    let rho = rho_of(None)?;
    let rho_oracle = rho_of(Some(true_propensity))?;
    Ok(OracleRho {
        rho,
        rho_oracle,
        delta_rho: rho - rho_oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::ObservationRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn eifs(values: &[f64]) -> Vec<ClusterEif> {
        values
            .iter()
            .enumerate()
            .map(|(j, &v)| ClusterEif {
                cluster_id: j as u32,
                eif_sum: v,
                size: 1,
            })
            .collect()
    }

    /// Clusters of `m` units whose `w1` carries the value.
    fn scalar_dataset(values: &[Vec<f64>]) -> Dataset {
        let recs = values
            .iter()
            .enumerate()
            .flat_map(|(j, vs)| {
                vs.iter().map(move |&v| ObservationRecord {
                    cluster_id: j as u32,
                    w1: v,
                    w2: 0,
                    w3: 0.0,
                    a: 0,
                    s: 0.0,
                    delta: 0,
                    y: 0.0,
                })
            })
            .collect();
        Dataset::from_records(recs)
    }

    fn sample_mean(d: &Dataset) -> f64 {
        d.records().iter().map(|r| r.w1).sum::<f64>() / d.len() as f64
    }

    #[test]
    fn sandwich_hand_values() {
        assert_eq!(sandwich_variance(&eifs(&[0.7, 0.7, 0.7])).unwrap(), 0.0);
        assert!((sandwich_variance(&eifs(&[-1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(sandwich_variance(&eifs(&[1.0])), Err(Error::DegenerateClusters { .. })));
    }

    #[test]
    fn sandwich_scales_with_cluster_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let v = sandwich_variance(&eifs(&vals)).unwrap();
        assert!((10_000.0 * v - 1.0).abs() < 0.05, "{}", 10_000.0 * v);
    }

    #[test]
    fn jackknife_equals_sandwich_for_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..4).map(|_| 3.0 + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let d = scalar_dataset(&values);
        let psi = sample_mean(&d);
        let unit: Vec<f64> = d.records().iter().map(|r| r.w1 - psi).collect();
        let sand = sandwich_variance(&crate::estimators::cluster_sums(&d, &unit)).unwrap();
        let jk = jackknife(&d, |loo, _| Ok(sample_mean(loo))).unwrap();
        assert_eq!(jk.loo_estimates.len(), 25);
        assert!((jk.v_jk - sand).abs() <= 1e-12 * sand, "{} vs {sand}", jk.v_jk);
    }

    #[test]
    fn jackknife_of_constant_is_zero() {
        let d = scalar_dataset(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(jackknife(&d, |_, _| Ok(4.2)).unwrap().v_jk, 0.0);
        let small = scalar_dataset(&[vec![1.0], vec![2.0]]);
        assert!(jackknife(&small, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn jackknife_reports_failures() {
        let d = scalar_dataset(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let err = jackknife(&d, |_, id| if id == 2 { Err(Error::UnbalancedFolds) } else { Ok(1.0) }).unwrap_err();
        assert!(matches!(err, Error::Jackknife { failed: 1, total: 4, .. }));
    }

    #[test]
    fn t_critical_values() {
        assert!((t_critical(6, 0.05) - 2.4469).abs() < 1e-4);
        assert!((t_critical(9_999, 0.05) - 1.96).abs() < 0.01);
        assert_eq!(confidence_interval(0.3, 0.0, 7, 0.05), (0.3, 0.3));
        let (lo, hi) = confidence_interval(0.3, 0.04, 7, 0.05);
        assert!((hi - 0.3 - 2.4469 * 0.2).abs() < 1e-4 && (0.3 - lo - (hi - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn rho_requires_both_variances() {
        let r = EstimateResult::new(EstimatorKind::SaTmle, 0.1, eifs(&[1.0, 2.0, 3.0]), None, 0.05).unwrap();
        assert!(r.rho.is_none() && r.v_jk.is_none() && r.ci_jk.is_none());
        let r = EstimateResult::new(EstimatorKind::SaTmle, 0.1, eifs(&[1.0, 2.0, 3.0]), Some(vec![0.0, 0.1, 0.2]), 0.05).unwrap();
        assert!((r.rho.unwrap() - r.v_jk.unwrap() / r.v_sand).abs() < 1e-15);
        let flat = EstimateResult::new(EstimatorKind::SaTmle, 0.1, eifs(&[1.0, 1.0]), Some(vec![0.0, 0.1]), 0.05).unwrap();
        assert!(flat.rho.is_none());
    }

    #[test]
    fn jackknife_t_interval_coverage_for_the_mean() {
        // Normal clusters, J = 30: the jackknife-t interval is exact.
        let reps = 2000;
        let mut covered = 0;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + rep);
            let values: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
            let d = scalar_dataset(&values);
            let psi = sample_mean(&d);
            let jk = jackknife(&d, |loo, _| Ok(sample_mean(loo))).unwrap();
            let (lo, hi) = confidence_interval(psi, jk.v_jk, 30, 0.05);
            covered += usize::from(lo <= 0.0 && 0.0 <= hi);
        }
        let cp = covered as f64 / reps as f64;
        assert!((cp - 0.95).abs() <= 0.012, "coverage {cp}");
    }
}
