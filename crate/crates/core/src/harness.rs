//! Monte Carlo driver for the four simulation blocks.
//!
//! Every cell of a block reuses the same replicate datasets for a given
//! design (common random numbers): replicate `r` draws its data from a seed
//! derived from the global seed and `r` only, so cells that differ only in
//! the nuisance configuration are paired.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::dgp::{generate_dataset, true_ate, true_g_a, DgpConfig};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::glm::Covariates;
use crate::nuisance::NuisanceConfig;
use crate::pipeline::{self, InferenceOptions, PipelineConfig, DEFAULT_FOLDS, DEFAULT_SEED};
use crate::rng;
use crate::variance::EstimateResult;

pub const DESK_R_SANDWICH: usize = 200;
pub const DESK_R_JACKKNIFE: usize = 100;
pub const FULL_R_SANDWICH: usize = 500;
pub const FULL_R_JACKKNIFE: usize = 200;

/// Row label suffix for the run that uses the true treatment propensity.
pub const ORACLE_SUFFIX: &str = "-oracle";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    I,
    II,
    III,
    IV,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::I, Block::II, Block::III, Block::IV];

    pub fn label(self) -> &'static str {
        match self {
            Block::I => "I",
            Block::II => "II",
            Block::III => "III",
            Block::IV => "IV",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Block::I),
            "II" | "2" => Ok(Block::II),
            "III" | "3" => Ok(Block::III),
            "IV" | "4" => Ok(Block::IV),
            other => Err(Error::InvalidConfig(format!("unknown block {other:?}"))),
        }
    }
}

/// One simulation cell: a design, a nuisance configuration and the
/// estimators reported for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub block: Block,
    /// `dgp.seed` is the global seed; replicate seeds derive from it.
    pub dgp: DgpConfig,
    pub nuisance: NuisanceConfig,
    pub estimators: Vec<EstimatorKind>,
    pub r_sandwich: usize,
    /// The first `r_jackknife` replicates also run the jackknife.
    pub r_jackknife: usize,
    pub alpha: f64,
    /// Also run every replicate with the true treatment propensity.
    pub oracle: bool,
    pub folds: usize,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.r_jackknife > self.r_sandwich {
            return Err(Error::InvalidConfig(format!(
                "jackknife replicates ({}) exceed sandwich replicates ({})",
                self.r_jackknife, self.r_sandwich
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators requested".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn dataset_seed(&self, replicate: usize) -> u64 {
        rng::derive_seed(self.dgp.seed, &[replicate as u64])
    }

    pub fn pipeline_seed(&self, replicate: usize) -> u64 {
        rng::derive_seed(self.dgp.seed, &[replicate as u64, 1])
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub jackknifed: bool,
    pub censoring_rate: f64,
    /// One result per requested estimator, or the failure message.
    pub results: std::result::Result<Vec<EstimateResult>, String>,
    /// SA-TMLE with the true treatment propensity, when requested.
    pub oracle: Option<std::result::Result<EstimateResult, String>>,
}

pub fn run_replicate(spec: &ScenarioSpec, index: usize) -> Result<ReplicateOutcome> {
    let dgp = DgpConfig {
        seed: spec.dataset_seed(index),
        ..spec.dgp.clone()
    };
    let data = generate_dataset(&dgp)?;
    let config = PipelineConfig {
        folds: spec.folds,
        ..PipelineConfig::new(spec.nuisance, spec.pipeline_seed(index))
    };
    let jackknifed = index < spec.r_jackknife;
    let opts = InferenceOptions {
        jackknife: jackknifed,
        alpha: spec.alpha,
    };
    let results = pipeline::estimate(&data, &config, None, opts)
        .map(|est| {
            spec.estimators
                .iter()
                .map(|&k| est.result(k).expect("every estimator is computed").clone())
                .collect()
        })
        .map_err(|e| e.to_string());
    let oracle = spec.oracle.then(|| {
        let alpha1 = spec.dgp.alpha1;
        let truth = move |x: &Covariates| true_g_a(1, x.w1, alpha1);
        pipeline::estimate(&data, &config, Some(&truth), opts)
            .map(|est| est.result(EstimatorKind::SaTmle).expect("SA-TMLE is computed").clone())
            .map_err(|e| e.to_string())
    });
    Ok(ReplicateOutcome {
        index,
        jackknifed,
        censoring_rate: data.censoring_rate(),
        results,
        oracle,
    })
}

/// Aggregated metrics of one estimator in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub block: String,
    pub alpha1: f64,
    pub gamma0: f64,
    #[serde(rename = "J")]
    pub j: usize,
    pub config: String,
    pub estimator: String,
    /// Successful replicates behind the sandwich metrics.
    #[serde(rename = "R_s")]
    pub r_s: usize,
    /// Successful replicates behind the jackknife metrics.
    #[serde(rename = "R_jk")]
    pub r_jk: usize,
    pub bias: f64,
    pub cp_s: f64,
    pub cp_jk: f64,
    pub width_s: f64,
    pub width_jk: f64,
    pub power_jk: f64,
    pub rho_bar: f64,
    pub cens_rate: f64,
    pub fail_s: usize,
    pub fail_jk: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn covers(ci: (f64, f64), value: f64) -> bool {
    ci.0 <= value && value <= ci.1
}

/// Metrics over the replicates of one estimator. The flag marks replicates
/// that ran the jackknife; `None` entries are failed replicates.
pub fn summarize(results: &[(bool, Option<&EstimateResult>)], truth: f64) -> Metrics {
    let ok: Vec<&EstimateResult> = results.iter().filter_map(|r| r.1).collect();
    let jk_attempted = results.iter().filter(|r| r.0).count();
    let jk: Vec<&EstimateResult> = results
        .iter()
        .filter(|r| r.0)
        .filter_map(|r| r.1)
        .filter(|r| r.v_jk.is_some())
        .collect();
    let ci_jk = |r: &EstimateResult| r.ci_jk.expect("filtered on v_jk");
    Metrics {
        r_s: ok.len(),
        r_jk: jk.len(),
        bias: mean(&ok.iter().map(|r| r.psi_hat).collect::<Vec<_>>()) - truth,
        cp_s: mean(&ok.iter().map(|r| f64::from(u8::from(covers(r.ci_sand, truth)))).collect::<Vec<_>>()),
        cp_jk: mean(&jk.iter().map(|r| f64::from(u8::from(covers(ci_jk(r), truth)))).collect::<Vec<_>>()),
        width_s: mean(&ok.iter().map(|r| r.ci_sand.1 - r.ci_sand.0).collect::<Vec<_>>()),
        width_jk: mean(&jk.iter().map(|r| ci_jk(r).1 - ci_jk(r).0).collect::<Vec<_>>()),
        power_jk: mean(&jk.iter().map(|r| f64::from(u8::from(!covers(ci_jk(r), 0.0)))).collect::<Vec<_>>()),
        rho_bar: mean(&jk.iter().map(|r| r.v_jk.unwrap()).collect::<Vec<_>>())
            / mean(&jk.iter().map(|r| r.v_sand).collect::<Vec<_>>()),
        fail_s: results.len() - ok.len(),
        fail_jk: jk_attempted - jk.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub r_s: usize,
    pub r_jk: usize,
    pub bias: f64,
    pub cp_s: f64,
    pub cp_jk: f64,
    pub width_s: f64,
    pub width_jk: f64,
    pub power_jk: f64,
    pub rho_bar: f64,
    pub fail_s: usize,
    pub fail_jk: usize,
}

/// All replicates of one scenario with their summaries.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub spec: ScenarioSpec,
    pub replicates: Vec<ReplicateOutcome>,
    pub cells: Vec<CellSummary>,
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioRun> {
    spec.validate()?;
    let replicates = (0..spec.r_sandwich)
        .into_par_iter()
        .map(|i| run_replicate(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let truth = true_ate();
    let cens_rate = mean(&replicates.iter().map(|r| r.censoring_rate).collect::<Vec<_>>());
    let cell = |estimator: String, m: Metrics| CellSummary {
        block: spec.block.label().to_string(),
        alpha1: spec.dgp.alpha1,
        gamma0: spec.dgp.gamma0,
        j: spec.dgp.n_clusters,
        config: spec.nuisance.label().to_string(),
        estimator,
        r_s: m.r_s,
        r_jk: m.r_jk,
        bias: m.bias,
        cp_s: m.cp_s,
        cp_jk: m.cp_jk,
        width_s: m.width_s,
        width_jk: m.width_jk,
        power_jk: m.power_jk,
        rho_bar: m.rho_bar,
        cens_rate,
        fail_s: m.fail_s,
        fail_jk: m.fail_jk,
    };
    let mut cells = Vec::new();
    for (k, kind) in spec.estimators.iter().enumerate() {
        let per: Vec<(bool, Option<&EstimateResult>)> = replicates
            .iter()
            .map(|r| (r.jackknifed, r.results.as_ref().ok().map(|v| &v[k])))
            .collect();
        cells.push(cell(kind.label().to_string(), summarize(&per, truth)));
    }
    if spec.oracle {
        let per: Vec<(bool, Option<&EstimateResult>)> = replicates
            .iter()
            .map(|r| (r.jackknifed, r.oracle.as_ref().and_then(|o| o.as_ref().ok())))
            .collect();
        cells.push(cell(
            format!("{}{ORACLE_SUFFIX}", EstimatorKind::SaTmle.label()),
            summarize(&per, truth),
        ));
    }
    Ok(ScenarioRun {
        spec: spec.clone(),
        replicates,
        cells,
    })
}

/// Settings shared by every cell of a block run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOverrides {
    pub seed: u64,
    pub r_sandwich: usize,
    pub r_jackknife: usize,
    /// Cluster count for Blocks I, II and IV; Block III always sweeps its
    /// own grid.
    pub n_clusters: Option<usize>,
    pub alpha: f64,
}

impl Default for BlockOverrides {
    fn default() -> Self {
        BlockOverrides {
            seed: DEFAULT_SEED,
            r_sandwich: DESK_R_SANDWICH,
            r_jackknife: DESK_R_JACKKNIFE,
            n_clusters: None,
            alpha: 0.05,
        }
    }
}

impl BlockOverrides {
    pub fn full_scale(self) -> Self {
        BlockOverrides {
            r_sandwich: FULL_R_SANDWICH,
            r_jackknife: FULL_R_JACKKNIFE,
            ..self
        }
    }
}

pub const ALPHA1_GRID: [f64; 3] = [0.3, 0.8, 1.5];
pub const GAMMA0_GRID: [f64; 3] = [2.0, 0.5, -0.5];
pub const CLUSTER_GRID: [usize; 3] = [10, 50, 100];
pub const DEFAULT_CLUSTERS: usize = 50;

/// The scenario grid of a block, in report order.
pub fn block_scenarios(block: Block, o: &BlockOverrides) -> Vec<ScenarioSpec> {
    let j = o.n_clusters.unwrap_or(DEFAULT_CLUSTERS);
    let spec = |alpha1: f64, gamma0: f64, j: usize, nuisance: NuisanceConfig, estimators: Vec<EstimatorKind>, oracle: bool| ScenarioSpec {
        block,
        dgp: DgpConfig::new(alpha1, gamma0, j, o.seed),
        nuisance,
        estimators,
        r_sandwich: o.r_sandwich,
        r_jackknife: o.r_jackknife,
        alpha: o.alpha,
        oracle,
        folds: DEFAULT_FOLDS,
    };
    let satmle = || vec![EstimatorKind::SaTmle];
    match block {
        Block::I => ALPHA1_GRID
            .iter()
            .flat_map(|&a| GAMMA0_GRID.iter().map(move |&g| (a, g)))
            .map(|(a, g)| spec(a, g, j, NuisanceConfig::Correct, satmle(), false))
            .collect(),
        Block::II => NuisanceConfig::ALL
            .iter()
            .map(|&c| {
                // G-computation ignores the treatment propensity, so its row
                // under a misspecified propensity would repeat config C.
                let estimators = EstimatorKind::ALL
                    .into_iter()
                    .filter(|&k| !(c == NuisanceConfig::MisspecifiedPropensity && k == EstimatorKind::GComp))
                    .collect();
                spec(0.8, 0.5, j, c, estimators, false)
            })
            .collect(),
        Block::III => CLUSTER_GRID
            .iter()
            .map(|&jj| spec(0.8, 0.5, jj, NuisanceConfig::Correct, satmle(), false))
            .collect(),
        Block::IV => GAMMA0_GRID
            .iter()
            .map(|&g| spec(1.5, g, j, NuisanceConfig::MisspecifiedPropensity, satmle(), true))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: Option<Block>,
    pub cells: Vec<CellSummary>,
}

impl BlockReport {
    pub fn empty() -> Self {
        BlockReport {
            block: None,
            cells: Vec::new(),
        }
    }

    /// Any failed replicate in any cell.
    pub fn is_partial(&self) -> bool {
        self.cells.iter().any(|c| c.fail_s > 0 || c.fail_jk > 0)
    }

    pub fn cell(&self, config: &str, estimator: &str) -> impl Iterator<Item = &CellSummary> {
        let (config, estimator) = (config.to_string(), estimator.to_string());
        self.cells
            .iter()
            .filter(move |c| c.config == config && c.estimator == estimator)
    }
}

pub fn run_block(block: Block, overrides: &BlockOverrides) -> Result<BlockReport> {
    let mut cells = Vec::new();
    for spec in block_scenarios(block, overrides) {
        cells.extend(run_scenario(&spec)?.cells);
    }
    Ok(BlockReport {
        block: Some(block),
        cells,
    })
}

pub const REPORT_HEADER: [&str; 18] = [
    "block", "alpha1", "gamma0", "J", "config", "estimator", "R_s", "R_jk", "bias", "cp_s", "cp_jk", "width_s", "width_jk",
    "power_jk", "rho_bar", "cens_rate", "fail_s", "fail_jk",
];

pub fn write_report(report: &BlockReport, path: &Path) -> Result<()> {
    let io = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for c in &report.cells {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Aligned plain-text table of a report.
pub fn summary_table(report: &BlockReport) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<5} {:>6} {:>6} {:>4} {:<5} {:<15} {:>4} {:>4} {:>8} {:>6} {:>6} {:>7} {:>8} {:>8} {:>7} {:>6} {:>6} {:>7}",
        "block", "alpha1", "gamma0", "J", "conf", "estimator", "R_s", "R_jk", "bias", "cp_s", "cp_jk", "width_s", "width_jk",
        "power_jk", "rho_bar", "cens", "fail_s", "fail_jk"
    );
    out.push_str(&header);
    out.push('\n');
    for c in &report.cells {
        out.push_str(&format!(
            "{:<5} {:>6.2} {:>6.2} {:>4} {:<5} {:<15} {:>4} {:>4} {:>8.4} {:>6.3} {:>6.3} {:>7.4} {:>8.4} {:>8.3} {:>7.3} {:>6.3} {:>6} {:>7}\n",
            c.block,
            c.alpha1,
            c.gamma0,
            c.j,
            c.config,
            c.estimator,
            c.r_s,
            c.r_jk,
            c.bias,
            c.cp_s,
            c.cp_jk,
            c.width_s,
            c.width_jk,
            c.power_jk,
            c.rho_bar,
            c.cens_rate,
            c.fail_s,
            c.fail_jk
        ));
    }
    out
}
