//! Clustered observational cohort with a surrogate, administrative censoring
//! and a confounded binary treatment.
//!
//! Per cluster `j` a random effect `b_j ~ N(0, sigma_b_sq)` is drawn, then per
//! unit:
//!
//! ```text
//! W1 ~ N(0,1), W2 ~ Bern(0.4), W3 ~ U(0,1)
//! A  ~ Bern(expit(alpha1 W1 + 0.3 W1^2))
//! S  ~ N(0.8A + 0.4W1 - 0.3W2 + 0.2W3 + 0.6b, 0.25)
//! D  ~ Bern(expit(gamma0 + 0.4S + 0.3A - 0.2W3))
//! Y  ~ N(0.5 - 0.28A + 0.5S + 0.4W1 - 0.2W2 + 0.3W3 + 0.15 A W1 + b, 0.64)
//! ```
//!
//! Second arguments of `N` are variances. `Y` is only observed when `D = 1`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::expit;
use crate::rng;

/// Structural coefficients of the simulation design.
///
/// The defaults are the reference design; tests swap individual entries to
/// build variants with a known effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub w2_prob: f64,
    pub a_w1_sq: f64,
    pub s_a: f64,
    pub s_w1: f64,
    pub s_w2: f64,
    pub s_w3: f64,
    pub s_b: f64,
    pub s_sd: f64,
    pub delta_s: f64,
    pub delta_a: f64,
    pub delta_w3: f64,
    pub y_intercept: f64,
    pub y_a: f64,
    pub y_s: f64,
    pub y_w1: f64,
    pub y_w2: f64,
    pub y_w3: f64,
    pub y_aw1: f64,
    pub y_sd: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            w2_prob: 0.4,
            a_w1_sq: 0.3,
            s_a: 0.8,
            s_w1: 0.4,
            s_w2: -0.3,
            s_w3: 0.2,
            s_b: 0.6,
            s_sd: 0.5,
            delta_s: 0.4,
            delta_a: 0.3,
            delta_w3: -0.2,
            y_intercept: 0.5,
            y_a: -0.28,
            y_s: 0.5,
            y_w1: 0.4,
            y_w2: -0.2,
            y_w3: 0.3,
            y_aw1: 0.15,
            y_sd: 0.8,
        }
    }
}

impl Coefficients {
    /// Average treatment effect implied by the coefficients. `E[W1] = 0`, so
    /// the interaction does not contribute.
    pub fn ate(&self) -> f64 {
        self.y_a + self.y_s * self.s_a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    /// Confounding strength.
    pub alpha1: f64,
    /// Censoring intercept; lower values censor more.
    pub gamma0: f64,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub sigma_b_sq: f64,
    pub seed: u64,
    pub coefficients: Coefficients,
}

impl DgpConfig {
    pub fn new(alpha1: f64, gamma0: f64, n_clusters: usize, seed: u64) -> Self {
        DgpConfig {
            alpha1,
            gamma0,
            n_clusters,
            cluster_size: 20,
            sigma_b_sq: 0.034,
            seed,
            coefficients: Coefficients::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 clusters, got {}",
                self.n_clusters
            )));
        }
        if self.cluster_size < 1 {
            return Err(Error::InvalidConfig("cluster size must be positive".into()));
        }
        if !(self.sigma_b_sq >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "random-effect variance must be non-negative, got {}",
                self.sigma_b_sq
            )));
        }
        Ok(())
    }
}

/// One unit `(W, A, S, Delta, Delta*Y)` together with its cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationRecord {
    pub cluster_id: u32,
    pub w1: f64,
    pub w2: u8,
    pub w3: f64,
    pub a: u8,
    pub s: f64,
    pub delta: u8,
    /// Zero when `delta == 0`; read it through [`ObservationRecord::observed_y`].
    pub y: f64,
}

impl ObservationRecord {
    pub fn observed_y(&self) -> Option<f64> {
        (self.delta == 1).then_some(self.y)
    }

    pub fn is_observed(&self) -> bool {
        self.delta == 1
    }
}

/// Ordered records plus an index from cluster id to record positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObservationRecord>,
    cluster_index: BTreeMap<u32, Vec<usize>>,
    latent_y: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_records(records: Vec<ObservationRecord>) -> Self {
        let mut cluster_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            cluster_index.entry(r.cluster_id).or_default().push(i);
        }
        Dataset {
            records,
            cluster_index,
            latent_y: None,
        }
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_index.len()
    }

    pub fn cluster_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.cluster_index
    }

    pub fn cluster_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.cluster_index.keys().copied()
    }

    pub fn censoring_rate(&self) -> f64 {
        let observed = self.records.iter().filter(|r| r.is_observed()).count();
        1.0 - observed as f64 / self.records.len() as f64
    }

    /// Outcomes drawn for every unit, including censored ones. Only present
    /// on simulated data; no estimator reads it.
    #[doc(hidden)]
    pub fn latent_outcomes(&self) -> Option<&[f64]> {
        self.latent_y.as_deref()
    }

    /// Copy of the dataset with one cluster removed.
    pub fn without_cluster(&self, cluster_id: u32) -> Dataset {
        let keep: Vec<usize> = (0..self.records.len())
            .filter(|&i| self.records[i].cluster_id != cluster_id)
            .collect();
        let mut out = Dataset::from_records(keep.iter().map(|&i| self.records[i]).collect());
        out.latent_y = self
            .latent_y
            .as_ref()
            .map(|y| keep.iter().map(|&i| y[i]).collect());
        out
    }

    /// Applies `f` to every record, keeping the cluster structure.
    pub fn map_records(&self, f: impl Fn(&ObservationRecord) -> ObservationRecord) -> Dataset {
        let mut out = Dataset::from_records(self.records.iter().map(f).collect());
        out.latent_y = None;
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        for r in &self.records {
            wtr.serialize(CsvRow::from(r)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        wtr.flush().map_err(io_err)?;
        let mut inner = wtr.into_inner().map_err(|e| io_err(e.into_error()))?;
        inner.flush().map_err(io_err)
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rdr = csv::Reader::from_reader(BufReader::new(file));
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("row {line}: {message}"),
        };
        let mut records = Vec::new();
        for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| parse_err(line + 1, e.to_string()))?;
            records.push(row.into_record().map_err(|m| parse_err(line + 1, m))?);
        }
        if records.is_empty() {
            return Err(parse_err(0, "no records".into()));
        }
        Ok(Dataset::from_records(records))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    cluster_id: u32,
    w1: f64,
    w2: u8,
    w3: f64,
    a: u8,
    s: f64,
    delta: u8,
    y: Option<f64>,
}

impl From<&ObservationRecord> for CsvRow {
    fn from(r: &ObservationRecord) -> Self {
        CsvRow {
            cluster_id: r.cluster_id,
            w1: r.w1,
            w2: r.w2,
            w3: r.w3,
            a: r.a,
            s: r.s,
            delta: r.delta,
            y: r.observed_y(),
        }
    }
}

impl CsvRow {
    fn into_record(self) -> std::result::Result<ObservationRecord, String> {
        for (name, v) in [("w2", self.w2), ("a", self.a), ("delta", self.delta)] {
            if v > 1 {
                return Err(format!("{name} must be 0 or 1, got {v}"));
            }
        }
        let y = match (self.delta, self.y) {
            (1, Some(y)) => y,
            (1, None) => return Err("y is required when delta = 1".into()),
            _ => 0.0,
        };
        Ok(ObservationRecord {
            cluster_id: self.cluster_id,
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            a: self.a,
            s: self.s,
            delta: self.delta,
            y,
        })
    }
}

/// Exogenous draws for one unit. Every endogenous variable is a deterministic
/// function of these, the cluster effect and the configuration.
#[derive(Debug, Clone, Copy)]
pub struct UnitNoise {
    pub w1: f64,
    pub u_w2: f64,
    pub w3: f64,
    pub u_a: f64,
    pub e_s: f64,
    pub u_delta: f64,
    pub e_y: f64,
}

impl UnitNoise {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        UnitNoise {
            w1: rng.sample(StandardNormal),
            u_w2: rng.random(),
            w3: rng.random(),
            u_a: rng.random(),
            e_s: rng.sample(StandardNormal),
            u_delta: rng.random(),
            e_y: rng.sample(StandardNormal),
        }
    }
}

/// A fully realised unit, with the latent outcome retained.
#[derive(Debug, Clone, Copy)]
pub struct Unit {
    pub record: ObservationRecord,
    pub latent_y: f64,
}

/// Realises a unit from its noise. `forced_a` overrides the treatment draw
/// for counterfactual generation.
pub fn realize_unit(
    cfg: &DgpConfig,
    cluster_id: u32,
    b: f64,
    noise: &UnitNoise,
    forced_a: Option<u8>,
) -> Unit {
    let c = &cfg.coefficients;
    let w1 = noise.w1;
    let w2 = u8::from(noise.u_w2 < c.w2_prob);
    let w3 = noise.w3;
    let a = forced_a.unwrap_or_else(|| u8::from(noise.u_a < true_g_a_with(c, 1, w1, cfg.alpha1)));
    let af = f64::from(a);
    let w2f = f64::from(w2);
    let s = c.s_a * af + c.s_w1 * w1 + c.s_w2 * w2f + c.s_w3 * w3 + c.s_b * b + c.s_sd * noise.e_s;
    let delta = u8::from(noise.u_delta < censoring_probability(cfg, s, a, w3));
    let latent_y = c.y_intercept
        + c.y_a * af
        + c.y_s * s
        + c.y_w1 * w1
        + c.y_w2 * w2f
        + c.y_w3 * w3
        + c.y_aw1 * af * w1
        + b
        + c.y_sd * noise.e_y;
    Unit {
        record: ObservationRecord {
            cluster_id,
            w1,
            w2,
            w3,
            a,
            s,
            delta,
            y: if delta == 1 { latent_y } else { 0.0 },
        },
        latent_y,
    }
}

/// `P(Delta = 1 | S, A, W3)`.
pub fn censoring_probability(cfg: &DgpConfig, s: f64, a: u8, w3: f64) -> f64 {
    let c = &cfg.coefficients;
    expit(cfg.gamma0 + c.delta_s * s + c.delta_a * f64::from(a) + c.delta_w3 * w3)
}

/// Cluster `j` draws from its own stream: first `b_j`, then the units in order.
fn cluster_rng(cfg: &DgpConfig, cluster: usize) -> ChaCha8Rng {
    rng::stream(rng::derive_seed(cfg.seed, &[0xD6F]), cluster as u64)
}

fn draw_cluster_effect(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    cfg.sigma_b_sq.sqrt() * z
}

/// Draws `n_clusters * cluster_size` records. Deterministic in the config.
pub fn generate_dataset(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_clusters * cfg.cluster_size;
    let mut records = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for j in 0..cfg.n_clusters {
        let mut rng = cluster_rng(cfg, j);
        let b = draw_cluster_effect(cfg, &mut rng);
        for _ in 0..cfg.cluster_size {
            let noise = UnitNoise::draw(&mut rng);
            let unit = realize_unit(cfg, j as u32, b, &noise, None);
            records.push(unit.record);
            latent.push(unit.latent_y);
        }
    }
    let mut data = Dataset::from_records(records);
    data.latent_y = Some(latent);
    Ok(data)
}

/// Monte Carlo mean of `Y(1) - Y(0)` over `n` units, both arms generated from
/// shared unit-level noise.
pub fn counterfactual_ate(cfg: &DgpConfig, n: usize) -> f64 {
    let per_cluster = cfg.cluster_size.max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut j = 0usize;
    while count < n {
        let mut rng = cluster_rng(cfg, j);
        let b = draw_cluster_effect(cfg, &mut rng);
        for _ in 0..per_cluster.min(n - count) {
            let noise = UnitNoise::draw(&mut rng);
            let y1 = realize_unit(cfg, j as u32, b, &noise, Some(1)).latent_y;
            let y0 = realize_unit(cfg, j as u32, b, &noise, Some(0)).latent_y;
            total += y1 - y0;
            count += 1;
        }
        j += 1;
    }
    total / n as f64
}

/// Analytic average treatment effect of the reference design.
pub fn true_ate() -> f64 {
    Coefficients::default().ate()
}

/// True treatment propensity `P(A = a | W1)`.
pub fn true_g_a(a: u8, w1: f64, alpha1: f64) -> f64 {
    true_g_a_with(&Coefficients::default(), a, w1, alpha1)
}

fn true_g_a_with(c: &Coefficients, a: u8, w1: f64, alpha1: f64) -> f64 {
    let p1 = expit(alpha1 * w1 + c.a_w1_sq * w1 * w1);
    if a == 1 {
        p1
    } else {
        1.0 - p1
    }
}
