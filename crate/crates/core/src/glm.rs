//! Small dense regression kernels: least squares, logistic regression by
//! iteratively reweighted least squares, and the one-parameter logistic
//! fluctuation with a fixed offset.
//!
//! Designs here have at most eight columns, so the normal equations are
//! solved with a Cholesky factorisation that checks every pivot against a
//! relative tolerance.

/// Pivot tolerance relative to the corresponding Gram diagonal.
pub const PIVOT_TOLERANCE: f64 = 1e-10;
/// Convergence tolerance on the maximum absolute score component.
pub const SCORE_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
/// Coefficients beyond this magnitude are treated as perfect separation.
pub const SEPARATION_BOUND: f64 = 30.0;
pub const FLUCTUATION_MAX_ITER: usize = 25;
pub const FLUCTUATION_MAX_HALVINGS: usize = 25;
/// Fluctuation curvature below this at the origin is an error.
pub const CURVATURE_FLOOR: f64 = 1e-12;

use crate::error::{Error, Result};

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// A regressor built from the raw columns of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    W1,
    W1Sq,
    W2,
    W3,
    A,
    S,
    AW1,
}

impl Term {
    pub fn eval(self, x: &Covariates) -> f64 {
        match self {
            Term::Intercept => 1.0,
            Term::W1 => x.w1,
            Term::W1Sq => x.w1 * x.w1,
            Term::W2 => x.w2,
            Term::W3 => x.w3,
            Term::A => x.a,
            Term::S => x.s,
            Term::AW1 => x.a * x.w1,
        }
    }

    /// Whether the term changes with the treatment column.
    pub fn depends_on_treatment(self) -> bool {
        matches!(self, Term::A | Term::AW1)
    }
}

/// Raw regressors of one row, with treatment possibly set to a
/// counterfactual arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariates {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub a: f64,
    pub s: f64,
}

impl Covariates {
    pub fn from_record(r: &crate::dgp::ObservationRecord) -> Self {
        Covariates {
            w1: r.w1,
            w2: f64::from(r.w2),
            w3: r.w3,
            a: f64::from(r.a),
            s: r.s,
        }
    }

    pub fn with_arm(mut self, arm: u8) -> Self {
        self.a = f64::from(arm);
        self
    }
}

/// An ordered list of distinct terms, intercept listed explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpec {
    terms: Vec<Term>,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(Error::InvalidConfig(format!("duplicate design term {t:?}")));
            }
        }
        if terms.is_empty() {
            return Err(Error::InvalidConfig("empty design".into()));
        }
        Ok(DesignSpec { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn row(&self, x: &Covariates) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    pub fn matrix<'a>(&self, rows: impl IntoIterator<Item = &'a Covariates>) -> DesignMatrix {
        let mut data = Vec::new();
        let mut n = 0;
        for x in rows {
            data.extend(self.terms.iter().map(|t| t.eval(x)));
            n += 1;
        }
        DesignMatrix {
            n_rows: n,
            n_cols: self.terms.len(),
            data,
        }
    }

    /// Linear predictor `x' beta`.
    pub fn predict(&self, coefficients: &[f64], x: &Covariates) -> f64 {
        self.terms
            .iter()
            .zip(coefficients)
            .map(|(t, b)| t.eval(x) * b)
            .sum()
    }
}

/// Row-major dense design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_cols), "ragged design rows");
        DesignMatrix {
            n_rows: rows.len(),
            n_cols,
            data: rows.concat(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols.max(1)).take(self.n_rows)
    }

    fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    /// `X' diag(w) X`, lower triangle filled.
    fn weighted_gram(&self, weights: impl Fn(usize) -> f64) -> Vec<f64> {
        let p = self.n_cols;
        let mut g = vec![0.0; p * p];
        for (i, row) in self.rows().enumerate() {
            let w = weights(i);
            for a in 0..p {
                let wa = w * row[a];
                for b in 0..=a {
                    g[a * p + b] += wa * row[b];
                }
            }
        }
        g
    }

    fn weighted_cross(&self, v: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (i, row) in self.rows().enumerate() {
            let vi = v(i);
            for (o, x) in out.iter_mut().zip(row) {
                *o += x * vi;
            }
        }
        out
    }
}

/// Solves `G x = rhs` for symmetric positive definite `G` (lower triangle
/// read), rejecting pivots below `PIVOT_TOLERANCE` times the diagonal.
fn cholesky_solve(gram: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let p = rhs.len();
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let diag = gram[j * p + j];
        let mut d = diag;
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > PIVOT_TOLERANCE * diag.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient { column: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[j * p + j] = ljj;
        for i in j + 1..p {
            let mut s = gram[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / ljj;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn fit_ols(x: &DesignMatrix, y: &[f64]) -> Result<FitResult> {
    assert_eq!(x.n_rows(), y.len(), "response length mismatch");
    if x.n_rows() < x.n_cols() {
        return Err(Error::RankDeficient {
            column: x.n_rows(),
            pivot: 0.0,
        });
    }
    let gram = x.weighted_gram(|_| 1.0);
    let rhs = x.weighted_cross(|i| y[i]);
    let mut beta = cholesky_solve(&gram, &rhs)?;
    // One step of iterative refinement on the normal equations.
    let resid = x.weighted_cross(|i| y[i] - x.dot_row(i, &beta));
    let correction = cholesky_solve(&gram, &resid)?;
    for (b, c) in beta.iter_mut().zip(correction) {
        *b += c;
    }
    Ok(FitResult {
        coefficients: beta,
        converged: true,
        iterations: 1,
    })
}

/// Bernoulli log-likelihood of `beta`.
pub fn logistic_log_likelihood(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> f64 {
    (0..x.n_rows())
        .map(|i| {
            let eta = x.dot_row(i, beta);
            y[i] * eta - softplus(eta)
        })
        .sum()
}

/// Gradient of [`logistic_log_likelihood`], `X'(y - p)`.
pub fn logistic_score(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> Vec<f64> {
    x.weighted_cross(|i| y[i] - expit(x.dot_row(i, beta)))
}

/// Log-likelihood, score and information of a logistic model in one pass
/// over the rows.
struct LogisticState {
    loglik: f64,
    score: Vec<f64>,
    info: Vec<f64>,
}

fn logistic_state(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> LogisticState {
    let p = x.n_cols();
    let mut state = LogisticState {
        loglik: 0.0,
        score: vec![0.0; p],
        info: vec![0.0; p * p],
    };
    for (i, row) in x.rows().enumerate() {
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        // One exponential serves the mean and the log-partition term.
        let e = (-eta.abs()).exp();
        let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        state.loglik += y[i] * eta - (eta.max(0.0) + e.ln_1p());
        let r = y[i] - mu;
        let w = mu * (1.0 - mu);
        for a in 0..p {
            state.score[a] += row[a] * r;
            let wa = w * row[a];
            for b in 0..=a {
                state.info[a * p + b] += wa * row[b];
            }
        }
    }
    state
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn fit_logistic_irls(x: &DesignMatrix, y: &[f64]) -> Result<FitResult> {
    assert_eq!(x.n_rows(), y.len(), "response length mismatch");
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == y.len() {
        // All-one-class data separates trivially: the intercept diverges.
        return Err(Error::Separation {
            column: 0,
            value: if ones == 0 { f64::NEG_INFINITY } else { f64::INFINITY },
        });
    }
    let p = x.n_cols();
    let mut beta = vec![0.0; p];
    let mut state = logistic_state(x, y, &beta);
    for iter in 0..IRLS_MAX_ITER {
        if max_abs(&state.score) < SCORE_TOLERANCE {
            return Ok(FitResult {
                coefficients: beta,
                converged: true,
                iterations: iter,
            });
        }
        let step = cholesky_solve(&state.info, &state.score)?;
        let mut scale = 1.0;
        let mut halvings = 0;
        let (candidate, cand_state) = loop {
            let candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let cand_state = logistic_state(x, y, &candidate);
            if cand_state.loglik >= state.loglik - 1e-12 * state.loglik.abs() || halvings >= 10 {
                break (candidate, cand_state);
            }
            scale *= 0.5;
            halvings += 1;
        };
        beta = candidate;
        state = cand_state;
        if let Some((column, &value)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| b.abs() > SEPARATION_BOUND)
        {
            return Err(Error::Separation { column, value });
        }
    }
    if max_abs(&state.score) < SCORE_TOLERANCE {
        return Ok(FitResult {
            coefficients: beta,
            converged: true,
            iterations: IRLS_MAX_ITER,
        });
    }
    Err(Error::NoConvergence {
        iterations: IRLS_MAX_ITER,
        score: max_abs(&state.score),
    })
}

/// How a fluctuation coefficient was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluctuationMethod {
    ConvergedNewton,
    OneStepFallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fluctuation {
    pub epsilon: f64,
    pub method: FluctuationMethod,
    /// Score at the returned coefficient, before any clamping of predictions.
    pub score: f64,
    pub iterations: usize,
}

struct FluctuationProblem<'a> {
    offset: &'a [f64],
    clever: &'a [f64],
    response: &'a [f64],
}

impl FluctuationProblem<'_> {
    fn score_and_info(&self, eps: f64) -> (f64, f64) {
        let mut score = 0.0;
        let mut info = 0.0;
        for ((&o, &h), &r) in self.offset.iter().zip(self.clever).zip(self.response) {
            let p = expit(o + eps * h);
            score += h * (r - p);
            info += h * h * p * (1.0 - p);
        }
        (score, info)
    }

    fn quasi_log_likelihood(&self, eps: f64) -> f64 {
        self.offset
            .iter()
            .zip(self.clever)
            .zip(self.response)
            .map(|((&o, &h), &r)| {
                let eta = o + eps * h;
                r * eta - softplus(eta)
            })
            .sum()
    }
}

/// Solves `sum_i H_i (r_i - expit(o_i + eps H_i)) = 0` for `eps`.
///
/// Damped Newton on the quasi-binomial log-likelihood; if it has not
/// converged after [`FLUCTUATION_MAX_ITER`] steps, the single undamped Newton
/// step from zero is returned instead.
pub fn fit_offset_fluctuation(offset: &[f64], clever: &[f64], response: &[f64]) -> Result<Fluctuation> {
    assert!(offset.len() == clever.len() && clever.len() == response.len());
    let problem = FluctuationProblem {
        offset,
        clever,
        response,
    };
    let (score0, info0) = problem.score_and_info(0.0);
    if !(info0 >= CURVATURE_FLOOR) {
        return Err(Error::DegenerateCurvature { curvature: info0 });
    }
    let mut eps = 0.0;
    let mut score = score0;
    let mut info = info0;
    let mut loglik = problem.quasi_log_likelihood(0.0);
    for iter in 0..FLUCTUATION_MAX_ITER {
        if score.abs() < SCORE_TOLERANCE {
            return Ok(Fluctuation {
                epsilon: eps,
                method: FluctuationMethod::ConvergedNewton,
                score,
                iterations: iter,
            });
        }
        if !(info >= CURVATURE_FLOOR) {
            break;
        }
        let step = score / info;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=FLUCTUATION_MAX_HALVINGS {
            let candidate = eps + scale * step;
            let ll = problem.quasi_log_likelihood(candidate);
            // Near the optimum the likelihood gain of a step is below its
            // rounding noise; a smaller score is then the better criterion.
            if ll >= loglik || problem.score_and_info(candidate).0.abs() < score.abs() {
                eps = candidate;
                loglik = ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        (score, info) = problem.score_and_info(eps);
    }
    if score.abs() < SCORE_TOLERANCE {
        return Ok(Fluctuation {
            epsilon: eps,
            method: FluctuationMethod::ConvergedNewton,
            score,
            iterations: FLUCTUATION_MAX_ITER,
        });
    }
    let fallback = score0 / info0;
    Ok(Fluctuation {
        epsilon: fallback,
        method: FluctuationMethod::OneStepFallback,
        score: problem.score_and_info(fallback).0,
        iterations: FLUCTUATION_MAX_ITER,
    })
}

/// Score of the fluctuation when every fitted value is clamped to
/// `[lo, hi]` after the logistic update.
pub fn clamped_score(offset: &[f64], clever: &[f64], response: &[f64], eps: f64, lo: f64, hi: f64) -> f64 {
    offset
        .iter()
        .zip(clever)
        .zip(response)
        .map(|((&o, &h), &r)| h * (r - expit(o + eps * h).clamp(lo, hi)))
        .sum()
}

/// Moves `eps` to a root of [`clamped_score`] when the clamp makes the
/// unclamped solution miss it.
///
/// With positive clever covariates the clamped score is continuous and
/// non-increasing in `eps`, so a bracket found by doubling outward from the
/// starting value can be bisected. Returns the final `eps` and its clamped
/// score; the score stays above tolerance only if no sign change exists.
pub fn refine_clamped_fluctuation(offset: &[f64], clever: &[f64], response: &[f64], eps: f64, lo: f64, hi: f64) -> (f64, f64) {
    let score = |e: f64| clamped_score(offset, clever, response, e, lo, hi);
    let s0 = score(eps);
    if s0.abs() < SCORE_TOLERANCE {
        return (eps, s0);
    }
    // The score decreases in eps: move up when positive, down when negative.
    let direction = s0.signum();
    let mut step = eps.abs().max(1e-3);
    let (mut inside, mut outside) = (eps, eps);
    let mut found = false;
    for _ in 0..200 {
        outside = eps + direction * step;
        let s = score(outside);
        if s.abs() < SCORE_TOLERANCE {
            return (outside, s);
        }
        if s.signum() != direction {
            found = true;
            break;
        }
        inside = outside;
        step *= 2.0;
    }
    if !found {
        return (eps, s0);
    }
    let mut best = (eps, s0);
    for _ in 0..200 {
        let mid = 0.5 * (inside + outside);
        let s = score(mid);
        if s.abs() < best.1.abs() {
            best = (mid, s);
        }
        if s.abs() < SCORE_TOLERANCE || mid == inside || mid == outside {
            break;
        }
        if s.signum() == direction {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn covariates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Covariates> {
        (0..n)
            .map(|_| Covariates {
                w1: rng.sample(StandardNormal),
                w2: f64::from(u8::from(rng.random::<f64>() < 0.4)),
                w3: rng.random(),
                a: f64::from(u8::from(rng.random::<f64>() < 0.5)),
                s: rng.sample(StandardNormal),
            })
            .collect()
    }

    #[test]
    fn design_rejects_duplicates() {
        assert!(DesignSpec::new(vec![Term::Intercept, Term::W1, Term::W1]).is_err());
        assert!(DesignSpec::new(vec![]).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = covariates(&mut rng, 50);
        let spec = DesignSpec::new(vec![Term::Intercept, Term::W1]).unwrap();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x.w1 + 1.0).collect();
        let fit = fit_ols(&spec.matrix(&xs), &y).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn ols_intercept_only_is_mean() {
        let y = [1.0, 4.0, 2.5, -3.0, 7.25];
        let x = DesignMatrix::from_rows(&vec![vec![1.0]; y.len()]);
        let fit = fit_ols(&x, &y).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((fit.coefficients[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_noisy_coefficients_and_residuals_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = covariates(&mut rng, 200);
        let spec = DesignSpec::new(vec![Term::Intercept, Term::W1, Term::W3, Term::S]).unwrap();
        let truth = [0.7, -1.2, 2.0, 0.4];
        let y: Vec<f64> = xs
            .iter()
            .map(|x| spec.predict(&truth, x) + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mat = spec.matrix(&xs);
        let fit = fit_ols(&mat, &y).unwrap();
        for (b, t) in fit.coefficients.iter().zip(truth) {
            assert!((b - t).abs() < 0.05, "{b} vs {t}");
        }
        let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - mat.dot_row(i, &fit.coefficients)).collect();
        for c in 0..mat.n_cols() {
            let dot: f64 = (0..y.len()).map(|i| mat.row(i)[c] * resid[i]).sum();
            let scale: f64 = (0..y.len()).map(|i| (mat.row(i)[c] * y[i]).abs()).sum();
            assert!(dot.abs() < 1e-8 * scale, "column {c}: {dot}");
        }
    }

    #[test]
    fn ols_rank_deficient() {
        let x = DesignMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(matches!(fit_ols(&x, &[1.0, 2.0, 3.0]), Err(Error::RankDeficient { .. })));
        let short = DesignMatrix::from_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(fit_ols(&short, &[1.0]), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn logistic_intercept_only_is_logit_mean() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let x = DesignMatrix::from_rows(&vec![vec![1.0]; y.len()]);
        let fit = fit_logistic_irls(&x, &y).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - logit(5.0 / 8.0)).abs() < 1e-9);
    }

    #[test]
    fn logistic_recovers_propensity_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = covariates(&mut rng, 100_000);
        let spec = DesignSpec::new(vec![Term::Intercept, Term::W1, Term::W1Sq]).unwrap();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| f64::from(u8::from(rng.random::<f64>() < expit(0.8 * x.w1 + 0.3 * x.w1 * x.w1))))
            .collect();
        let fit = fit_logistic_irls(&spec.matrix(&xs), &y).unwrap();
        for (b, t) in fit.coefficients.iter().zip([0.0, 0.8, 0.3]) {
            assert!((b - t).abs() < 0.05, "{b} vs {t}");
        }
    }

    #[test]
    fn logistic_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = covariates(&mut rng, 500);
        let spec = DesignSpec::new(vec![Term::Intercept, Term::W1, Term::W3, Term::S]).unwrap();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| f64::from(u8::from(rng.random::<f64>() < expit(0.3 + x.w1 - x.s))))
            .collect();
        let mat = spec.matrix(&xs);
        let fit = fit_logistic_irls(&mat, &y).unwrap();
        assert!(max_abs(&logistic_score(&mat, &y, &fit.coefficients)) < SCORE_TOLERANCE);
        // Away from the optimum the analytic score equals the central difference.
        let beta: Vec<f64> = fit.coefficients.iter().map(|b| b + 0.2).collect();
        let analytic = logistic_score(&mat, &y, &beta);
        let h = 1e-5;
        for k in 0..beta.len() {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (logistic_log_likelihood(&mat, &y, &up) - logistic_log_likelihood(&mat, &y, &dn)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() <= 1e-4 * analytic[k].abs().max(1.0), "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn logistic_separation_guard() {
        let xs: Vec<Covariates> = (0..40)
            .map(|i| Covariates {
                w1: f64::from(i) - 19.5,
                w2: 0.0,
                w3: 0.0,
                a: 0.0,
                s: 0.0,
            })
            .collect();
        let y: Vec<f64> = xs.iter().map(|x| f64::from(u8::from(x.w1 > 0.0))).collect();
        let spec = DesignSpec::new(vec![Term::Intercept, Term::W1]).unwrap();
        assert!(matches!(fit_logistic_irls(&spec.matrix(&xs), &y), Err(Error::Separation { .. })));
        let x = DesignMatrix::from_rows(&vec![vec![1.0]; 5]);
        assert!(matches!(fit_logistic_irls(&x, &[1.0; 5]), Err(Error::Separation { .. })));
    }

    #[test]
    fn fluctuation_zero_when_already_solved() {
        let offset = [-1.0, 0.3, 2.0];
        let resp: Vec<f64> = offset.iter().map(|&o| expit(o)).collect();
        let f = fit_offset_fluctuation(&offset, &[1.5, 2.0, 4.0], &resp).unwrap();
        assert_eq!(f.method, FluctuationMethod::ConvergedNewton);
        assert!(f.epsilon.abs() < 1e-12);
    }

    #[test]
    fn fluctuation_single_row_inverts_analytically() {
        let f = fit_offset_fluctuation(&[0.0], &[2.0], &[0.8]).unwrap();
        assert_eq!(f.method, FluctuationMethod::ConvergedNewton);
        assert!((f.epsilon - logit(0.8) / 2.0).abs() < 1e-9);
        assert!((f.epsilon - 0.6931).abs() < 1e-4);
        assert!(f.score.abs() < SCORE_TOLERANCE);
    }

    #[test]
    fn fluctuation_sign_follows_residuals() {
        let offset = [-0.5, 0.0, 0.4, 1.0];
        let resp: Vec<f64> = offset.iter().map(|&o| (expit(o) + 0.05).min(0.995)).collect();
        let f = fit_offset_fluctuation(&offset, &[1.0, 3.0, 2.0, 10.0], &resp).unwrap();
        assert!(f.epsilon > 0.0);
        assert!(f.score.abs() < SCORE_TOLERANCE);
    }

    #[test]
    fn fluctuation_degenerate_curvature() {
        let err = fit_offset_fluctuation(&[800.0], &[1.0], &[0.5]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCurvature { .. }));
    }

    #[test]
    fn fluctuation_heavy_weights_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let offset: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let clever: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1600.0)).collect();
        let resp: Vec<f64> = (0..n).map(|_| rng.random_range(0.005..0.995)).collect();
        let f = fit_offset_fluctuation(&offset, &clever, &resp).unwrap();
        assert_eq!(f.method, FluctuationMethod::ConvergedNewton);
        assert!(f.score.abs() < SCORE_TOLERANCE);
    }

    proptest! {
        #[test]
        fn expit_logit_round_trip(x in -30.0f64..12.0) {
            prop_assert!((logit(expit(x)) - x).abs() < 1e-10);
        }

        #[test]
        fn expit_is_quarter_lipschitz(x in -40.0f64..40.0, h in -10.0f64..10.0) {
            prop_assert!((expit(x + h) - expit(x)).abs() <= h.abs() / 4.0 + 1e-16);
        }

        #[test]
        fn fluctuation_solves_score(
            rows in proptest::collection::vec((-3.0f64..3.0, 1.0f64..50.0, 0.005f64..0.995), 1..40)
        ) {
            let offset: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let clever: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let resp: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let f = fit_offset_fluctuation(&offset, &clever, &resp).unwrap();
            if f.method == FluctuationMethod::ConvergedNewton {
                prop_assert!(f.score.abs() < SCORE_TOLERANCE);
            }
        }
    }

    #[test]
    fn expit_logit_round_trip_grid() {
        // For large positive x, 1 - expit(x) keeps only ~1e-16 absolute
        // precision, so the round trip degrades like 1e-16 * exp(x).
        let mut x = -30.0;
        while x <= 30.0 {
            let err = (logit(expit(x)) - x).abs();
            let tol = if x <= 12.0 { 1e-10 } else { 1e-15 * x.exp() };
            assert!(err < tol, "x = {x}: {err}");
            x += 0.25;
        }
    }
}
