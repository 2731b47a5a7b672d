//! Logistic primitives and an IRLS fitter with per-unit offsets and weights.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::weighted_gram;

/// Beyond this magnitude `log(1 + e^x)` switches to its asymptotic forms.
pub const ASYMPTOTIC_THRESHOLD: f64 = 33.0;

#[derive(Debug, Error, Clone)]
pub enum LogisticError {
    #[error("logit is undefined at p = {0}")]
    Domain(f64),
    #[error("design is rank deficient (singular value ratio {ratio:.3e})")]
    SingularDesign { ratio: f64 },
    #[error("IRLS did not converge in {iterations} iterations (score sup-norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last: Box<GlmFit>,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("more columns ({d}) than observations ({n})")]
    TooFewObservations { d: usize, n: usize },
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> Result<f64, LogisticError> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(LogisticError::Domain(p))
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > ASYMPTOTIC_THRESHOLD {
        x + (-x).exp()
    } else if x < -ASYMPTOTIC_THRESHOLD {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log expit(x)`.
pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

/// Bernoulli log-likelihood contribution `y*eta - log(1 + e^eta)`.
pub fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - softplus(eta)
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub score_tol: f64,
    pub rel_loglik_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub separation_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            score_tol: 1e-8,
            rel_loglik_tol: 1e-10,
            max_iter: 100,
            max_halvings: 20,
            separation_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    pub linear_predictor: DVector<f64>,
    pub fitted_prob: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `X^T diag{p(1-p) w} X` at the solution.
    pub naive_information: DMatrix<f64>,
    pub loglik: f64,
    pub score_norm: f64,
    /// Some unit has |eta| beyond the separation bound.
    pub separation_warning: bool,
}

struct State {
    beta: DVector<f64>,
    eta: DVector<f64>,
    prob: DVector<f64>,
    loglik: f64,
}

fn evaluate(x: &DMatrix<f64>, y: &DVector<f64>, offset: &DVector<f64>, w: &DVector<f64>, beta: DVector<f64>) -> State {
    let eta = x * &beta + offset;
    let prob = eta.map(expit);
    let loglik = eta
        .iter()
        .zip(y.iter())
        .zip(w.iter())
        .map(|((&e, &yi), &wi)| if wi == 0.0 { 0.0 } else { wi * bernoulli_loglik(yi, e) })
        .sum();
    State { beta, eta, prob, loglik }
}

/// Weighted logistic maximum likelihood with a fixed offset.
///
/// `offset` and `weights` default to zero and one. Convergence requires the
/// score sup-norm below `score_tol` and the relative log-likelihood change
/// below `rel_loglik_tol`; steps are halved whenever the log-likelihood
/// would decrease.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: Option<&DVector<f64>>,
    weights: Option<&DVector<f64>>,
) -> Result<GlmFit, LogisticError> {
    fit_logistic_with(x, y, offset, weights, &IrlsOptions::default())
}

pub fn fit_logistic_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    offset: Option<&DVector<f64>>,
    weights: Option<&DVector<f64>>,
    opts: &IrlsOptions,
) -> Result<GlmFit, LogisticError> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(LogisticError::Dimension(format!("y has {} rows, X has {n}", y.len())));
    }
    let offset = offset.cloned().unwrap_or_else(|| DVector::zeros(n));
    let w = weights.cloned().unwrap_or_else(|| DVector::from_element(n, 1.0));
    if offset.len() != n || w.len() != n {
        return Err(LogisticError::Dimension("offset/weights length".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LogisticError::InvalidWeights);
    }
    let support = w.iter().filter(|&&v| v > 0.0).count();
    if d > support {
        return Err(LogisticError::TooFewObservations { d, n: support });
    }

    // Rank on the weighted support.
    let mut xs = x.clone();
    for (mut row, &wi) in xs.row_iter_mut().zip(w.iter()) {
        row *= wi.sqrt();
    }
    let sv = xs.singular_values();
    let ratio = if sv.max() > 0.0 { sv.min() / sv.max() } else { 0.0 };
    if ratio.is_nan() || ratio <= 1e-10 {
        return Err(LogisticError::SingularDesign { ratio });
    }

    let finish = |s: &State, iterations: usize, converged: bool, score_norm: f64| {
        let pw = DVector::from_iterator(n, s.prob.iter().zip(w.iter()).map(|(&p, &wi)| p * (1.0 - p) * wi));
        GlmFit {
            coefficients: s.beta.clone(),
            linear_predictor: s.eta.clone(),
            fitted_prob: s.prob.clone(),
            converged,
            iterations,
            naive_information: weighted_gram(x, &pw),
            loglik: s.loglik,
            score_norm,
            separation_warning: s.eta.iter().any(|e| e.abs() > opts.separation_bound),
        }
    };

    let mut state = evaluate(x, y, &offset, &w, DVector::zeros(d));
    let mut previous: Option<f64> = None;
    let mut score_norm = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let resid = DVector::from_iterator(n, (0..n).map(|i| w[i] * (y[i] - state.prob[i])));
        let score = x.transpose() * resid;
        score_norm = score.amax();
        let rel = previous.map(|p| (state.loglik - p).abs() / (state.loglik.abs() + 0.1));
        if score_norm < opts.score_tol && rel.is_some_and(|r| r < opts.rel_loglik_tol) {
            return Ok(finish(&state, iter, true, score_norm));
        }

        let pw = DVector::from_iterator(n, (0..n).map(|i| state.prob[i] * (1.0 - state.prob[i]) * w[i]));
        let info = weighted_gram(x, &pw);
        let step = match info.cholesky() {
            Some(c) => c.solve(&score),
            None => return Err(LogisticError::SingularDesign { ratio: 0.0 }),
        };

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = evaluate(x, y, &offset, &w, &state.beta + &step * t);
            if cand.loglik.is_finite() && cand.loglik >= state.loglik - 1e-12 * (1.0 + state.loglik.abs()) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                previous = Some(state.loglik);
                state = cand;
            }
            None => {
                // No ascent possible: numerically at the optimum or stuck.
                if score_norm < opts.score_tol {
                    return Ok(finish(&state, iter, true, score_norm));
                }
                let last = finish(&state, iter, false, score_norm);
                return Err(LogisticError::NonConvergence {
                    iterations: iter,
                    score_norm,
                    last: Box::new(last),
                });
            }
        }
    }
    let last = finish(&state, opts.max_iter, false, score_norm);
    Err(LogisticError::NonConvergence {
        iterations: opts.max_iter,
        score_norm,
        last: Box::new(last),
    })
}
