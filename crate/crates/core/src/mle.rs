//! Joint maximum likelihood for the sample distribution of `(Y, M)` given
//! covariates, with multi-start quasi-Newton optimization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{adjust_to_star, g_from_predictors, g_partials, CorrectionError, LinearPredictors, PrevalenceDesign, Theta};
use crate::design::DesignPartition;
use crate::fit::{Diagnostics, FitResult, Method};
use crate::linalg::{eigen_range, inverse_checked, symmetrize, LinalgError, MAX_CONDITION};
use crate::logistic::{expit, softplus};
use crate::mest::fit_m;
use crate::optim::{minimize_from, BfgsOptions};

/// Converged optima further apart than this in log-likelihood are flagged.
pub const DISPERSION_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MlError {
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("no start converged: {}", .traces.join("; "))]
    NonConvergence { traces: Vec<String> },
    #[error("Hessian is not negative definite after ridge repair (eigenvalues of -H in [{min:.3e}, {max:.3e}])")]
    NotNegativeDefinite { min: f64, max: f64 },
    #[error("singular information: {0}")]
    Singular(#[from] LinalgError),
    #[error("invalid options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Hessian,
    Sandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlOptions {
    pub n_starts: usize,
    pub perturb_sd: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub covariance: CovarianceKind,
}

impl Default for MlOptions {
    fn default() -> Self {
        MlOptions {
            n_starts: 10,
            perturb_sd: 0.5,
            max_iter: 500,
            grad_tol: 1e-7,
            seed: 0,
            covariance: CovarianceKind::Sandwich,
        }
    }
}

impl MlOptions {
    fn validate(&self) -> Result<(), MlError> {
        if self.n_starts == 0 {
            return Err(MlError::Options("n_starts must be at least 1".into()));
        }
        if !(self.perturb_sd >= 0.0 && self.perturb_sd.is_finite()) {
            return Err(MlError::Options("perturb_sd must be non-negative".into()));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(MlError::Options("grad_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Per-unit quantities shared by the likelihood and its gradient.
struct UnitTerms {
    /// Sample-scale outcome logit with the mediator marginalized out.
    t: DVector<f64>,
    /// Mediator logit including the offset at the observed outcome.
    u: DVector<f64>,
    lp: LinearPredictors,
}

fn unit_terms(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<UnitTerms, CorrectionError> {
    let lp = LinearPredictors::compute(theta, part, prev)?;
    let n = part.n();
    let t = DVector::from_iterator(
        n,
        (0..n).map(|i| lp.eta0_star[i] + g_from_predictors(lp.eta0[i], lp.eta_plus[i], lp.eta_m[i])),
    );
    let u = &lp.eta_m + lp.offsets(&part.y);
    Ok(UnitTerms { t, u, lp })
}

/// Joint log-likelihood of `(Y, M)` in the selected sample.
pub fn loglik(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<f64, CorrectionError> {
    let terms = unit_terms(theta, part, prev)?;
    Ok((0..part.n())
        .map(|i| {
            let (t, u) = (terms.t[i], terms.u[i]);
            part.y[i] * t - softplus(t) + part.m[i] * u - softplus(u)
        })
        .sum())
}

/// Score weights per unit: the per-unit score is
/// `(c0 x_y0, c1 xbar_y0, cm x_m)`.
struct ScoreWeights {
    c0: DVector<f64>,
    c1: DVector<f64>,
    cm: DVector<f64>,
}

fn score_weights(terms: &UnitTerms, part: &DesignPartition) -> ScoreWeights {
    let lp = &terms.lp;
    let n = part.n();
    let mut w = ScoreWeights {
        c0: DVector::zeros(n),
        c1: DVector::zeros(n),
        cm: DVector::zeros(n),
    };
    for i in 0..n {
        let ry = part.y[i] - expit(terms.t[i]);
        let rm = part.m[i] - expit(terms.u[i]);
        let gp = g_partials(lp.eta0[i], lp.eta_plus[i], lp.eta_m[i]);
        let ep = expit(lp.eta_plus[i]);
        let v0 = expit(lp.eta0[i]) - ep;
        let v1 = -ep;
        w.c0[i] = ry * (1.0 + gp.d_beta_int) + rm * v0;
        w.c1[i] = ry * gp.d_beta_m + rm * (part.y[i] + v1);
        w.cm[i] = ry * gp.d_delta_int + rm;
    }
    w
}

fn stack_score(w: &ScoreWeights, part: &DesignPartition) -> DVector<f64> {
    let layout = &part.layout;
    let (d0, d1, dm) = (layout.d_beta0, layout.d_beta1(), layout.d_delta());
    let mut out = DVector::zeros(d0 + d1 + dm);
    out.rows_mut(0, d0).copy_from(&part.x_y0.tr_mul(&w.c0));
    out.rows_mut(d0, d1).copy_from(&part.xbar_y0.tr_mul(&w.c1));
    out.rows_mut(d0 + d1, dm).copy_from(&part.x_m.tr_mul(&w.cm));
    out
}

/// Per-unit score contributions, one row per unit.
pub fn gradient_units(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DMatrix<f64>, CorrectionError> {
    let layout = &part.layout;
    let w = score_weights(&unit_terms(theta, part, prev)?, part);
    let (d0, d1, dm) = (layout.d_beta0, layout.d_beta1(), layout.d_delta());
    let mut out = DMatrix::zeros(part.n(), d0 + d1 + dm);
    for i in 0..part.n() {
        for j in 0..d0 {
            out[(i, j)] = w.c0[i] * part.x_y0[(i, j)];
        }
        for j in 0..d1 {
            out[(i, d0 + j)] = w.c1[i] * part.xbar_y0[(i, j)];
        }
        for j in 0..dm {
            out[(i, d0 + d1 + j)] = w.cm[i] * part.x_m[(i, j)];
        }
    }
    Ok(out)
}

pub fn gradient(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DVector<f64>, CorrectionError> {
    let terms = unit_terms(theta, part, prev)?;
    Ok(stack_score(&score_weights(&terms, part), part))
}

/// Log-likelihood and gradient from one pass over the units.
pub fn loglik_and_gradient(
    theta: &Theta,
    part: &DesignPartition,
    prev: &PrevalenceDesign,
) -> Result<(f64, DVector<f64>), CorrectionError> {
    let terms = unit_terms(theta, part, prev)?;
    let ll = (0..part.n())
        .map(|i| {
            let (t, u) = (terms.t[i], terms.u[i]);
            part.y[i] * t - softplus(t) + part.m[i] * u - softplus(u)
        })
        .sum();
    Ok((ll, stack_score(&score_weights(&terms, part), part)))
}

/// Hessian of the log-likelihood by central differences of the analytic
/// gradient, symmetrized.
pub fn hessian(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign, step: f64) -> Result<DMatrix<f64>, CorrectionError> {
    let layout = &part.layout;
    let x = theta.to_vector();
    let d = x.len();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let gp = gradient(&Theta::from_vector(&xp, layout)?, part, prev)?;
        let gm = gradient(&Theta::from_vector(&xm, layout)?, part, prev)?;
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok(symmetrize(&h))
}

const HESSIAN_STEP: f64 = 1e-5;

/// Inverse of `-H`, with one ridge repair if `-H` is not positive definite
/// or too ill-conditioned to invert.
fn negative_hessian_inverse(h: &DMatrix<f64>) -> Result<DMatrix<f64>, MlError> {
    let neg = -h;
    let (min, max) = eigen_range(&neg);
    let neg = if min > 0.0 && max / min < MAX_CONDITION {
        neg
    } else {
        let d = neg.nrows();
        let repaired = &neg + DMatrix::identity(d, d) * (1e-8 * neg.norm());
        let (rmin, rmax) = eigen_range(&repaired);
        if rmin <= 0.0 {
            return Err(MlError::NotNegativeDefinite { min: rmin, max: rmax });
        }
        repaired
    };
    Ok(symmetrize(&inverse_checked(&neg)?))
}

pub fn covariance_ml(
    theta: &Theta,
    part: &DesignPartition,
    prev: &PrevalenceDesign,
    kind: CovarianceKind,
) -> Result<DMatrix<f64>, MlError> {
    let h = hessian(theta, part, prev, HESSIAN_STEP)?;
    let inv = negative_hessian_inverse(&h)?;
    Ok(match kind {
        CovarianceKind::Hessian => inv,
        CovarianceKind::Sandwich => {
            let s = gradient_units(theta, part, prev)?;
            let q = s.transpose() * &s;
            symmetrize(&(&inv * q * &inv))
        }
    })
}

#[derive(Debug, Clone)]
struct StartOutcome {
    theta: DVector<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
    message: String,
}

fn run_start(x0: &DVector<f64>, h0: Option<&DMatrix<f64>>, part: &DesignPartition, prev: &PrevalenceDesign, opts: &MlOptions) -> StartOutcome {
    let layout = &part.layout;
    let objective = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        match Theta::from_vector(x, layout) {
            Ok(th) => match loglik_and_gradient(&th, part, prev) {
                Ok((l, g)) => (-l, -g),
                Err(_) => (f64::INFINITY, DVector::from_element(x.len(), f64::NAN)),
            },
            Err(_) => (f64::INFINITY, DVector::from_element(x.len(), f64::NAN)),
        }
    };
    let bfgs = BfgsOptions {
        grad_tol: opts.grad_tol,
        max_iter: opts.max_iter,
        ..BfgsOptions::default()
    };
    let r = minimize_from(objective, x0, h0, &bfgs);
    StartOutcome {
        loglik: -r.f,
        converged: r.converged && r.f.is_finite(),
        iterations: r.iterations,
        grad_norm: r.grad.amax(),
        message: r.message,
        theta: r.x,
    }
}

/// Start `k` is the center for `k = 0` and a Normal perturbation of it
/// otherwise, drawn from stream `k` of the option seed.
pub fn starting_points(center: &DVector<f64>, opts: &MlOptions) -> Vec<DVector<f64>> {
    let normal = Normal::new(0.0, opts.perturb_sd.max(0.0)).expect("validated sd");
    (0..opts.n_starts)
        .map(|k| {
            if k == 0 || opts.perturb_sd == 0.0 {
                return center.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            center.map(|c| c + normal.sample(&mut rng))
        })
        .collect()
}

pub fn fit_ml(part: &DesignPartition, prev: &PrevalenceDesign, opts: &MlOptions) -> Result<FitResult, MlError> {
    opts.validate()?;
    let layout = &part.layout;
    let mut messages = Vec::new();
    let center = match fit_m(part, prev) {
        Ok(m) => m.theta.to_vector(),
        Err(e) => {
            messages.push(format!("M-estimate unavailable ({e}); starting from zero"));
            DVector::zeros(layout.d_theta())
        }
    };
    // Curvature at the center seeds every start's inverse-Hessian estimate.
    let h0 = Theta::from_vector(&center, layout)
        .ok()
        .and_then(|th| hessian(&th, part, prev, HESSIAN_STEP).ok())
        .and_then(|h| negative_hessian_inverse(&h).ok());
    let starts = starting_points(&center, opts);
    let outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .map(|x0| run_start(x0, h0.as_ref(), part, prev, opts))
        .collect();

    let converged: Vec<(usize, &StartOutcome)> = outcomes.iter().enumerate().filter(|(_, o)| o.converged).collect();
    let Some(&(best_idx, best)) = converged
        .iter()
        .reduce(|a, b| if b.1.loglik > a.1.loglik { b } else { a })
    else {
        return Err(MlError::NonConvergence {
            traces: outcomes
                .iter()
                .enumerate()
                .map(|(k, o)| format!("start {k}: {} after {} iterations, |grad| {:.3e}", o.message, o.iterations, o.grad_norm))
                .collect(),
        });
    };
    let (lo, hi) = converged
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, o)| (lo.min(o.loglik), hi.max(o.loglik)));
    let dispersion = hi - lo > DISPERSION_TOL;
    if dispersion {
        messages.push(format!("converged optima differ by {:.3e} in log-likelihood", hi - lo));
    }
    messages.push(format!("best start {best_idx} of {}", opts.n_starts));

    let theta = Theta::from_vector(&best.theta, layout)?;
    let covariance = covariance_ml(&theta, part, prev, opts.covariance)?;
    Ok(FitResult {
        method: Method::Ml,
        beta_star_hat: adjust_to_star(&theta.beta, layout, prev)?,
        theta,
        covariance,
        layout: layout.clone(),
        prevalence: prev.clone(),
        converged: true,
        loglik: best.loglik,
        diagnostics: Diagnostics {
            iterations: best.iterations,
            score_norm: best.grad_norm,
            start_logliks: outcomes.iter().map(|o| o.converged.then_some(o.loglik)).collect(),
            dispersion,
            separation_warning: false,
            messages,
        },
    })
}
