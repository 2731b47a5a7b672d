//! Two-step M-estimation with the joint sandwich covariance.
//!
//! Step 1 fits the outcome model to the sample by plain logistic regression
//! and moves the coefficients to the population scale. Step 2 fits the
//! mediator model with the outcome-dependent offset held fixed. The
//! covariance accounts for the plug-in of step 1 into step 2.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::correction::{adjust_to_star, unadjust_from_star, CorrectionError, LinearPredictors, PrevalenceDesign, Theta};
use crate::design::DesignPartition;
use crate::fit::{Diagnostics, FitResult, Method};
use crate::linalg::{inverse_checked, symmetrize, weighted_cross, weighted_gram, LinalgError};
use crate::logistic::{expit, fit_logistic, LogisticError};
use crate::mle::loglik;

#[derive(Debug, Error)]
pub enum MEstError {
    #[error("outcome step: {0}")]
    OutcomeStep(LogisticError),
    #[error("mediator step: {0}")]
    MediatorStep(LogisticError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("singular information: {0}")]
    Singular(#[from] LinalgError),
}

/// Per-unit estimating functions, one row per unit: `(s_y,i, s_m,i)`.
pub fn psi_units(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DMatrix<f64>, CorrectionError> {
    let lp = LinearPredictors::compute(theta, part, prev)?;
    let offsets = lp.offsets(&part.y);
    let (dy, dm) = (part.layout.d_beta(), part.layout.d_delta());
    let mut out = DMatrix::zeros(part.n(), dy + dm);
    for i in 0..part.n() {
        let ry = part.y[i] - expit(lp.eta_star[i]);
        let rm = part.m[i] - expit(lp.eta_m[i] + offsets[i]);
        for j in 0..dy {
            out[(i, j)] = part.x_y[(i, j)] * ry;
        }
        for j in 0..dm {
            out[(i, dy + j)] = part.x_m[(i, j)] * rm;
        }
    }
    Ok(out)
}

/// Joint estimating function `psi(theta)`, summed over units.
pub fn psi(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DVector<f64>, CorrectionError> {
    Ok(psi_units(theta, part, prev)?.row_sum().transpose())
}

/// Derivative of `psi / n` with respect to `(beta, delta)`.
pub fn a_matrix(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DMatrix<f64>, CorrectionError> {
    let layout = &part.layout;
    let lp = LinearPredictors::compute(theta, part, prev)?;
    let offsets = lp.offsets(&part.y);
    let n = part.n();
    let (dy, dm, d0) = (layout.d_beta(), layout.d_delta(), layout.d_beta0);

    let w_y = lp.eta_star.map(|e| {
        let p = expit(e);
        p * (1.0 - p)
    });
    let w_m = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let p = expit(lp.eta_m[i] + offsets[i]);
            p * (1.0 - p)
        }),
    );
    // Derivative of the offset with respect to beta: (x_y0 v0 | xbar (y + v1)).
    let mut d = DMatrix::zeros(n, dy);
    for i in 0..n {
        let ep = expit(lp.eta_plus[i]);
        let v0 = expit(lp.eta0[i]) - ep;
        let v1 = -ep;
        for j in 0..d0 {
            d[(i, j)] = part.x_y0[(i, j)] * v0;
        }
        for j in 0..layout.d_beta1() {
            d[(i, d0 + j)] = part.xbar_y0[(i, j)] * (part.y[i] + v1);
        }
    }

    let mut a = DMatrix::zeros(dy + dm, dy + dm);
    a.view_mut((0, 0), (dy, dy)).copy_from(&(-weighted_gram(&part.x_y, &w_y)));
    a.view_mut((dy, 0), (dm, dy)).copy_from(&(-weighted_cross(&part.x_m, &w_m, &d)));
    a.view_mut((dy, dy), (dm, dm)).copy_from(&(-weighted_gram(&part.x_m, &w_m)));
    Ok(a / n as f64)
}

/// `(1/n) sum psi_i psi_i'`.
pub fn b_matrix(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DMatrix<f64>, CorrectionError> {
    let s = psi_units(theta, part, prev)?;
    Ok(s.transpose() * &s / part.n() as f64)
}

/// `(1/n) A^{-1} B A^{-T}`.
pub fn sandwich_m(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<DMatrix<f64>, MEstError> {
    let a_inv = inverse_checked(&a_matrix(theta, part, prev)?)?;
    let b = b_matrix(theta, part, prev)?;
    Ok(symmetrize(&(&a_inv * b * a_inv.transpose())) / part.n() as f64)
}

pub fn fit_m(part: &DesignPartition, prev: &PrevalenceDesign) -> Result<FitResult, MEstError> {
    let layout = &part.layout;
    let outcome = fit_logistic(&part.x_y, &part.y, None, None).map_err(MEstError::OutcomeStep)?;
    let beta = unadjust_from_star(&outcome.coefficients, layout, prev)?;

    let stage = Theta::new(beta.clone(), DVector::zeros(layout.d_delta()), layout)?;
    let offsets = LinearPredictors::compute(&stage, part, prev)?.offsets(&part.y);
    let mediator = fit_logistic(&part.x_m, &part.m, Some(&offsets), None).map_err(MEstError::MediatorStep)?;

    let theta = Theta::new(beta, mediator.coefficients.clone(), layout)?;
    let covariance = sandwich_m(&theta, part, prev)?;
    let score_norm = psi(&theta, part, prev)?.amax();
    let mut messages = Vec::new();
    let separation_warning = outcome.separation_warning || mediator.separation_warning;
    if separation_warning {
        messages.push("linear predictor beyond separation bound; estimates may be unstable".to_string());
    }
    Ok(FitResult {
        method: Method::M,
        beta_star_hat: adjust_to_star(&theta.beta, layout, prev)?,
        loglik: loglik(&theta, part, prev)?,
        theta,
        covariance,
        layout: layout.clone(),
        prevalence: prev.clone(),
        converged: outcome.converged && mediator.converged,
        diagnostics: Diagnostics {
            iterations: outcome.iterations + mediator.iterations,
            score_norm,
            separation_warning,
            messages,
            ..Diagnostics::default()
        },
    })
}
