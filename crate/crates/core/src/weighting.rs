//! Inverse-probability weighted fits of the population models.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::correction::{adjust_to_star, CorrectionError, PrevalenceDesign, Theta};
use crate::design::DesignPartition;
use crate::fit::{Diagnostics, FitResult, Method};
use crate::linalg::{spd_inverse, symmetrize, weighted_gram, LinalgError};
use crate::logistic::{fit_logistic, GlmFit, LogisticError};
use crate::mle::loglik;

#[derive(Debug, Error)]
pub enum WeightingError {
    #[error("outcome model: {0}")]
    Outcome(LogisticError),
    #[error("mediator model: {0}")]
    Mediator(LogisticError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("singular information: {0}")]
    Singular(#[from] LinalgError),
}

/// `pi_b / p_b` for cases and `(1 - pi_b)/(1 - p_b)` for controls.
pub fn case_control_weights(part: &DesignPartition, prev: &PrevalenceDesign) -> DVector<f64> {
    DVector::from_iterator(
        part.n(),
        part.y.iter().zip(&part.stratum).map(|(&y, &b)| {
            if y == 1.0 {
                prev.pi[b] / prev.p[b]
            } else {
                (1.0 - prev.pi[b]) / (1.0 - prev.p[b])
            }
        }),
    )
}

/// `I^{-1} (sum w_i^2 s_i s_i') I^{-1}` for one weighted logistic fit.
fn weighted_sandwich(x: &DMatrix<f64>, r: &DVector<f64>, w: &DVector<f64>, fit: &GlmFit) -> Result<DMatrix<f64>, LinalgError> {
    let bread = spd_inverse(&fit.naive_information)?;
    let resid = DVector::from_iterator(r.len(), (0..r.len()).map(|i| {
        let s = w[i] * (r[i] - fit.fitted_prob[i]);
        s * s
    }));
    let meat = weighted_gram(x, &resid);
    Ok(symmetrize(&(&bread * meat * &bread)))
}

pub fn fit_weighting(part: &DesignPartition, prev: &PrevalenceDesign) -> Result<FitResult, WeightingError> {
    let layout = &part.layout;
    let w = case_control_weights(part, prev);
    let outcome = fit_logistic(&part.x_y, &part.y, None, Some(&w)).map_err(WeightingError::Outcome)?;
    let mediator = fit_logistic(&part.x_m, &part.m, None, Some(&w)).map_err(WeightingError::Mediator)?;

    let v_y = weighted_sandwich(&part.x_y, &part.y, &w, &outcome)?;
    let v_m = weighted_sandwich(&part.x_m, &part.m, &w, &mediator)?;
    let (dy, dm) = (layout.d_beta(), layout.d_delta());
    let mut covariance = DMatrix::zeros(dy + dm, dy + dm);
    covariance.view_mut((0, 0), (dy, dy)).copy_from(&v_y);
    covariance.view_mut((dy, dy), (dm, dm)).copy_from(&v_m);

    let theta = Theta::new(outcome.coefficients.clone(), mediator.coefficients.clone(), layout)?;
    let separation_warning = outcome.separation_warning || mediator.separation_warning;
    Ok(FitResult {
        method: Method::Weighting,
        beta_star_hat: adjust_to_star(&theta.beta, layout, prev)?,
        loglik: loglik(&theta, part, prev)?,
        theta,
        covariance,
        layout: layout.clone(),
        prevalence: prev.clone(),
        converged: outcome.converged && mediator.converged,
        diagnostics: Diagnostics {
            iterations: outcome.iterations + mediator.iterations,
            score_norm: outcome.score_norm.max(mediator.score_norm),
            separation_warning,
            messages: if separation_warning {
                vec!["linear predictor beyond separation bound; estimates may be unstable".into()]
            } else {
                Vec::new()
            },
            ..Diagnostics::default()
        },
    })
}
