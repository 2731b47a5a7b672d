//! Estimator output shared by the three fitting methods.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{adjust_to_star, PrevalenceDesign, Theta};
use crate::design::DesignLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "M")]
    M,
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "W")]
    Weighting,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::M, Method::Ml, Method::Weighting];

    pub fn label(self) -> &'static str {
        match self {
            Method::M => "M",
            Method::Ml => "ML",
            Method::Weighting => "W",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Optimizer and fitting diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Sup-norm of the estimating function or gradient at the estimate.
    pub score_norm: f64,
    /// Final log-likelihood of every ML start, in start order.
    #[serde(default)]
    pub start_logliks: Vec<Option<f64>>,
    /// Converged ML optima disagree by more than the dispersion tolerance.
    #[serde(default)]
    pub dispersion: bool,
    #[serde(default)]
    pub separation_warning: bool,
    #[serde(default)]
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    /// Population-scale estimates.
    pub theta: Theta,
    /// Sample-scale outcome coefficients, `adjust_to_star(theta.beta)`.
    pub beta_star_hat: DVector<f64>,
    /// Covariance of `(beta, delta)`.
    pub covariance: DMatrix<f64>,
    pub layout: DesignLayout,
    pub prevalence: PrevalenceDesign,
    pub converged: bool,
    /// Joint log-likelihood of the sample at `theta`.
    pub loglik: f64,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn theta_vector(&self) -> DVector<f64> {
        self.theta.to_vector()
    }

    pub fn se(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.layout.parameter_names()
    }

    /// Serializable form for fit artifacts.
    pub fn to_record(&self) -> FitRecord {
        let names = self.parameter_names();
        FitRecord {
            method: self.method,
            parameter_names: names,
            beta: self.theta.beta.iter().copied().collect(),
            beta_star: self.beta_star_hat.iter().copied().collect(),
            delta: self.theta.delta.iter().copied().collect(),
            covariance: self.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
            layout: self.layout.clone(),
            prevalence: self.prevalence.clone(),
            converged: self.converged,
            loglik: self.loglik,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("fit record is inconsistent: {0}")]
    Inconsistent(String),
}

/// JSON-friendly mirror of [`FitResult`]. Carries both coefficient scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub method: Method,
    pub parameter_names: Vec<String>,
    /// Population-scale outcome coefficients.
    pub beta: Vec<f64>,
    /// Sample-scale outcome coefficients.
    pub beta_star: Vec<f64>,
    pub delta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub layout: DesignLayout,
    pub prevalence: PrevalenceDesign,
    pub converged: bool,
    pub loglik: f64,
    pub diagnostics: Diagnostics,
}

impl FitRecord {
    pub fn into_fit(self) -> Result<FitResult, RecordError> {
        let bad = |m: &str| RecordError::Inconsistent(m.to_string());
        let d = self.layout.d_theta();
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(bad("covariance dimension"));
        }
        let theta = Theta::new(
            DVector::from_vec(self.beta),
            DVector::from_vec(self.delta),
            &self.layout,
        )
        .map_err(|e| RecordError::Inconsistent(e.to_string()))?;
        let beta_star = adjust_to_star(&theta.beta, &self.layout, &self.prevalence)
            .map_err(|e| RecordError::Inconsistent(e.to_string()))?;
        if beta_star
            .iter()
            .zip(&self.beta_star)
            .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs()))
        {
            return Err(bad("beta_star does not match beta and prevalence"));
        }
        Ok(FitResult {
            method: self.method,
            theta,
            beta_star_hat: beta_star,
            covariance: DMatrix::from_row_iterator(d, d, self.covariance.into_iter().flatten()),
            layout: self.layout,
            prevalence: self.prevalence,
            converged: self.converged,
            loglik: self.loglik,
            diagnostics: self.diagnostics,
        })
    }
}
