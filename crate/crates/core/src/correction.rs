//! Case-control corrections: stratum correction factors, the sample-scale
//! outcome coefficients, the mediator-model offset and the term that
//! marginalizes the mediator out of the selected-sample outcome model.
//!
//! All functions here take population-scale coefficients. The conversion to
//! the sample scale happens only through [`adjust_to_star`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{expand_beta, DesignLayout, DesignPartition};
use crate::logistic::{expit, softplus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error("stratum {stratum} has {cases} cases and {controls} controls; both must be positive")]
    DegenerateStratum {
        stratum: usize,
        cases: usize,
        controls: usize,
    },
    #[error("stratum {stratum}: prevalence {value} is not inside (0, 1)")]
    InvalidProportion { stratum: usize, value: f64 },
    #[error("prevalence design has {found} strata, model has {expected}")]
    StratumCount { expected: usize, found: usize },
    #[error("expected length {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite parameter value")]
    NonFinite,
}

/// Population prevalences, sample case fractions and the resulting
/// per-stratum correction factors `k_b` (index b-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceDesign {
    pub pi: Vec<f64>,
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    pub log_k: Vec<f64>,
}

impl PrevalenceDesign {
    pub fn from_proportions(pi: &[f64], p: &[f64]) -> Result<Self, CorrectionError> {
        if pi.len() != p.len() || pi.is_empty() {
            return Err(CorrectionError::Dimension {
                expected: pi.len(),
                found: p.len(),
            });
        }
        for (b, (&a, &c)) in pi.iter().zip(p).enumerate() {
            for v in [a, c] {
                if !(v > 0.0 && v < 1.0) {
                    return Err(CorrectionError::InvalidProportion { stratum: b + 1, value: v });
                }
            }
        }
        let log_k: Vec<f64> = pi
            .iter()
            .zip(p)
            .map(|(&pi, &p)| p.ln() - (-p).ln_1p() + (-pi).ln_1p() - pi.ln())
            .collect();
        Ok(PrevalenceDesign {
            pi: pi.to_vec(),
            p: p.to_vec(),
            k: log_k.iter().map(|l| l.exp()).collect(),
            log_k,
        })
    }

    /// Sample-scale correction for a unit in 0-based stratum `b`.
    pub fn log_k(&self, b: usize) -> f64 {
        self.log_k[b]
    }

    pub fn n_strata(&self) -> usize {
        self.pi.len()
    }

    /// Uses the case fractions observed in `part`.
    pub fn for_sample(pi: &[f64], part: &DesignPartition) -> Result<Self, CorrectionError> {
        let n_b = part.layout.n_strata;
        if pi.len() != n_b {
            return Err(CorrectionError::StratumCount {
                expected: n_b,
                found: pi.len(),
            });
        }
        let mut cases = vec![0; n_b];
        let mut controls = vec![0; n_b];
        for (&y, &b) in part.y.iter().zip(&part.stratum) {
            if y == 1.0 {
                cases[b] += 1;
            } else {
                controls[b] += 1;
            }
        }
        compute_prevalence_design(pi, &cases, &controls)
    }
}

/// `k_b = {p_b/(1-p_b)}{(1-pi_b)/pi_b}` with `p_b` the sample case fraction.
pub fn compute_prevalence_design(
    pi: &[f64],
    case_counts: &[usize],
    control_counts: &[usize],
) -> Result<PrevalenceDesign, CorrectionError> {
    if case_counts.len() != pi.len() || control_counts.len() != pi.len() {
        return Err(CorrectionError::Dimension {
            expected: pi.len(),
            found: case_counts.len().min(control_counts.len()),
        });
    }
    for (b, (&cases, &controls)) in case_counts.iter().zip(control_counts).enumerate() {
        if cases == 0 || controls == 0 {
            return Err(CorrectionError::DegenerateStratum {
                stratum: b + 1,
                cases,
                controls,
            });
        }
    }
    let p: Vec<f64> = case_counts
        .iter()
        .zip(control_counts)
        .map(|(&c, &k)| c as f64 / (c + k) as f64)
        .collect();
    PrevalenceDesign::from_proportions(pi, &p)
}

/// Joint parameter vector: outcome coefficients (mediator-free block first)
/// and mediator coefficients, both on the population scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
}

impl Theta {
    pub fn new(beta: DVector<f64>, delta: DVector<f64>, layout: &DesignLayout) -> Result<Self, CorrectionError> {
        if beta.len() != layout.d_beta() {
            return Err(CorrectionError::Dimension {
                expected: layout.d_beta(),
                found: beta.len(),
            });
        }
        if delta.len() != layout.d_delta() {
            return Err(CorrectionError::Dimension {
                expected: layout.d_delta(),
                found: delta.len(),
            });
        }
        if beta.iter().chain(delta.iter()).any(|v| !v.is_finite()) {
            return Err(CorrectionError::NonFinite);
        }
        Ok(Theta { beta, delta })
    }

    pub fn zeros(layout: &DesignLayout) -> Self {
        Theta {
            beta: DVector::zeros(layout.d_beta()),
            delta: DVector::zeros(layout.d_delta()),
        }
    }

    pub fn from_vector(v: &DVector<f64>, layout: &DesignLayout) -> Result<Self, CorrectionError> {
        if v.len() != layout.d_theta() {
            return Err(CorrectionError::Dimension {
                expected: layout.d_theta(),
                found: v.len(),
            });
        }
        Theta::new(
            v.rows(0, layout.d_beta()).into_owned(),
            v.rows(layout.d_beta(), layout.d_delta()).into_owned(),
            layout,
        )
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.beta.len() + self.delta.len(),
            self.beta.iter().chain(self.delta.iter()).copied(),
        )
    }

    pub fn beta0(&self, layout: &DesignLayout) -> DVector<f64> {
        self.beta.rows(0, layout.d_beta0).into_owned()
    }

    pub fn beta1(&self, layout: &DesignLayout) -> DVector<f64> {
        self.beta.rows(layout.d_beta0, layout.d_beta1()).into_owned()
    }

    /// `beta0 + expand(beta1)`: outcome coefficients when the mediator is 1.
    pub fn beta_plus(&self, layout: &DesignLayout) -> DVector<f64> {
        self.beta0(layout) + expand_beta(&self.beta1(layout), layout).expect("layout-consistent theta")
    }
}

fn check_strata(layout: &DesignLayout, prev: &PrevalenceDesign) -> Result<(), CorrectionError> {
    if layout.n_strata != prev.n_strata() {
        return Err(CorrectionError::StratumCount {
            expected: layout.n_strata,
            found: prev.n_strata(),
        });
    }
    Ok(())
}

/// Population-scale outcome coefficients to the selected-sample scale.
///
/// The intercept moves by `log k_1`. Under reference-cell coding a unit in
/// stratum b >= 2 gets intercept plus its indicator, so the indicator moves
/// by `log k_b - log k_1`.
pub fn adjust_to_star(
    beta: &DVector<f64>,
    layout: &DesignLayout,
    prev: &PrevalenceDesign,
) -> Result<DVector<f64>, CorrectionError> {
    check_strata(layout, prev)?;
    if beta.len() != layout.d_beta() {
        return Err(CorrectionError::Dimension {
            expected: layout.d_beta(),
            found: beta.len(),
        });
    }
    let mut out = beta.clone();
    out[0] += prev.log_k[0];
    for b in 2..=layout.n_strata {
        out[layout.stratum_column(b)] += prev.log_k[b - 1] - prev.log_k[0];
    }
    Ok(out)
}

pub fn unadjust_from_star(
    beta_star: &DVector<f64>,
    layout: &DesignLayout,
    prev: &PrevalenceDesign,
) -> Result<DVector<f64>, CorrectionError> {
    check_strata(layout, prev)?;
    if beta_star.len() != layout.d_beta() {
        return Err(CorrectionError::Dimension {
            expected: layout.d_beta(),
            found: beta_star.len(),
        });
    }
    let mut out = beta_star.clone();
    out[0] -= prev.log_k[0];
    for b in 2..=layout.n_strata {
        out[layout.stratum_column(b)] -= prev.log_k[b - 1] - prev.log_k[0];
    }
    Ok(out)
}

/// Mediator-model offset from the two outcome linear predictors
/// `eta0 = x_y0'beta0` and `eta_plus = x_y0'beta_plus`.
#[inline]
pub fn offset_from_predictors(y: f64, eta0: f64, eta_plus: f64) -> f64 {
    y * (eta_plus - eta0) - (softplus(eta_plus) - softplus(eta0))
}

/// `logit P(M=1 | Y=0)` and `logit P(M=1 | Y=1)` shifted by the mediator
/// predictor; `g` is the difference of their softplus transforms.
#[inline]
fn mediator_logits(eta0: f64, eta_plus: f64, eta_m: f64) -> (f64, f64) {
    let u0 = eta_m + offset_from_predictors(0.0, eta0, eta_plus);
    let u1 = eta_m + offset_from_predictors(1.0, eta0, eta_plus);
    (u0, u1)
}

/// `g = log{(q1 q2 q3 + q4)/(q2 q3 + q4)}` evaluated as
/// `softplus(u1) - softplus(u0)`, which never forms an exponential of a
/// positive argument.
#[inline]
pub fn g_from_predictors(eta0: f64, eta_plus: f64, eta_m: f64) -> f64 {
    let (u0, u1) = mediator_logits(eta0, eta_plus, eta_m);
    softplus(u1) - softplus(u0)
}

/// Derivatives of `g` with respect to the outcome intercept, the mediator
/// main effect and the mediator-model intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPartials {
    pub d_beta_int: f64,
    pub d_beta_m: f64,
    pub d_delta_int: f64,
}

#[inline]
pub fn g_partials(eta0: f64, eta_plus: f64, eta_m: f64) -> GPartials {
    let (u0, u1) = mediator_logits(eta0, eta_plus, eta_m);
    let (s0, s1) = (expit(u0), expit(u1));
    let (e0, ep) = (expit(eta0), expit(eta_plus));
    GPartials {
        d_beta_int: (s1 - s0) * (e0 - ep),
        d_beta_m: s1 * (1.0 - ep) + s0 * ep,
        d_delta_int: s1 - s0,
    }
}

fn dot_checked(x: &DVector<f64>, b: &DVector<f64>) -> Result<f64, CorrectionError> {
    if x.len() != b.len() {
        return Err(CorrectionError::Dimension {
            expected: b.len(),
            found: x.len(),
        });
    }
    Ok(x.dot(b))
}

/// `o(y, x_y0; beta) = log P(Y=y | M=1) - log P(Y=y | M=0)` for one unit.
pub fn offset_o(y: f64, x_y0: &DVector<f64>, theta: &Theta, layout: &DesignLayout) -> Result<f64, CorrectionError> {
    let eta0 = dot_checked(x_y0, &theta.beta0(layout))?;
    let eta_plus = dot_checked(x_y0, &theta.beta_plus(layout))?;
    Ok(offset_from_predictors(y, eta0, eta_plus))
}

/// `g(x_y0, x_m; beta, delta) = log P(M=0 | Y=0) / P(M=0 | Y=1)`.
pub fn g_term(
    x_y0: &DVector<f64>,
    x_m: &DVector<f64>,
    theta: &Theta,
    layout: &DesignLayout,
) -> Result<f64, CorrectionError> {
    let eta0 = dot_checked(x_y0, &theta.beta0(layout))?;
    let eta_plus = dot_checked(x_y0, &theta.beta_plus(layout))?;
    let eta_m = dot_checked(x_m, &theta.delta)?;
    Ok(g_from_predictors(eta0, eta_plus, eta_m))
}

/// Log-odds of the outcome in the selected sample with the mediator
/// marginalized out: `x_y0'beta0* + g`. `stratum` is 1-based.
pub fn marginal_outcome_logit(
    x_y0: &DVector<f64>,
    x_m: &DVector<f64>,
    theta: &Theta,
    prev: &PrevalenceDesign,
    stratum: usize,
    layout: &DesignLayout,
) -> Result<f64, CorrectionError> {
    if stratum == 0 || stratum > prev.n_strata() {
        return Err(CorrectionError::StratumCount {
            expected: prev.n_strata(),
            found: stratum,
        });
    }
    let beta_star = adjust_to_star(&theta.beta, layout, prev)?;
    let beta0_star = beta_star.rows(0, layout.d_beta0).into_owned();
    let lin = dot_checked(x_y0, &beta0_star)?;
    Ok(lin + g_term(x_y0, x_m, theta, layout)?)
}

/// Per-unit linear predictors shared by the estimators.
#[derive(Debug, Clone)]
pub struct LinearPredictors {
    /// `X_y0 beta0`.
    pub eta0: DVector<f64>,
    /// `X_y0 beta_plus`.
    pub eta_plus: DVector<f64>,
    /// `X_m delta`.
    pub eta_m: DVector<f64>,
    /// `X_y beta*` (sample scale, observed mediator).
    pub eta_star: DVector<f64>,
    /// `X_y0 beta0*` (sample scale, mediator at zero).
    pub eta0_star: DVector<f64>,
}

impl LinearPredictors {
    pub fn compute(theta: &Theta, part: &DesignPartition, prev: &PrevalenceDesign) -> Result<Self, CorrectionError> {
        let layout = &part.layout;
        let beta_star = adjust_to_star(&theta.beta, layout, prev)?;
        let eta0 = &part.x_y0 * theta.beta0(layout);
        let eta_plus = &eta0 + &part.xbar_y0 * theta.beta1(layout);
        Ok(LinearPredictors {
            eta_m: &part.x_m * &theta.delta,
            eta_star: &part.x_y * &beta_star,
            eta0_star: &part.x_y0 * beta_star.rows(0, layout.d_beta0),
            eta0,
            eta_plus,
        })
    }

    /// Mediator-model offsets at the observed outcomes.
    pub fn offsets(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            (0..y.len()).map(|i| offset_from_predictors(y[i], self.eta0[i], self.eta_plus[i])),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listeriosis_log_k() {
        let prev = compute_prevalence_design(&[1.70e-7], &[109], &[872]).unwrap();
        assert!((prev.log_k[0] - 13.511).abs() < 0.01, "{}", prev.log_k[0]);
    }

    #[test]
    fn representative_sampling_gives_unit_k() {
        let prev = PrevalenceDesign::from_proportions(&[0.3, 0.1], &[0.3, 0.1]).unwrap();
        for b in 0..2 {
            assert!((prev.k[b] - 1.0).abs() < 1e-12);
            assert!(prev.log_k[b].abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_sample_rare_outcome() {
        let prev = compute_prevalence_design(&[0.01], &[50], &[50]).unwrap();
        assert!((prev.k[0] - 99.0).abs() < 1e-10);
        assert!((prev.log_k[0] - 99f64.ln()).abs() < 1e-12);
        assert!((prev.log_k[0] - 4.5951).abs() < 1e-4);
    }

    #[test]
    fn k_matches_definition() {
        let prev = compute_prevalence_design(&[0.02, 0.3, 0.6], &[10, 40, 7], &[90, 60, 3]).unwrap();
        for b in 0..3 {
            let (p, pi) = (prev.p[b], prev.pi[b]);
            let k = p / (1.0 - p) * (1.0 - pi) / pi;
            assert!((prev.k[b] - k).abs() < 1e-12 * k);
        }
    }

    #[test]
    fn degenerate_strata_rejected() {
        assert!(matches!(
            compute_prevalence_design(&[0.1, 0.1], &[5, 0], &[5, 5]),
            Err(CorrectionError::DegenerateStratum { stratum: 2, .. })
        ));
        assert!(compute_prevalence_design(&[0.0], &[5], &[5]).is_err());
    }

    #[test]
    fn offset_scalar_cases() {
        // Intercept-only: beta0 = 0, beta1 = 1.
        let y1 = offset_from_predictors(1.0, 0.0, 1.0);
        let oracle1 = (expit(1.0) / expit(0.0)).ln();
        assert!((y1 - oracle1).abs() < 1e-14);
        assert!((y1 - 0.37989).abs() < 1e-5);
        let y0 = offset_from_predictors(0.0, 0.0, 1.0);
        let oracle0 = ((1.0 - expit(1.0)) / (1.0 - expit(0.0))).ln();
        assert!((y0 - oracle0).abs() < 1e-14);
        assert!((y0 + 0.62011).abs() < 1e-5);
        assert_eq!(offset_from_predictors(1.0, 0.3, 0.3), 0.0);
        assert_eq!(offset_from_predictors(0.0, -2.0, -2.0), 0.0);
    }

    #[test]
    fn g_scalar_cases() {
        assert_eq!(g_from_predictors(0.4, 0.4, 1.3), 0.0);
        assert!(g_from_predictors(0.0, 1.0, -800.0).abs() < 1e-300);
        let e = 1f64.exp();
        let expected = ((3.0 * e + 1.0) / (3.0 + e)).ln();
        assert!((g_from_predictors(0.0, 1.0, 0.0) - expected).abs() < 1e-14);
        assert!((expected - 0.470615).abs() < 1e-6);
    }

    #[test]
    fn g_by_enumerating_the_mediator() {
        // P(M=m | Y=y) from the joint of (M, Y) given covariates.
        for &(eta0, eta_plus, eta_m) in &[(0.0, 1.0, 0.0), (-3.0, -1.5, 0.7), (2.0, -1.0, -2.5), (-12.0, -11.0, -3.3)] {
            let pm1 = expit(eta_m);
            let joint = |m: usize, y: usize| {
                let pm = if m == 1 { pm1 } else { 1.0 - pm1 };
                let py1 = expit(if m == 1 { eta_plus } else { eta0 });
                pm * if y == 1 { py1 } else { 1.0 - py1 }
            };
            let p_m0_given = |y| joint(0, y) / (joint(0, y) + joint(1, y));
            let oracle = (p_m0_given(0) / p_m0_given(1)).ln();
            assert!((g_from_predictors(eta0, eta_plus, eta_m) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn g_finite_for_extreme_predictors() {
        for &a in &[-700.0, -50.0, 0.0, 50.0, 700.0] {
            for &b in &[-700.0, -50.0, 0.0, 50.0, 700.0] {
                for &c in &[-700.0, 0.0, 700.0] {
                    assert!(g_from_predictors(a, b, c).is_finite());
                    let p = g_partials(a, b, c);
                    assert!(p.d_beta_int.is_finite() && p.d_beta_m.is_finite() && p.d_delta_int.is_finite());
                }
            }
        }
    }

    /// The q-form derivatives, written exactly as products of exponentials.
    fn q_form_partials(eta0: f64, eta_plus: f64, eta_m: f64) -> (f64, f64, f64) {
        let q1 = (eta_plus - eta0).exp();
        let q2 = eta_m.exp();
        let q3 = 1.0 + eta0.exp();
        let q4 = 1.0 + eta_plus.exp();
        let num = q1 * q2 * q3 + q4;
        let den = q2 * q3 + q4;
        let eg = num / den;
        let scale = eg * den * den;
        let d_int = ((q1 * q2 * (q3 - 1.0) + q4 - 1.0) * den - num * (q2 * (q3 - 1.0) + q4 - 1.0)) / scale;
        let d_m = ((q1 * q2 * q3 + q4 - 1.0) * den - num * (q4 - 1.0)) / scale;
        let d_delta = ((q1 * q2 * q3) * den - num * (q2 * q3)) / scale;
        (d_int, d_m, d_delta)
    }

    #[test]
    fn partials_agree_with_q_form() {
        for &(a, b, c) in &[(0.0, 1.0, 0.0), (-3.0, -1.5, 0.7), (2.0, -1.0, -2.5), (-8.0, -7.0, -3.3), (1.5, 3.0, 2.0)] {
            let p = g_partials(a, b, c);
            let (i, m, d) = q_form_partials(a, b, c);
            assert!((p.d_beta_int - i).abs() < 1e-12, "{a} {b} {c}");
            assert!((p.d_beta_m - m).abs() < 1e-12);
            assert!((p.d_delta_int - d).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_difference_is_mediator_effect() {
        for &(a, b) in &[(0.3, -1.2), (-10.0, 5.0), (40.0, -40.0)] {
            let diff = offset_from_predictors(1.0, a, b) - offset_from_predictors(0.0, a, b);
            assert!((diff - (b - a)).abs() < 1e-12);
        }
    }
}
