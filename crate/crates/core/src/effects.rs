//! Natural direct and indirect effects on the log odds-ratio scale, and
//! linear contrasts of outcome coefficients, with delta-method standard
//! errors.
//!
//! The effect formulas are the rare-outcome forms for a binary mediator that
//! does not interact with other regressors in the outcome model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::Theta;
use crate::design::{DesignError, DesignLayout, Profile, Value};
use crate::fit::FitResult;
use crate::logistic::{expit, softplus};

#[derive(Debug, Error, PartialEq)]
pub enum EffectsError {
    #[error("the outcome model has mediator interactions; effects need a single mediator main effect")]
    MediatorInteraction,
    #[error("total effect is zero; proportion mediated is undefined")]
    UndefinedProportion,
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("covariance must be {expected}x{expected}")]
    Covariance { expected: usize },
}

/// Exposure change from `reference` to `level` of `variable`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub variable: String,
    pub level: Value,
    pub reference: Value,
}

impl Contrast {
    pub fn levels(variable: &str, level: &str, reference: &str) -> Contrast {
        Contrast {
            variable: variable.to_string(),
            level: Value::Level(level.to_string()),
            reference: Value::Level(reference.to_string()),
        }
    }

    pub fn label(&self) -> String {
        let show = |v: &Value| match v {
            Value::Level(l) => l.clone(),
            Value::Number(x) => format!("{x}"),
        };
        format!("{}: {} vs {}", self.variable, show(&self.level), show(&self.reference))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub contrast: Contrast,
    pub pattern: Profile,
    pub nde: f64,
    pub nie: f64,
    pub total: f64,
    /// `nie / total`; absent when the total effect is zero.
    pub prop_mediated: Option<f64>,
    pub se_nde: f64,
    pub se_nie: f64,
    pub se_total: f64,
    pub se_pm: Option<f64>,
}

impl EffectEstimate {
    pub fn proportion_mediated(&self) -> Result<(f64, f64), EffectsError> {
        match (self.prop_mediated, self.se_pm) {
            (Some(pm), Some(se)) => Ok((pm, se)),
            _ => Err(EffectsError::UndefinedProportion),
        }
    }
}

fn profile_at(layout: &DesignLayout, base: &Profile, variable: &str, value: &Value) -> Result<Profile, EffectsError> {
    if variable == layout.roles.mediator {
        let m = match value {
            Value::Number(x) => *x,
            Value::Level(l) => l.parse().map_err(|_| DesignError::ExpectedNumber(variable.to_string()))?,
        };
        return Ok(Profile { mediator: m, ..base.clone() });
    }
    if !layout.variables.contains_key(variable) {
        return Err(EffectsError::UnknownVariable(variable.to_string()));
    }
    Ok(base.clone().with(variable, value.clone()))
}

fn quad_form(c: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    c.dot(&(v * c)).max(0.0).sqrt()
}

/// NDE, NIE, total effect and proportion mediated for `contrast` with the
/// remaining covariates fixed at `pattern`.
pub fn effects_from(
    theta: &Theta,
    covariance: &DMatrix<f64>,
    layout: &DesignLayout,
    contrast: &Contrast,
    pattern: &Profile,
) -> Result<EffectEstimate, EffectsError> {
    let d = layout.d_theta();
    if covariance.nrows() != d || covariance.ncols() != d {
        return Err(EffectsError::Covariance { expected: d });
    }
    let main = match (layout.d_beta1(), layout.mediator_main_index()) {
        (1, Some(0)) => layout.d_beta0,
        _ => return Err(EffectsError::MediatorInteraction),
    };
    let base = Profile { mediator: 0.0, ..pattern.clone() };
    let p1 = profile_at(layout, &base, &contrast.variable, &contrast.level)?;
    let p0 = profile_at(layout, &base, &contrast.variable, &contrast.reference)?;
    let (dy, dm) = (layout.d_beta(), layout.d_delta());

    let c = layout.encode_outcome(&p1)? - layout.encode_outcome(&p0)?;
    let nde = c.dot(&theta.beta);
    let mut j_nde = DVector::zeros(d);
    j_nde.rows_mut(0, dy).copy_from(&c);

    let (x1, x0) = (layout.encode_mediator(&p1)?, layout.encode_mediator(&p0)?);
    let (e1, e0) = (x1.dot(&theta.delta), x0.dot(&theta.delta));
    let bm = theta.beta[main];
    // Grouped so equal mediator predictors or a zero mediator effect give
    // exactly zero.
    let nie = (softplus(e0) - softplus(e0 + bm)) - (softplus(e1) - softplus(e1 + bm));
    let mut j_nie = DVector::zeros(d);
    j_nie[main] = expit(e1 + bm) - expit(e0 + bm);
    let jd = &x0 * (expit(e0) - expit(e0 + bm)) + &x1 * (expit(e1 + bm) - expit(e1));
    j_nie.rows_mut(dy, dm).copy_from(&jd);

    let total = nde + nie;
    let j_total = &j_nde + &j_nie;
    let (prop_mediated, se_pm) = if total != 0.0 {
        let j_pm = (&j_nie * nde - &j_nde * nie) / (total * total);
        (Some(nie / total), Some(quad_form(&j_pm, covariance)))
    } else {
        (None, None)
    };
    Ok(EffectEstimate {
        contrast: contrast.clone(),
        pattern: base,
        nde,
        nie,
        total,
        prop_mediated,
        se_nde: quad_form(&j_nde, covariance),
        se_nie: quad_form(&j_nie, covariance),
        se_total: quad_form(&j_total, covariance),
        se_pm,
    })
}

pub fn compute_effects(fit: &FitResult, contrast: &Contrast, pattern: &Profile) -> Result<EffectEstimate, EffectsError> {
    effects_from(&fit.theta, &fit.covariance, &fit.layout, contrast, pattern)
}

/// One row of a contrast table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
}

/// A contrast of the outcome linear predictor between two values of one
/// variable, with the other covariates at `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRequest {
    pub contrast: Contrast,
    pub at: Profile,
}

/// `c'beta` with standard error `sqrt(c'Vc)` for each request; `c` is the
/// difference of the two encoded outcome rows, so interaction terms enter
/// at the levels fixed in `at`.
pub fn contrast_table(fit: &FitResult, requests: &[ContrastRequest]) -> Result<Vec<ContrastRow>, EffectsError> {
    let layout = &fit.layout;
    let dy = layout.d_beta();
    let v = fit.covariance.view((0, 0), (dy, dy)).into_owned();
    requests
        .iter()
        .map(|r| {
            let p1 = profile_at(layout, &r.at, &r.contrast.variable, &r.contrast.level)?;
            let p0 = profile_at(layout, &r.at, &r.contrast.variable, &r.contrast.reference)?;
            let c = layout.encode_outcome(&p1)? - layout.encode_outcome(&p0)?;
            Ok(ContrastRow {
                label: r.contrast.label(),
                estimate: c.dot(&fit.theta.beta),
                se: quad_form(&c, &v),
            })
        })
        .collect()
}

/// Every pair of levels of a categorical `variable`, later level against
/// earlier, with the other covariates at `at`.
pub fn pairwise_requests(layout: &DesignLayout, variable: &str, at: &Profile) -> Result<Vec<ContrastRequest>, EffectsError> {
    let levels = layout
        .levels(variable)
        .ok_or_else(|| EffectsError::UnknownVariable(variable.to_string()))?;
    let mut out = Vec::new();
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            out.push(ContrastRequest {
                contrast: Contrast::levels(variable, &levels[j], &levels[i]),
                at: at.clone(),
            });
        }
    }
    Ok(out)
}
