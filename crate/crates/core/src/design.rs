//! Design matrices for the outcome and mediator models.
//!
//! The outcome design is split into the columns that do not involve the
//! mediator (`X_y0`) followed by the columns that do (`X_y1`). Every
//! mediator-involving column equals `m` times some `X_y0` column; the
//! `expand_map` records which one, so that the mediator coefficients can be
//! scattered into a zero vector conformable with `beta0`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, Dataset};
use crate::formula::{ModelFormula, Roles, Term};

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("level `{level}` of `{variable}` has no observations")]
    EmptyLevel { variable: String, level: String },
    #[error("unknown level `{level}` for `{variable}`")]
    UnknownLevel { variable: String, level: String },
    #[error("`{0}` needs a categorical level in the profile")]
    ExpectedLevel(String),
    #[error("`{0}` needs a numeric value in the profile")]
    ExpectedNumber(String),
    #[error("profile does not set `{0}`")]
    MissingValue(String),
    #[error("stratum {stratum} out of range 1..={n_strata}")]
    StratumOutOfRange { stratum: usize, n_strata: usize },
    #[error("expected a vector of length {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("mediator column `{0}` has no matching mediator-free column")]
    Unmatched(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

/// One multiplicative component of a design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    Numeric(String),
    /// Indicator of `level` (0-based index into the level set, never 0).
    Level { variable: String, level: usize },
    Mediator,
    /// Indicator of stratum `b` (1-based, b >= 2).
    Stratum(usize),
}

/// A design column is the product of its factors; the intercept has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub factors: Vec<Factor>,
}

impl DesignColumn {
    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn involves_mediator(&self) -> bool {
        self.factors.contains(&Factor::Mediator)
    }
}

/// Data-free description of both designs. Serializable so a saved fit can
/// be re-encoded for arbitrary covariate profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub roles: Roles,
    pub n_strata: usize,
    pub variables: BTreeMap<String, VariableKind>,
    /// `X_y0` columns followed by `X_y1` columns.
    pub outcome_columns: Vec<DesignColumn>,
    pub mediator_columns: Vec<DesignColumn>,
    pub d_beta0: usize,
    /// For each `X_y1` column j, the `X_y0` column it multiplies (0-based).
    pub expand_map: Vec<usize>,
}

impl DesignLayout {
    pub fn d_beta(&self) -> usize {
        self.outcome_columns.len()
    }

    pub fn d_beta1(&self) -> usize {
        self.d_beta() - self.d_beta0
    }

    pub fn d_delta(&self) -> usize {
        self.mediator_columns.len()
    }

    pub fn d_theta(&self) -> usize {
        self.d_beta() + self.d_delta()
    }

    /// Position of the plain mediator main effect within `beta1`.
    pub fn mediator_main_index(&self) -> Option<usize> {
        self.outcome_columns[self.d_beta0..]
            .iter()
            .position(|c| c.factors == [Factor::Mediator])
    }

    /// Index of the stratum-b indicator (b >= 2) in either design; the
    /// intercept is column 0 and stratum indicators follow it.
    pub fn stratum_column(&self, b: usize) -> usize {
        debug_assert!(b >= 2 && b <= self.n_strata);
        b - 1
    }

    /// Parameter names, outcome block first.
    pub fn parameter_names(&self) -> Vec<String> {
        self.outcome_columns
            .iter()
            .map(|c| format!("outcome:{}", c.name))
            .chain(self.mediator_columns.iter().map(|c| format!("mediator:{}", c.name)))
            .collect()
    }

    fn factor_value(&self, f: &Factor, profile: &Profile) -> Result<f64, DesignError> {
        Ok(match f {
            Factor::Mediator => profile.mediator,
            Factor::Stratum(b) => f64::from(u8::from(profile.stratum == *b)),
            Factor::Numeric(v) => match profile.values.get(v) {
                Some(Value::Number(x)) => *x,
                Some(Value::Level(_)) => return Err(DesignError::ExpectedNumber(v.clone())),
                None => return Err(DesignError::MissingValue(v.clone())),
            },
            Factor::Level { variable, level } => {
                let levels = match self.variables.get(variable) {
                    Some(VariableKind::Categorical { levels }) => levels,
                    _ => return Err(DesignError::UnknownVariable(variable.clone())),
                };
                match profile.values.get(variable) {
                    Some(Value::Level(l)) => {
                        let idx = levels.iter().position(|x| x == l).ok_or_else(|| DesignError::UnknownLevel {
                            variable: variable.clone(),
                            level: l.clone(),
                        })?;
                        f64::from(u8::from(idx == *level))
                    }
                    Some(Value::Number(_)) => return Err(DesignError::ExpectedLevel(variable.clone())),
                    None => return Err(DesignError::MissingValue(variable.clone())),
                }
            }
        })
    }

    fn encode(&self, cols: &[DesignColumn], profile: &Profile) -> Result<DVector<f64>, DesignError> {
        if profile.stratum == 0 || profile.stratum > self.n_strata {
            return Err(DesignError::StratumOutOfRange {
                stratum: profile.stratum,
                n_strata: self.n_strata,
            });
        }
        let mut out = DVector::zeros(cols.len());
        for (j, c) in cols.iter().enumerate() {
            let mut v = 1.0;
            for f in &c.factors {
                v *= self.factor_value(f, profile)?;
            }
            out[j] = v;
        }
        Ok(out)
    }

    /// Full outcome row `x_y` for a covariate profile.
    pub fn encode_outcome(&self, profile: &Profile) -> Result<DVector<f64>, DesignError> {
        self.encode(&self.outcome_columns, profile)
    }

    pub fn encode_mediator(&self, profile: &Profile) -> Result<DVector<f64>, DesignError> {
        self.encode(&self.mediator_columns, profile)
    }

    /// Levels of a categorical variable used by either model.
    pub fn levels(&self, variable: &str) -> Option<&[String]> {
        match self.variables.get(variable) {
            Some(VariableKind::Categorical { levels }) => Some(levels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Level(String),
}

/// Values for every variable a design needs, plus mediator and stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub values: BTreeMap<String, Value>,
    #[serde(default)]
    pub mediator: f64,
    #[serde(default = "default_stratum")]
    pub stratum: usize,
}

fn default_stratum() -> usize {
    1
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            values: BTreeMap::new(),
            mediator: 0.0,
            stratum: 1,
        }
    }
}

impl Profile {
    /// Every categorical at its reference level and numerics at zero.
    pub fn reference(layout: &DesignLayout) -> Profile {
        let values = layout
            .variables
            .iter()
            .map(|(name, kind)| {
                let v = match kind {
                    VariableKind::Numeric => Value::Number(0.0),
                    VariableKind::Categorical { levels } => Value::Level(levels[0].clone()),
                };
                (name.clone(), v)
            })
            .collect();
        Profile {
            values,
            ..Profile::default()
        }
    }

    pub fn with(mut self, var: &str, value: Value) -> Profile {
        self.values.insert(var.to_string(), value);
        self
    }

    pub fn with_level(self, var: &str, level: &str) -> Profile {
        self.with(var, Value::Level(level.to_string()))
    }
}

fn factor_name(f: &Factor, layout_vars: &BTreeMap<String, VariableKind>, roles: &Roles) -> String {
    match f {
        Factor::Numeric(v) => v.clone(),
        Factor::Level { variable, level } => match layout_vars.get(variable) {
            Some(VariableKind::Categorical { levels }) => format!("{variable}={}", levels[*level]),
            _ => format!("{variable}[{level}]"),
        },
        Factor::Mediator => roles.mediator.clone(),
        Factor::Stratum(b) => format!("{}={b}", roles.stratum.as_deref().unwrap_or("stratum")),
    }
}

/// Builds the data-free layout. `lookup` resolves covariate names.
pub fn build_layout(
    formula: &ModelFormula,
    n_strata: usize,
    lookup: impl Fn(&str) -> Option<VariableKind>,
) -> Result<DesignLayout, DesignError> {
    let roles = &formula.roles;
    let mut variables = BTreeMap::new();
    for t in formula.outcome_terms.iter().chain(&formula.mediator_terms) {
        for v in t.variables() {
            if v == &roles.mediator || Some(v) == roles.stratum.as_ref() {
                continue;
            }
            let kind = lookup(v).ok_or_else(|| DesignError::UnknownVariable(v.clone()))?;
            variables.insert(v.clone(), kind);
        }
    }

    let options = |var: &String| -> Vec<Factor> {
        if var == &roles.mediator {
            vec![Factor::Mediator]
        } else if Some(var) == roles.stratum.as_ref() {
            (2..=n_strata).map(Factor::Stratum).collect()
        } else {
            match &variables[var] {
                VariableKind::Numeric => vec![Factor::Numeric(var.clone())],
                VariableKind::Categorical { levels } => (1..levels.len())
                    .map(|l| Factor::Level {
                        variable: var.clone(),
                        level: l,
                    })
                    .collect(),
            }
        }
    };
    let expand_term = |t: &Term| -> Vec<Vec<Factor>> {
        let vars = t.variables();
        match vars.len() {
            1 => options(&vars[0]).into_iter().map(|f| vec![f]).collect(),
            _ => {
                let (a, b) = (options(&vars[0]), options(&vars[1]));
                b.iter()
                    .flat_map(|fb| a.iter().map(move |fa| vec![fa.clone(), fb.clone()]))
                    .collect()
            }
        }
    };
    let make = |factors: Vec<Factor>| DesignColumn {
        name: if factors.is_empty() {
            "(Intercept)".to_string()
        } else {
            factors
                .iter()
                .map(|f| factor_name(f, &variables, roles))
                .collect::<Vec<_>>()
                .join(":")
        },
        factors,
    };

    let base: Vec<DesignColumn> = std::iter::once(make(vec![]))
        .chain((2..=n_strata).map(|b| make(vec![Factor::Stratum(b)])))
        .collect();

    let mut y0 = base.clone();
    let mut y1 = Vec::new();
    for t in &formula.outcome_terms {
        for fs in expand_term(t) {
            let col = make(fs);
            if col.involves_mediator() {
                y1.push(col);
            } else {
                y0.push(col);
            }
        }
    }
    let mut expand_map = Vec::with_capacity(y1.len());
    for c in &y1 {
        let rest: Vec<&Factor> = c.factors.iter().filter(|f| **f != Factor::Mediator).collect();
        let j = y0
            .iter()
            .position(|c0| c0.factors.len() == rest.len() && rest.iter().all(|f| c0.factors.contains(f)))
            .ok_or_else(|| DesignError::Unmatched(c.name.clone()))?;
        expand_map.push(j);
    }

    let mut med = base;
    for t in &formula.mediator_terms {
        med.extend(expand_term(t).into_iter().map(make));
    }

    let d_beta0 = y0.len();
    y0.extend(y1);
    Ok(DesignLayout {
        roles: roles.clone(),
        n_strata,
        variables,
        outcome_columns: y0,
        mediator_columns: med,
        d_beta0,
        expand_map,
    })
}

/// Materialized designs for one sample, together with the responses.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPartition {
    pub layout: DesignLayout,
    pub x_y: DMatrix<f64>,
    pub x_y0: DMatrix<f64>,
    pub x_y1: DMatrix<f64>,
    /// Columns of `x_y0` hit by `expand_map`, in `x_y1` order.
    pub xbar_y0: DMatrix<f64>,
    pub x_m: DMatrix<f64>,
    pub y: DVector<f64>,
    pub m: DVector<f64>,
    /// 0-based stratum index per unit.
    pub stratum: Vec<usize>,
}

impl DesignPartition {
    pub fn n(&self) -> usize {
        self.y.len()
    }
}

fn materialize(cols: &[DesignColumn], data: &Dataset) -> Result<DMatrix<f64>, DesignError> {
    let n = data.n();
    let mut x = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        let mut v = vec![1.0; n];
        for f in &c.factors {
            match f {
                Factor::Mediator => v.iter_mut().zip(data.m()).for_each(|(a, &m)| *a *= f64::from(m)),
                Factor::Stratum(b) => v
                    .iter_mut()
                    .zip(data.stratum())
                    .for_each(|(a, s)| *a *= f64::from(u8::from(s == b))),
                Factor::Numeric(name) => match data.covariate(name) {
                    Some(Column::Numeric(x)) => v.iter_mut().zip(x).for_each(|(a, x)| *a *= x),
                    _ => return Err(DesignError::UnknownVariable(name.clone())),
                },
                Factor::Level { variable, level } => match data.covariate(variable) {
                    Some(Column::Categorical { codes, .. }) => v
                        .iter_mut()
                        .zip(codes)
                        .for_each(|(a, c)| *a *= f64::from(u8::from(c == level))),
                    _ => return Err(DesignError::UnknownVariable(variable.clone())),
                },
            }
        }
        x.set_column(j, &DVector::from_vec(v));
    }
    Ok(x)
}

/// Builds both design matrices with column order: intercept, stratum
/// indicators, formula terms (mediator-involving outcome columns last).
pub fn build_design(data: &Dataset, formula: &ModelFormula) -> Result<DesignPartition, DesignError> {
    let layout = build_layout(formula, data.n_strata(), |name| match data.covariate(name) {
        Some(Column::Numeric(_)) => Some(VariableKind::Numeric),
        Some(Column::Categorical { levels, .. }) => Some(VariableKind::Categorical { levels: levels.clone() }),
        None => None,
    })?;
    for (name, kind) in &layout.variables {
        if let (VariableKind::Categorical { levels }, Some(Column::Categorical { codes, .. })) = (kind, data.covariate(name)) {
            let mut seen = vec![false; levels.len()];
            codes.iter().for_each(|&c| seen[c] = true);
            if let Some(l) = seen.iter().position(|s| !s) {
                return Err(DesignError::EmptyLevel {
                    variable: name.clone(),
                    level: levels[l].clone(),
                });
            }
        }
    }

    let x_y = materialize(&layout.outcome_columns, data)?;
    let x_m = materialize(&layout.mediator_columns, data)?;
    let x_y0 = x_y.columns(0, layout.d_beta0).into_owned();
    let x_y1 = x_y.columns(layout.d_beta0, layout.d_beta1()).into_owned();
    let xbar_y0 = x_y0.select_columns(&layout.expand_map);
    Ok(DesignPartition {
        x_y,
        x_y0,
        x_y1,
        xbar_y0,
        x_m,
        y: DVector::from_iterator(data.n(), data.y().iter().map(|&v| f64::from(v))),
        m: DVector::from_iterator(data.n(), data.m().iter().map(|&v| f64::from(v))),
        stratum: data.stratum().iter().map(|b| b - 1).collect(),
        layout,
    })
}

/// Scatters `beta1` into a zero vector of length `d_beta0` at the
/// `expand_map` positions.
pub fn expand_beta(beta1: &DVector<f64>, layout: &DesignLayout) -> Result<DVector<f64>, DesignError> {
    if beta1.len() != layout.d_beta1() {
        return Err(DesignError::Dimension {
            expected: layout.d_beta1(),
            found: beta1.len(),
        });
    }
    let mut out = DVector::zeros(layout.d_beta0);
    for (j, &k) in layout.expand_map.iter().enumerate() {
        out[k] += beta1[j];
    }
    Ok(out)
}
