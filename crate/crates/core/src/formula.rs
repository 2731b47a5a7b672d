//! A small model-formula language: terms joined by `+`, pairwise
//! interactions written `a:b`. The intercept is implicit; stratum indicators
//! are added automatically by the design builder.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormulaError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("empty outcome formula")]
    EmptyOutcome,
    #[error("interaction `{term}` requires main effect `{missing}`")]
    NotHierarchical { term: String, missing: String },
    #[error("mediator `{0}` may not appear in the mediator formula")]
    MediatorInMediatorModel(String),
    #[error("mediator `{0}` does not appear in the outcome formula")]
    MediatorMissing(String),
    #[error("outcome `{0}` may not appear as a regressor")]
    OutcomeAsRegressor(String),
    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),
    #[error("only pairwise interactions are supported: `{0}`")]
    HigherOrder(String),
}

/// Variable roles needed to validate formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub outcome: String,
    pub mediator: String,
    pub stratum: Option<String>,
}

/// A main effect (one variable) or a pairwise interaction (two).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term(pub Vec<String>);

impl Term {
    pub fn variables(&self) -> &[String] {
        &self.0
    }

    pub fn is_interaction(&self) -> bool {
        self.0.len() > 1
    }

    pub fn involves(&self, var: &str) -> bool {
        self.0.iter().any(|v| v == var)
    }

    fn same_as(&self, other: &Term) -> bool {
        let mut a = self.0.clone();
        let mut b = other.0.clone();
        a.sort();
        b.sort();
        a == b
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join(":"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub outcome_terms: Vec<Term>,
    pub mediator_terms: Vec<Term>,
    pub roles: Roles,
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_terms(spec: &str) -> Result<Vec<Term>, FormulaError> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "1" {
        return Ok(Vec::new());
    }
    let mut terms: Vec<Term> = Vec::new();
    for raw in spec.split('+') {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(FormulaError::UnknownToken("+".into()));
        }
        let vars: Vec<String> = raw.split(':').map(|v| v.trim().to_string()).collect();
        for v in &vars {
            if !is_identifier(v) {
                return Err(FormulaError::UnknownToken(v.clone()));
            }
        }
        if vars.len() > 2 {
            return Err(FormulaError::HigherOrder(raw.to_string()));
        }
        if vars.len() == 2 && vars[0] == vars[1] {
            return Err(FormulaError::UnknownToken(raw.to_string()));
        }
        let term = Term(vars);
        if terms.iter().any(|t| t.same_as(&term)) {
            return Err(FormulaError::DuplicateTerm(term.to_string()));
        }
        terms.push(term);
    }
    Ok(terms)
}

/// Checks hierarchy and reorders so that each interaction directly follows
/// the later of its two main effects. Variables in `implicit` (the stratum)
/// count as present main effects.
fn order_hierarchically(terms: Vec<Term>, implicit: Option<&str>) -> Result<Vec<Term>, FormulaError> {
    let mains: Vec<&String> = terms
        .iter()
        .filter(|t| !t.is_interaction())
        .map(|t| &t.0[0])
        .collect();
    for t in terms.iter().filter(|t| t.is_interaction()) {
        for v in &t.0 {
            if !mains.contains(&v) && Some(v.as_str()) != implicit {
                return Err(FormulaError::NotHierarchical {
                    term: t.to_string(),
                    missing: v.clone(),
                });
            }
        }
    }

    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    let mut pending: Vec<Term> = terms.iter().filter(|t| t.is_interaction()).cloned().collect();
    let emitted = |out: &Vec<Term>, v: &String| {
        Some(v.as_str()) == implicit || out.iter().any(|t| !t.is_interaction() && &t.0[0] == v)
    };
    let flush = |out: &mut Vec<Term>, pending: &mut Vec<Term>| {
        let mut i = 0;
        while i < pending.len() {
            if pending[i].0.iter().all(|v| emitted(out, v)) {
                let t = pending.remove(i);
                out.push(t);
            } else {
                i += 1;
            }
        }
    };
    flush(&mut out, &mut pending);
    for t in terms.into_iter().filter(|t| !t.is_interaction()) {
        out.push(t);
        flush(&mut out, &mut pending);
    }
    debug_assert!(pending.is_empty());
    Ok(out)
}

/// Parses the outcome and mediator specifications, e.g.
/// `"ri + age + ri:age + gas"` and `"ri"`.
pub fn parse_formula(outcome_spec: &str, mediator_spec: &str, roles: &Roles) -> Result<ModelFormula, FormulaError> {
    let outcome_terms = parse_terms(outcome_spec)?;
    if outcome_terms.is_empty() {
        return Err(FormulaError::EmptyOutcome);
    }
    let mediator_terms = parse_terms(mediator_spec)?;

    for t in outcome_terms.iter().chain(&mediator_terms) {
        if t.involves(&roles.outcome) {
            return Err(FormulaError::OutcomeAsRegressor(roles.outcome.clone()));
        }
    }
    if mediator_terms.iter().any(|t| t.involves(&roles.mediator)) {
        return Err(FormulaError::MediatorInMediatorModel(roles.mediator.clone()));
    }
    if !outcome_terms.iter().any(|t| t.involves(&roles.mediator)) {
        return Err(FormulaError::MediatorMissing(roles.mediator.clone()));
    }

    let implicit = roles.stratum.as_deref();
    let strip = |terms: Vec<Term>| -> Vec<Term> {
        terms
            .into_iter()
            .filter(|t| t.is_interaction() || Some(t.0[0].as_str()) != implicit)
            .collect()
    };
    Ok(ModelFormula {
        outcome_terms: order_hierarchically(strip(outcome_terms), implicit)?,
        mediator_terms: order_hierarchically(strip(mediator_terms), implicit)?,
        roles: roles.clone(),
    })
}
