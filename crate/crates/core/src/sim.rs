//! Monte Carlo comparison of the three estimators under case-control
//! sampling from simulated finite populations.
//!
//! Every covariate in a scenario is categorical, so a population is fully
//! described by the number of units in each (covariate cell, M, Y)
//! combination. Populations are drawn as multinomial counts over those
//! combinations and samples by drawing without replacement from those counts
//! within each (stratum, outcome) class, which has the same distribution as drawing
//! units one by one and sampling rows uniformly without replacement, without
//! ever holding the population in memory. [`generate_population`] and
//! [`scc_sample`] provide the unit-level version for small populations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::PrevalenceDesign;
use crate::data::{Column, DataError, Dataset, Schema};
use crate::design::{build_design, build_layout, DesignError, DesignLayout, Profile, VariableKind};
use crate::fit::{FitResult, Method};
use crate::formula::{parse_formula, FormulaError, ModelFormula, Roles};
use crate::logistic::expit;
use crate::mest::fit_m;
use crate::mle::{fit_ml, MlOptions};
use crate::weighting::fit_weighting;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SCC_MEDIATE_THREADS";

/// Wald critical value used for every coverage indicator.
pub const Z_95: f64 = 1.96;

/// An estimated SE larger than this multiple of the weighting SE for the
/// same parameter counts as an instability.
pub const INSTABILITY_RATIO: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(
        "population has {available} {class} in stratum {stratum} but {needed} are required; \
         increase population_size or raise the outcome intercept and re-draw"
    )]
    Insufficient {
        class: &'static str,
        stratum: usize,
        needed: usize,
        available: u64,
    },
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDist {
    pub name: String,
    /// Reference level first.
    pub levels: Vec<String>,
    pub probs: Vec<f64>,
}

/// Per-stratum case and control quotas; the strata are the levels of
/// `variable`, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumQuotas {
    pub variable: String,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
}

fn default_outcome() -> String {
    "y".into()
}

fn default_mediator() -> String {
    "gas".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub covariates: Vec<CovariateDist>,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_mediator")]
    pub mediator: String,
    pub outcome_formula: String,
    pub mediator_formula: String,
    /// Population-scale outcome coefficients in design-column order.
    pub beta_true: Vec<f64>,
    pub delta_true: Vec<f64>,
    pub population_size: u64,
    pub n_cases: usize,
    pub n_controls: usize,
    #[serde(default)]
    pub strata: Option<StratumQuotas>,
    pub n_replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub ml: MlOptions,
}

const LOG_100: f64 = 4.605_170_185_988_092;

fn risk_factors() -> Vec<CovariateDist> {
    vec![
        CovariateDist {
            name: "ri".into(),
            levels: vec!["0".into(), "1".into(), "2".into()],
            probs: vec![0.73, 0.16, 0.11],
        },
        CovariateDist {
            name: "age".into(),
            levels: vec!["40-65".into(), "66-75".into(), "76+".into()],
            probs: vec![0.66, 0.19, 0.15],
        },
    ]
}

impl SimScenario {
    fn base(name: &str, outcome_formula: &str, beta: Vec<f64>, paper_scale: bool) -> SimScenario {
        let mut beta = beta;
        let population_size = if paper_scale {
            30_000_000
        } else {
            beta[0] += LOG_100;
            300_000
        };
        SimScenario {
            name: format!("{name}{}", if paper_scale { "-paper" } else { "" }),
            covariates: risk_factors(),
            outcome: default_outcome(),
            mediator: default_mediator(),
            outcome_formula: outcome_formula.into(),
            mediator_formula: "ri".into(),
            beta_true: beta,
            delta_true: vec![-3.3, 0.8, 0.8],
            population_size,
            n_cases: 100,
            n_controls: 500,
            strata: None,
            n_replicates: 1000,
            seed: 20_240_601,
            ml: MlOptions::default(),
        }
    }

    /// Main-effects outcome model. The desk-scale version uses a population
    /// of 300,000 with the outcome intercept raised by log(100).
    pub fn scenario1(paper_scale: bool) -> SimScenario {
        SimScenario::base("scenario1", "ri + age + gas", vec![-12.4, 1.3, 2.2, 1.0, 0.7, 1.0], paper_scale)
    }

    /// Outcome model with the risk-factor by age interaction.
    pub fn scenario2(paper_scale: bool) -> SimScenario {
        SimScenario::base(
            "scenario2",
            "ri + age + ri:age + gas",
            vec![-13.1, 0.9, 2.7, 0.9, 1.5, 1.2, -0.6, -0.5, -1.6, 1.0],
            paper_scale,
        )
    }

    pub fn builtin(name: &str, paper_scale: bool) -> Option<SimScenario> {
        match name {
            "scenario1" => Some(SimScenario::scenario1(paper_scale)),
            "scenario2" => Some(SimScenario::scenario2(paper_scale)),
            _ => None,
        }
    }

    fn roles(&self) -> Roles {
        Roles {
            outcome: self.outcome.clone(),
            mediator: self.mediator.clone(),
            stratum: self.strata.as_ref().map(|s| s.variable.clone()),
        }
    }

    pub fn formula(&self) -> Result<ModelFormula, SimError> {
        Ok(parse_formula(&self.outcome_formula, &self.mediator_formula, &self.roles())?)
    }

    /// Validates the scenario and tabulates the model over covariate cells.
    pub fn model(&self) -> Result<ScenarioModel, SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.covariates.is_empty() {
            return bad("at least one covariate is required".into());
        }
        for c in &self.covariates {
            if c.levels.is_empty() || c.levels.len() != c.probs.len() {
                return bad(format!("`{}` needs one probability per level", c.name));
            }
            if c.probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return bad(format!("`{}` has a probability outside (0, 1]", c.name));
            }
            let total: f64 = c.probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("probabilities of `{}` sum to {total}", c.name));
            }
            let mut sorted = c.levels.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != c.levels.len() {
                return bad(format!("`{}` has duplicate levels", c.name));
            }
        }
        let stratum_index = match &self.strata {
            None => None,
            Some(q) => {
                let Some(k) = self.covariates.iter().position(|c| c.name == q.variable) else {
                    return bad(format!("stratum variable `{}` is not a covariate", q.variable));
                };
                let nb = self.covariates[k].levels.len();
                if q.cases.len() != nb || q.controls.len() != nb {
                    return bad(format!("quotas need one entry per level of `{}`", q.variable));
                }
                if q.cases.contains(&0) || q.controls.contains(&0) {
                    return bad("every stratum needs at least one case and one control".into());
                }
                Some(k)
            }
        };
        if self.n_cases == 0 || self.n_controls == 0 {
            return bad("n_cases and n_controls must be positive".into());
        }
        if self.n_replicates == 0 {
            return bad("n_replicates must be positive".into());
        }
        if self.population_size < (self.n_cases + self.n_controls) as u64 {
            return bad("population_size is smaller than the sample".into());
        }

        let formula = self.formula()?;
        let n_strata = stratum_index.map_or(1, |k| self.covariates[k].levels.len());
        let layout = build_layout(&formula, n_strata, |name| {
            self.covariates.iter().find(|c| c.name == name).map(|c| VariableKind::Categorical {
                levels: c.levels.clone(),
            })
        })?;
        if self.beta_true.len() != layout.d_beta() {
            return bad(format!(
                "beta_true has {} entries; the outcome design has {} columns ({})",
                self.beta_true.len(),
                layout.d_beta(),
                layout.outcome_columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        if self.delta_true.len() != layout.d_delta() {
            return bad(format!(
                "delta_true has {} entries; the mediator design has {} columns",
                self.delta_true.len(),
                layout.d_delta()
            ));
        }

        let beta = DVector::from_vec(self.beta_true.clone());
        let delta = DVector::from_vec(self.delta_true.clone());
        let n_cells: usize = self.covariates.iter().map(|c| c.levels.len()).product();
        let mut cells = Vec::with_capacity(n_cells);
        for idx in 0..n_cells {
            let mut rest = idx;
            let mut codes = Vec::with_capacity(self.covariates.len());
            let mut prob = 1.0;
            let mut profile = Profile::default();
            for c in &self.covariates {
                let code = rest % c.levels.len();
                rest /= c.levels.len();
                codes.push(code);
                prob *= c.probs[code];
                profile = profile.with_level(&c.name, &c.levels[code]);
            }
            let stratum = stratum_index.map_or(0, |k| codes[k]);
            profile.stratum = stratum + 1;
            let p_m = expit(layout.encode_mediator(&profile)?.dot(&delta));
            let mut p_y = [0.0; 2];
            for (m, p) in p_y.iter_mut().enumerate() {
                let pr = Profile {
                    mediator: m as f64,
                    ..profile.clone()
                };
                *p = expit(layout.encode_outcome(&pr)?.dot(&beta));
            }
            cells.push(Cell {
                codes,
                prob,
                stratum,
                p_m,
                p_y,
            });
        }

        let model = ScenarioModel {
            scenario: self.clone(),
            layout,
            formula,
            cells,
            n_strata,
            stratum_index,
        };
        let n = self.population_size as f64;
        for b in 0..n_strata {
            let (cases, controls) = model.expected_counts(b);
            let (need_cases, need_controls) = model.quota(b);
            if n * cases < need_cases as f64 || n * controls < need_controls as f64 {
                return bad(format!(
                    "stratum {}: expected {:.1} cases and {:.1} controls, below the quotas {need_cases}/{need_controls}",
                    b + 1,
                    n * cases,
                    n * controls
                ));
            }
        }
        Ok(model)
    }
}

/// One joint covariate configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Level index of each scenario covariate.
    pub codes: Vec<usize>,
    pub prob: f64,
    /// 0-based stratum.
    pub stratum: usize,
    pub p_m: f64,
    /// `P(Y=1 | cell, M=m)` for m = 0, 1.
    pub p_y: [f64; 2],
}

impl Cell {
    /// `P(cell, M=m, Y=y)` for category `4c + 2m + y`.
    fn joint(&self, m: usize, y: usize) -> f64 {
        let pm = if m == 1 { self.p_m } else { 1.0 - self.p_m };
        let py = if y == 1 { self.p_y[m] } else { 1.0 - self.p_y[m] };
        self.prob * pm * py
    }
}

/// A validated scenario with its designs and cell probabilities.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    pub scenario: SimScenario,
    pub layout: DesignLayout,
    pub formula: ModelFormula,
    pub cells: Vec<Cell>,
    pub n_strata: usize,
    stratum_index: Option<usize>,
}

impl ScenarioModel {
    pub fn truth(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.layout.d_theta(),
            self.scenario.beta_true.iter().chain(&self.scenario.delta_true).copied(),
        )
    }

    /// Expected population fractions of cases and controls in stratum `b`.
    pub fn expected_counts(&self, b: usize) -> (f64, f64) {
        let mut cases = 0.0;
        let mut controls = 0.0;
        for c in self.cells.iter().filter(|c| c.stratum == b) {
            cases += c.joint(0, 1) + c.joint(1, 1);
            controls += c.joint(0, 0) + c.joint(1, 0);
        }
        (cases, controls)
    }

    /// Case and control quota of stratum `b`.
    pub fn quota(&self, b: usize) -> (usize, usize) {
        match &self.scenario.strata {
            Some(q) => (q.cases[b], q.controls[b]),
            None => (self.scenario.n_cases, self.scenario.n_controls),
        }
    }

    fn category_probs(&self) -> Vec<f64> {
        self.cells
            .iter()
            .flat_map(|c| [c.joint(0, 0), c.joint(0, 1), c.joint(1, 0), c.joint(1, 1)])
            .collect()
    }
}

/// Unit counts per (cell, M, Y); index `4 * cell + 2 * m + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCounts {
    pub counts: Vec<u64>,
    pub cell_strata: Vec<usize>,
    pub n_strata: usize,
}

impl PopulationCounts {
    pub fn size(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(cases, units)` in stratum `b`.
    pub fn stratum_totals(&self, b: usize) -> (u64, u64) {
        let mut cases = 0;
        let mut units = 0;
        for (k, &n) in self.counts.iter().enumerate() {
            if self.cell_strata[k / 4] == b {
                units += n;
                if k % 2 == 1 {
                    cases += n;
                }
            }
        }
        (cases, units)
    }

    /// Realized population prevalence in each stratum.
    pub fn exact_prevalence(&self) -> Vec<f64> {
        (0..self.n_strata)
            .map(|b| {
                let (cases, units) = self.stratum_totals(b);
                cases as f64 / units as f64
            })
            .collect()
    }
}

/// Multinomial draw of the population counts.
pub fn generate_population_counts<R: Rng>(model: &ScenarioModel, size: u64, rng: &mut R) -> PopulationCounts {
    let probs = model.category_probs();
    let mut counts = vec![0u64; probs.len()];
    let mut remaining_n = size;
    let mut remaining_p = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if remaining_n == 0 {
            break;
        }
        if k + 1 == probs.len() {
            counts[k] = remaining_n;
            break;
        }
        let q = (p / remaining_p).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining_n, q).expect("probability in [0, 1]").sample(rng);
        counts[k] = draw;
        remaining_n -= draw;
        remaining_p -= p;
        if remaining_p <= 0.0 {
            remaining_p = f64::MIN_POSITIVE;
        }
    }
    PopulationCounts {
        counts,
        cell_strata: model.cells.iter().map(|c| c.stratum).collect(),
        n_strata: model.n_strata,
    }
}

/// Unit-level population: cell index, mediator and outcome per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub cell: Vec<usize>,
    pub m: Vec<u8>,
    pub y: Vec<u8>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn counts(&self, model: &ScenarioModel) -> PopulationCounts {
        let mut counts = vec![0u64; 4 * model.cells.len()];
        for i in 0..self.len() {
            counts[4 * self.cell[i] + 2 * usize::from(self.m[i]) + usize::from(self.y[i])] += 1;
        }
        PopulationCounts {
            counts,
            cell_strata: model.cells.iter().map(|c| c.stratum).collect(),
            n_strata: model.n_strata,
        }
    }
}

/// Draws every unit's covariates, then M, then Y.
pub fn generate_population(model: &ScenarioModel, size: usize, seed: u64) -> Population {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<f64> = model
        .cells
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.prob;
            Some(*acc)
        })
        .collect();
    let last = model.cells.len() - 1;
    let mut pop = Population {
        cell: Vec::with_capacity(size),
        m: Vec::with_capacity(size),
        y: Vec::with_capacity(size),
    };
    for _ in 0..size {
        let u: f64 = rng.random::<f64>() * cumulative[last];
        let k = cumulative.partition_point(|&c| c <= u).min(last);
        let cell = &model.cells[k];
        let m = u8::from(rng.random::<f64>() < cell.p_m);
        let y = u8::from(rng.random::<f64>() < cell.p_y[usize::from(m)]);
        pop.cell.push(k);
        pop.m.push(m);
        pop.y.push(y);
    }
    pop
}

fn check_available(model: &ScenarioModel, pop: &PopulationCounts) -> Result<(), SimError> {
    for b in 0..model.n_strata {
        let (cases, units) = pop.stratum_totals(b);
        let (need_cases, need_controls) = model.quota(b);
        if cases < need_cases as u64 {
            return Err(SimError::Insufficient {
                class: "cases",
                stratum: b + 1,
                needed: need_cases,
                available: cases,
            });
        }
        if units - cases < need_controls as u64 {
            return Err(SimError::Insufficient {
                class: "controls",
                stratum: b + 1,
                needed: need_controls,
                available: units - cases,
            });
        }
    }
    Ok(())
}

/// Builds the sample data set from counts per (cell, M, Y).
fn dataset_from_counts(model: &ScenarioModel, counts: &[u64]) -> Result<Dataset, SimError> {
    let scn = &model.scenario;
    let mut y = Vec::new();
    let mut m = Vec::new();
    let mut strata = Vec::new();
    let mut codes: Vec<Vec<usize>> = vec![Vec::new(); scn.covariates.len()];
    for (k, &n) in counts.iter().enumerate() {
        let cell = &model.cells[k / 4];
        for _ in 0..n {
            y.push((k % 2) as u8);
            m.push(((k / 2) % 2) as u8);
            strata.push(cell.stratum + 1);
            for (j, c) in cell.codes.iter().enumerate() {
                codes[j].push(*c);
            }
        }
    }
    let covariates = scn
        .covariates
        .iter()
        .zip(codes)
        .enumerate()
        .filter(|(j, _)| Some(*j) != model.stratum_index)
        .map(|(_, (c, codes))| {
            (
                c.name.clone(),
                Column::Categorical {
                    levels: c.levels.clone(),
                    codes,
                },
            )
        })
        .collect();
    let schema = Schema {
        outcome: scn.outcome.clone(),
        mediator: scn.mediator.clone(),
        stratum: scn.strata.as_ref().map(|s| s.variable.clone()),
        categorical: Vec::new(),
    };
    let stratum = scn.strata.as_ref().map(|_| strata);
    Ok(Dataset::new(&schema, y, m, stratum, covariates)?)
}

/// Case-control sample drawn from population counts: within each stratum
/// the case quota is drawn without replacement from the case categories,
/// and likewise for controls.
pub fn scc_sample_counts<R: Rng>(model: &ScenarioModel, pop: &PopulationCounts, rng: &mut R) -> Result<Dataset, SimError> {
    check_available(model, pop)?;
    let mut sampled = vec![0u64; pop.counts.len()];
    for b in 0..model.n_strata {
        let (need_cases, need_controls) = model.quota(b);
        for (class, need) in [(1usize, need_cases as u64), (0, need_controls as u64)] {
            let members: Vec<usize> = (0..pop.counts.len())
                .filter(|&k| k % 2 == class && pop.cell_strata[k / 4] == b)
                .collect();
            // Unit-by-unit draws without replacement over the categories.
            let mut left: Vec<u64> = members.iter().map(|&k| pop.counts[k]).collect();
            let mut total: u64 = left.iter().sum();
            for _ in 0..need {
                let mut u = rng.random_range(0..total);
                let pos = left
                    .iter()
                    .position(|&c| {
                        if u < c {
                            true
                        } else {
                            u -= c;
                            false
                        }
                    })
                    .expect("draw within total");
                left[pos] -= 1;
                total -= 1;
                sampled[members[pos]] += 1;
            }
        }
    }
    dataset_from_counts(model, &sampled)
}

/// Case-control sample from a unit-level population: uniform sampling
/// without replacement within each (stratum, outcome) class.
pub fn scc_sample(model: &ScenarioModel, pop: &Population, seed: u64) -> Result<Dataset, SimError> {
    check_available(model, &pop.counts(model))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; 4 * model.cells.len()];
    for b in 0..model.n_strata {
        let (need_cases, need_controls) = model.quota(b);
        for (class, need) in [(1u8, need_cases), (0, need_controls)] {
            let members: Vec<usize> = (0..pop.len())
                .filter(|&i| pop.y[i] == class && model.cells[pop.cell[i]].stratum == b)
                .collect();
            for pos in index::sample(&mut rng, members.len(), need) {
                let i = members[pos];
                counts[4 * pop.cell[i] + 2 * usize::from(pop.m[i]) + usize::from(pop.y[i])] += 1;
            }
        }
    }
    dataset_from_counts(model, &counts)
}

/// Estimates and standard errors of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub dispersion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Exact population prevalence per stratum, `None` if the population
    /// could not supply the quotas.
    pub prevalence: Option<Vec<f64>>,
    pub fits: BTreeMap<Method, Result<EstimateRecord, String>>,
}

fn record(fit: &FitResult) -> Result<EstimateRecord, String> {
    let estimate: Vec<f64> = fit.theta_vector().iter().copied().collect();
    let se: Vec<f64> = fit.se().iter().copied().collect();
    if estimate.iter().chain(&se).any(|v| !v.is_finite()) {
        return Err("non-finite estimate or standard error".into());
    }
    Ok(EstimateRecord {
        estimate,
        se,
        loglik: fit.loglik,
        dispersion: fit.diagnostics.dispersion,
    })
}

/// Generates, samples and fits one replicate. The population stream is
/// stream `replicate` of the scenario seed.
pub fn run_replicate(model: &ScenarioModel, estimators: &[Method], replicate: usize) -> ReplicateRecord {
    let scn = &model.scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    rng.set_stream(replicate as u64);
    let pop = generate_population_counts(model, scn.population_size, &mut rng);
    let pi = pop.exact_prevalence();
    let failed = |msg: String| ReplicateRecord {
        replicate,
        prevalence: None,
        fits: estimators.iter().map(|&e| (e, Err(msg.clone()))).collect(),
    };
    let data = match scc_sample_counts(model, &pop, &mut rng) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let part = match build_design(&data, &model.formula) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    debug_assert_eq!(part.layout, model.layout);
    let prev = match PrevalenceDesign::for_sample(&pi, &part) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let ml_opts = MlOptions {
        seed: scn.ml.seed.wrapping_add(scn.seed).wrapping_add(replicate as u64 + 1),
        ..scn.ml.clone()
    };
    let fits = estimators
        .iter()
        .map(|&e| {
            let fit = match e {
                Method::M => fit_m(&part, &prev).map_err(|e| e.to_string()),
                Method::Ml => fit_ml(&part, &prev, &ml_opts).map_err(|e| e.to_string()),
                Method::Weighting => fit_weighting(&part, &prev).map_err(|e| e.to_string()),
            };
            (e, fit.and_then(|f| record(&f)))
        })
        .collect();
    ReplicateRecord {
        replicate,
        prevalence: Some(pi),
        fits,
    }
}

/// Runs `f` on a pool capped by `SCC_MEDIATE_THREADS` when it is set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMetrics {
    pub parameter: String,
    pub estimator: Method,
    pub truth: f64,
    /// Replicates contributing (successful fits).
    pub n: usize,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates (divisor n).
    pub mc_sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    /// Median over replicates of SE / weighting SE for the same parameter.
    pub median_se_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub scenario: String,
    pub n_replicates: usize,
    pub parameters: Vec<ParameterMetrics>,
    /// Replicates whose population could not supply the quotas or whose
    /// sample could not be turned into a design.
    pub sample_failures: usize,
    pub failures: BTreeMap<Method, usize>,
    /// First failure message of each estimator.
    pub failure_examples: BTreeMap<Method, String>,
    /// Replicates where some SE exceeds `INSTABILITY_RATIO` times the
    /// weighting SE.
    pub instability: BTreeMap<Method, usize>,
    /// ML replicates whose converged starts disagree.
    pub dispersion_events: usize,
    /// Replicates with the ML log-likelihood below the M-estimate's.
    pub ml_below_m: usize,
    /// Median SE ratio against weighting pooled over replicates and
    /// mediator-model parameters.
    pub mediator_se_ratio: BTreeMap<Method, f64>,
}

impl SimMetrics {
    pub fn get(&self, estimator: Method, parameter: &str) -> Option<&ParameterMetrics> {
        self.parameters
            .iter()
            .find(|p| p.estimator == estimator && p.parameter == parameter)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Aggregates replicate records into per-parameter metrics.
pub fn compute_metrics(
    scenario: &str,
    names: &[String],
    truth: &DVector<f64>,
    d_beta: usize,
    estimators: &[Method],
    records: &[ReplicateRecord],
) -> SimMetrics {
    let ok = |r: &ReplicateRecord, e: Method| r.fits.get(&e).and_then(|f| f.as_ref().ok()).cloned();
    let mut parameters = Vec::new();
    let mut failures = BTreeMap::new();
    let mut failure_examples = BTreeMap::new();
    let mut instability = BTreeMap::new();
    let mut mediator_se_ratio = BTreeMap::new();
    for &e in estimators {
        let fits: Vec<(usize, EstimateRecord)> = records
            .iter()
            .filter(|r| r.prevalence.is_some())
            .filter_map(|r| ok(r, e).map(|f| (r.replicate, f)))
            .collect();
        let n_failed = records
            .iter()
            .filter(|r| r.prevalence.is_some() && !matches!(r.fits.get(&e), Some(Ok(_))))
            .count();
        failures.insert(e, n_failed);
        if let Some(msg) = records
            .iter()
            .filter(|r| r.prevalence.is_some())
            .find_map(|r| r.fits.get(&e).and_then(|f| f.as_ref().err()))
        {
            failure_examples.insert(e, msg.clone());
        }
        let weighting: BTreeMap<usize, EstimateRecord> = records
            .iter()
            .filter_map(|r| ok(r, Method::Weighting).map(|f| (r.replicate, f)))
            .collect();
        let compare = e != Method::Weighting && estimators.contains(&Method::Weighting);
        if compare {
            let unstable = fits
                .iter()
                .filter(|(rep, f)| {
                    weighting
                        .get(rep)
                        .is_some_and(|w| f.se.iter().zip(&w.se).any(|(s, sw)| *s > INSTABILITY_RATIO * sw))
                })
                .count();
            instability.insert(e, unstable);
            let pooled: Vec<f64> = fits
                .iter()
                .filter_map(|(rep, f)| weighting.get(rep).map(|w| (f, w)))
                .flat_map(|(f, w)| (d_beta..names.len()).map(move |j| f.se[j] / w.se[j]))
                .collect();
            if let Some(med) = median(pooled) {
                mediator_se_ratio.insert(e, med);
            }
        }
        let n = fits.len();
        for (j, name) in names.iter().enumerate() {
            let t = truth[j];
            let (bias, mc_sd, rmse, coverage, mean_se) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let nf = n as f64;
                let mean = fits.iter().map(|(_, f)| f.estimate[j]).sum::<f64>() / nf;
                let var = fits.iter().map(|(_, f)| (f.estimate[j] - mean).powi(2)).sum::<f64>() / nf;
                let mse = fits.iter().map(|(_, f)| (f.estimate[j] - t).powi(2)).sum::<f64>() / nf;
                let covered = fits
                    .iter()
                    .filter(|(_, f)| (f.estimate[j] - t).abs() <= Z_95 * f.se[j])
                    .count();
                let mean_se = fits.iter().map(|(_, f)| f.se[j]).sum::<f64>() / nf;
                (mean - t, var.sqrt(), mse.sqrt(), covered as f64 / nf, mean_se)
            };
            let median_se_ratio = if compare {
                median(
                    fits.iter()
                        .filter_map(|(rep, f)| weighting.get(rep).map(|w| f.se[j] / w.se[j]))
                        .collect(),
                )
            } else {
                None
            };
            parameters.push(ParameterMetrics {
                parameter: name.clone(),
                estimator: e,
                truth: t,
                n,
                bias,
                mc_sd,
                rmse,
                coverage,
                mean_se,
                median_se_ratio,
            });
        }
    }
    let dispersion_events = records
        .iter()
        .filter(|r| matches!(r.fits.get(&Method::Ml), Some(Ok(f)) if f.dispersion))
        .count();
    let ml_below_m = records
        .iter()
        .filter(|r| match (ok(r, Method::Ml), ok(r, Method::M)) {
            (Some(ml), Some(m)) => ml.loglik < m.loglik - 1e-8 * (1.0 + m.loglik.abs()),
            _ => false,
        })
        .count();
    SimMetrics {
        scenario: scenario.to_string(),
        n_replicates: records.len(),
        parameters,
        sample_failures: records.iter().filter(|r| r.prevalence.is_none()).count(),
        failures,
        failure_examples,
        instability,
        dispersion_events,
        ml_below_m,
        mediator_se_ratio,
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: SimMetrics,
    pub replicates: Vec<ReplicateRecord>,
}

/// Runs every replicate of the scenario concurrently and aggregates.
pub fn run_monte_carlo(scn: &SimScenario, estimators: &[Method]) -> Result<SimOutput, SimError> {
    if estimators.is_empty() {
        return Err(SimError::Scenario("no estimators requested".into()));
    }
    let model = scn.model()?;
    let replicates: Vec<ReplicateRecord> = with_thread_cap(|| {
        (0..scn.n_replicates)
            .into_par_iter()
            .map(|r| run_replicate(&model, estimators, r))
            .collect()
    });
    let metrics = compute_metrics(
        &scn.name,
        &model.layout.parameter_names(),
        &model.truth(),
        model.layout.d_beta(),
        estimators,
        &replicates,
    );
    Ok(SimOutput { metrics, replicates })
}

/// `x` with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{:.*e}", digits.saturating_sub(1), x);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Metrics as CSV, one row per parameter and estimator, full precision.
pub fn metrics_csv(metrics: &SimMetrics) -> String {
    let mut out = String::from("scenario,estimator,parameter,truth,n,bias,mc_sd,rmse,coverage,mean_se,median_se_ratio\n");
    for p in &metrics.parameters {
        let ratio = p.median_se_ratio.map_or(String::new(), |r| r.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            metrics.scenario, p.estimator, p.parameter, p.truth, p.n, p.bias, p.mc_sd, p.rmse, p.coverage, p.mean_se, ratio
        );
    }
    out
}

/// Human-readable table: bias, MC SD, RMSE and coverage side by side for
/// each estimator.
pub fn summary_table(metrics: &SimMetrics) -> String {
    let estimators: Vec<Method> = metrics.failures.keys().copied().collect();
    let mut names: Vec<&str> = Vec::new();
    for p in &metrics.parameters {
        if !names.contains(&p.parameter.as_str()) {
            names.push(&p.parameter);
        }
    }
    let width = names.iter().map(|n| n.len()).max().unwrap_or(9).max(9);
    let mut out = String::new();
    let _ = writeln!(out, "{} ({} replicates)", metrics.scenario, metrics.n_replicates);
    let mut header = format!("{:width$}", "parameter");
    for block in ["bias", "mc_sd", "rmse", "coverage"] {
        for e in &estimators {
            header.push_str(&format!(" {:>11}", format!("{block}:{e}")));
        }
    }
    let _ = writeln!(out, "{header}");
    for name in names {
        let mut line = format!("{name:width$}");
        for pick in [0, 1, 2, 3] {
            for &e in &estimators {
                let v = metrics.get(e, name).map_or(f64::NAN, |p| match pick {
                    0 => p.bias,
                    1 => p.mc_sd,
                    2 => p.rmse,
                    _ => p.coverage,
                });
                line.push_str(&format!(" {:>11}", format_sig(v, 6)));
            }
        }
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "sample failures: {}", metrics.sample_failures);
    for (e, n) in &metrics.failures {
        let _ = writeln!(out, "{e} failures: {n}");
    }
    for (e, n) in &metrics.instability {
        let _ = writeln!(out, "{e} replicates with an SE above {INSTABILITY_RATIO}x the weighting SE: {n}");
    }
    for (e, r) in &metrics.mediator_se_ratio {
        let _ = writeln!(out, "{e}/W median mediator-model SE ratio: {}", format_sig(*r, 6));
    }
    let _ = writeln!(out, "ML multi-start dispersion events: {}", metrics.dispersion_events);
    out
}
