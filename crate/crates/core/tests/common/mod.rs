//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scc_mediate::correction::{adjust_to_star, PrevalenceDesign, Theta};
use scc_mediate::data::{Column, Dataset, Schema};
use scc_mediate::design::{build_design, build_layout, DesignLayout, DesignPartition, Profile, VariableKind};
use scc_mediate::effects::{contrast_table, Contrast, ContrastRequest};
use scc_mediate::fit::{Diagnostics, FitResult, Method};
use scc_mediate::formula::{parse_formula, ModelFormula, Roles};
use scc_mediate::sim::{generate_population_counts, scc_sample_counts, SimScenario};

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A fully enumerable population: binary exposure `a`, binary stratum
/// variable `b`, binary covariates `s` and `z`, binary mediator `m` and
/// outcome `y`, with selection depending on `(y, b)` only.
///
/// Outcome: `logit P(y=1) = b0 + bb [b=2] + ba a + bs s + bz z + bm m + bam a m`.
/// Mediator: `logit P(m=1) = d0 + db [b=2] + da a + ds s`.
#[derive(Debug, Clone)]
pub struct ToyPopulation {
    pub beta: BTreeMap<&'static str, f64>,
    pub delta: BTreeMap<&'static str, f64>,
    /// `P(a, b, s, z)` indexed by `8a + 4(b-1) + 2s + z`.
    pub cell_prob: [f64; 16],
    /// `P(W=1 | y, b)` indexed `[y][b-1]`.
    pub selection: [[f64; 2]; 2],
}

pub const TOY_OUTCOME: &str = "a + s + z + m + a:m";
pub const TOY_MEDIATOR: &str = "a + s";

pub fn toy_roles() -> Roles {
    Roles {
        outcome: "y".into(),
        mediator: "m".into(),
        stratum: Some("b".into()),
    }
}

pub fn toy_formula() -> ModelFormula {
    parse_formula(TOY_OUTCOME, TOY_MEDIATOR, &toy_roles()).unwrap()
}

pub fn toy_layout() -> DesignLayout {
    build_layout(&toy_formula(), 2, |_| Some(VariableKind::Numeric)).unwrap()
}

impl ToyPopulation {
    pub fn random(rng: &mut impl Rng) -> ToyPopulation {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let beta = BTreeMap::from([
            ("(Intercept)", u(-3.0, 0.0)),
            ("b=2", u(-1.5, 1.5)),
            ("a", u(-1.5, 1.5)),
            ("s", u(-1.5, 1.5)),
            ("z", u(-1.5, 1.5)),
            ("m", u(-1.5, 1.5)),
            ("a:m", u(-1.5, 1.5)),
        ]);
        let delta = BTreeMap::from([
            ("(Intercept)", u(-2.0, 1.0)),
            ("b=2", u(-1.5, 1.5)),
            ("a", u(-1.5, 1.5)),
            ("s", u(-1.5, 1.5)),
        ]);
        let mut cell_prob = [0.0; 16];
        for p in cell_prob.iter_mut() {
            *p = u(0.05, 1.0);
        }
        let total: f64 = cell_prob.iter().sum();
        cell_prob.iter_mut().for_each(|p| *p /= total);
        let selection = [[u(0.01, 1.0), u(0.01, 1.0)], [u(0.01, 1.0), u(0.01, 1.0)]];
        ToyPopulation {
            beta,
            delta,
            cell_prob,
            selection,
        }
    }

    pub fn p_m(&self, a: u8, b: usize, s: u8) -> f64 {
        let d = &self.delta;
        expit(d["(Intercept)"] + d["b=2"] * f64::from(u8::from(b == 2)) + d["a"] * f64::from(a) + d["s"] * f64::from(s))
    }

    pub fn p_y(&self, a: u8, b: usize, s: u8, z: u8, m: u8) -> f64 {
        let t = &self.beta;
        let (a, s, z, m) = (f64::from(a), f64::from(s), f64::from(z), f64::from(m));
        expit(
            t["(Intercept)"]
                + t["b=2"] * f64::from(u8::from(b == 2))
                + t["a"] * a
                + t["s"] * s
                + t["z"] * z
                + t["m"] * m
                + t["a:m"] * a * m,
        )
    }

    fn cell(a: u8, b: usize, s: u8, z: u8) -> usize {
        8 * a as usize + 4 * (b - 1) + 2 * s as usize + z as usize
    }

    /// Joint `P(a, b, s, z, m, y)` in the population.
    pub fn joint(&self, a: u8, b: usize, s: u8, z: u8, m: u8, y: u8) -> f64 {
        let pm = self.p_m(a, b, s);
        let py = self.p_y(a, b, s, z, m);
        self.cell_prob[Self::cell(a, b, s, z)]
            * if m == 1 { pm } else { 1.0 - pm }
            * if y == 1 { py } else { 1.0 - py }
    }

    /// Joint `P(a, b, s, z, m, y, W=1)`.
    pub fn joint_selected(&self, a: u8, b: usize, s: u8, z: u8, m: u8, y: u8) -> f64 {
        self.joint(a, b, s, z, m, y) * self.selection[y as usize][b - 1]
    }

    /// Sums `f(a, s, z, m, y)` over all binary combinations.
    fn sum_over(f: impl Fn(u8, u8, u8, u8, u8) -> f64) -> f64 {
        let mut total = 0.0;
        for a in 0..2 {
            for s in 0..2 {
                for z in 0..2 {
                    for m in 0..2 {
                        for y in 0..2 {
                            total += f(a, s, z, m, y);
                        }
                    }
                }
            }
        }
        total
    }

    /// `P(Y=1 | B=b)` in the population.
    pub fn prevalence(&self, b: usize) -> f64 {
        let cases = Self::sum_over(|a, s, z, m, y| if y == 1 { self.joint(a, b, s, z, m, y) } else { 0.0 });
        cases / Self::sum_over(|a, s, z, m, y| self.joint(a, b, s, z, m, y))
    }

    /// `P(Y=1 | B=b, W=1)`: the case fraction of the selected population.
    pub fn selected_case_fraction(&self, b: usize) -> f64 {
        let cases = Self::sum_over(|a, s, z, m, y| if y == 1 { self.joint_selected(a, b, s, z, m, y) } else { 0.0 });
        cases / Self::sum_over(|a, s, z, m, y| self.joint_selected(a, b, s, z, m, y))
    }

    pub fn prevalence_design(&self) -> PrevalenceDesign {
        let pi = [self.prevalence(1), self.prevalence(2)];
        let p = [self.selected_case_fraction(1), self.selected_case_fraction(2)];
        PrevalenceDesign::from_proportions(&pi, &p).unwrap()
    }

    /// Enumerated `logit P(M=1 | a, b, s, z, y, W=1)`.
    pub fn selected_mediator_logit(&self, a: u8, b: usize, s: u8, z: u8, y: u8) -> f64 {
        (self.joint_selected(a, b, s, z, 1, y) / self.joint_selected(a, b, s, z, 0, y)).ln()
    }

    /// Enumerated `P(Y=1 | a, b, s, z, W=1)` with the mediator summed out.
    pub fn selected_outcome_prob(&self, a: u8, b: usize, s: u8, z: u8) -> f64 {
        let num: f64 = (0..2).map(|m| self.joint_selected(a, b, s, z, m, 1)).sum();
        let den: f64 = (0..2)
            .flat_map(|m| (0..2).map(move |y| (m, y)))
            .map(|(m, y)| self.joint_selected(a, b, s, z, m, y))
            .sum();
        num / den
    }

    /// Enumerated `log P(Y=y, M=m | a, b, s, z, W=1)`.
    pub fn selected_log_prob(&self, a: u8, b: usize, s: u8, z: u8, m: u8, y: u8) -> f64 {
        let den: f64 = (0..2)
            .flat_map(|mm| (0..2).map(move |yy| (mm, yy)))
            .map(|(mm, yy)| self.joint_selected(a, b, s, z, mm, yy))
            .sum();
        (self.joint_selected(a, b, s, z, m, y) / den).ln()
    }

    /// The population parameters laid out for `layout`, matched by column
    /// name.
    pub fn theta(&self, layout: &DesignLayout) -> Theta {
        let beta = DVector::from_iterator(
            layout.d_beta(),
            layout.outcome_columns.iter().map(|c| self.beta[c.name.as_str()]),
        );
        let delta = DVector::from_iterator(
            layout.d_delta(),
            layout.mediator_columns.iter().map(|c| self.delta[c.name.as_str()]),
        );
        Theta::new(beta, delta, layout).unwrap()
    }
}

/// One toy unit: `(a, b, s, z, m, y)`.
pub type ToyUnit = (u8, usize, u8, u8, u8, u8);

pub fn toy_dataset(units: &[ToyUnit]) -> Dataset {
    let schema = Schema {
        outcome: "y".into(),
        mediator: "m".into(),
        stratum: Some("b".into()),
        categorical: vec![],
    };
    let num = |f: fn(&ToyUnit) -> u8| Column::Numeric(units.iter().map(|u| f64::from(f(u))).collect());
    Dataset::new(
        &schema,
        units.iter().map(|u| u.5).collect(),
        units.iter().map(|u| u.4).collect(),
        Some(units.iter().map(|u| u.1).collect()),
        vec![("a".into(), num(|u| u.0)), ("s".into(), num(|u| u.2)), ("z".into(), num(|u| u.3))],
    )
    .unwrap()
}

pub fn toy_partition(units: &[ToyUnit]) -> DesignPartition {
    build_design(&toy_dataset(units), &toy_formula()).unwrap()
}

/// Random units; both strata always appear so the layout has two.
pub fn random_toy_units(rng: &mut impl Rng, n: usize) -> Vec<ToyUnit> {
    let mut units: Vec<ToyUnit> = (0..n)
        .map(|_| {
            (
                rng.random_range(0..2),
                rng.random_range(1..3),
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(0..2),
            )
        })
        .collect();
    for b in 1..3 {
        if !units.iter().any(|u| u.1 == b) {
            units[b - 1].1 = b;
        }
    }
    units
}

/// One simulated case-control sample from a built-in scenario, drawn with
/// stream `stream` of `seed`.
pub fn scenario_sample(scn: &SimScenario, seed: u64, stream: u64) -> (DesignPartition, PrevalenceDesign) {
    let model = scn.model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let pop = generate_population_counts(&model, scn.population_size, &mut rng);
    let data = scc_sample_counts(&model, &pop, &mut rng).unwrap();
    let part = build_design(&data, &model.formula).unwrap();
    let prev = PrevalenceDesign::for_sample(&pop.exact_prevalence(), &part).unwrap();
    (part, prev)
}

/// Five-point central difference of `f` along coordinate `j`.
pub fn five_point(f: &mut impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>, j: usize, h: f64) -> f64 {
    let at = |t: f64| {
        let mut v = x.clone();
        v[j] += t;
        v
    };
    let (f2, f1, m1, m2) = (f(&at(2.0 * h)), f(&at(h)), f(&at(-h)), f(&at(-2.0 * h)));
    (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h)
}

/// Five-point Jacobian of a vector function; column `j` is `d f / d x_j`.
pub fn five_point_jacobian(f: &mut impl FnMut(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let rows = f(x).len();
    let mut jac = DMatrix::zeros(rows, n);
    for j in 0..n {
        let at = |t: f64| {
            let mut v = x.clone();
            v[j] += t;
            v
        };
        let col = (f(&at(h)) * 8.0 - f(&at(-h)) * 8.0 - f(&at(2.0 * h)) + f(&at(-2.0 * h))) / (12.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// `|a - b| / max(|b|, 1)`: relative error with an absolute floor for
/// entries near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Listeriosis-style design over `ri` (0, 1, 2), `age` (three classes) and
/// the `gas` mediator, with every combination present.
pub fn risk_factor_layout(outcome_formula: &str) -> DesignLayout {
    let ri: Vec<&str> = ["0", "1", "2"].repeat(12);
    let age: Vec<&str> = ["40-65", "66-75", "76+"].iter().flat_map(|a| std::iter::repeat_n(*a, 3)).collect::<Vec<_>>().repeat(4);
    let n = ri.len();
    let y: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
    let m: Vec<u8> = (0..n).map(|i| u8::from((i / 9) % 2 == 0)).collect();
    let schema = Schema {
        outcome: "y".into(),
        mediator: "gas".into(),
        stratum: None,
        categorical: vec!["ri".into(), "age".into()],
    };
    let data = Dataset::new(
        &schema,
        y,
        m,
        None,
        vec![
            ("ri".into(), Column::categorical_from_labels(&ri)),
            ("age".into(), Column::categorical_from_labels(&age)),
        ],
    )
    .unwrap();
    let roles = Roles {
        outcome: "y".into(),
        mediator: "gas".into(),
        stratum: None,
    };
    let formula = parse_formula(outcome_formula, "ri", &roles).unwrap();
    build_design(&data, &formula).unwrap().layout
}

/// A fit carrying fixed published coefficients and a diagonal covariance
/// built from the published standard errors.
pub fn fixed_fit(outcome_formula: &str, beta: &[f64], delta: &[f64], se: &[f64]) -> FitResult {
    let layout = risk_factor_layout(outcome_formula);
    let theta = Theta::new(DVector::from_row_slice(beta), DVector::from_row_slice(delta), &layout).unwrap();
    let prevalence = PrevalenceDesign::from_proportions(&[1.7e-7], &[109.0 / 981.0]).unwrap();
    FitResult {
        method: Method::M,
        beta_star_hat: adjust_to_star(&theta.beta, &layout, &prevalence).unwrap(),
        theta,
        covariance: DMatrix::from_diagonal(&DVector::from_iterator(se.len(), se.iter().map(|s| s * s))),
        layout,
        prevalence,
        converged: true,
        loglik: f64::NAN,
        diagnostics: Diagnostics::default(),
    }
}

/// Published M-estimates of the main-effects pair: outcome
/// (intercept, ri=1, ri=2, age=66-75, age=76+, gas), mediator
/// (intercept, ri=1, ri=2), with their standard errors.
pub const MAIN_BETA: [f64; 6] = [-16.951, 1.287, 2.190, 1.014, 0.711, 0.987];
pub const MAIN_DELTA: [f64; 3] = [-3.276, 0.844, 0.839];
pub const MAIN_SE: [f64; 9] = [0.228, 0.289, 0.279, 0.263, 0.307, 0.308, 0.219, 0.332, 0.344];

/// Published M-estimates of the interaction pair; the four interaction
/// columns run ri=1:age=66-75, ri=2:age=66-75, ri=1:age=76+, ri=2:age=76+.
pub const INTERACTION_BETA: [f64; 10] = [-17.089, 0.871, 2.696, 0.893, 1.471, 1.239, -0.566, -0.441, -1.537, 0.982];
pub const INTERACTION_DELTA: [f64; 3] = [-3.276, 0.845, 0.841];
pub const INTERACTION_SE: [f64; 13] = [
    0.297, 0.564, 0.393, 0.477, 0.467, 0.752, 0.657, 0.780, 0.673, 0.311, 0.219, 0.330, 0.347,
];

/// Largest gap, over every cell of `pop`, between the enumerated
/// selection-conditional mediator logit and `x_m'delta + o(y, x_y0; beta)`.
pub fn identity_gap(pop: &ToyPopulation) -> f64 {
    use scc_mediate::correction::offset_o;
    use scc_mediate::design::{Profile, Value};
    let layout = toy_layout();
    let theta = pop.theta(&layout);
    let mut worst: f64 = 0.0;
    for a in 0..2u8 {
        for b in 1..=2usize {
            for s in 0..2u8 {
                for z in 0..2u8 {
                    let profile = Profile {
                        stratum: b,
                        ..Profile::default()
                    }
                    .with("a", Value::Number(f64::from(a)))
                    .with("s", Value::Number(f64::from(s)))
                    .with("z", Value::Number(f64::from(z)));
                    let x_y0 = layout.encode_outcome(&profile).unwrap().rows(0, layout.d_beta0).into_owned();
                    let x_m = layout.encode_mediator(&profile).unwrap();
                    for y in 0..2u8 {
                        let model = x_m.dot(&theta.delta) + offset_o(f64::from(y), &x_y0, &theta, &layout).unwrap();
                        worst = worst.max((model - pop.selected_mediator_logit(a, b, s, z, y)).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Largest gap between `loglik` and the enumerated selection-conditional
/// log-probability over `datasets` random datasets of 2 to 8 units.
pub fn likelihood_gap(seed: u64, datasets: usize) -> f64 {
    use scc_mediate::mle::loglik;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..datasets {
        let pop = ToyPopulation::random(&mut rng);
        let n = rng.random_range(2..=8);
        let mut units = random_toy_units(&mut rng, n);
        // Every stratum must be present in a dataset.
        units[0].1 = 1;
        units[1].1 = 2;
        let part = toy_partition(&units);
        let theta = pop.theta(&part.layout);
        let ours = loglik(&theta, &part, &pop.prevalence_design()).unwrap();
        let oracle: f64 = units.iter().map(|&(a, b, s, z, m, y)| pop.selected_log_prob(a, b, s, z, m, y)).sum();
        worst = worst.max((ours - oracle).abs());
    }
    worst
}

/// Random parameter vector near the scenario truth.
pub fn perturbed_truth(scn: &SimScenario, rng: &mut impl Rng, spread: f64) -> DVector<f64> {
    let model = scn.model().unwrap();
    model.truth().map(|v| v + rng.random_range(-spread..spread))
}

/// Worst componentwise relative error of the analytic gradient against
/// five-point differences of the log-likelihood over `draws` random
/// (theta, sample) pairs from `scn`.
pub fn gradient_gap(scn: &SimScenario, draws: usize, seed: u64) -> f64 {
    use scc_mediate::mle::{gradient, loglik};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..draws {
        let (part, prev) = scenario_sample(scn, seed, k as u64);
        let layout = part.layout.clone();
        let x = perturbed_truth(scn, &mut rng, 0.5);
        let analytic = gradient(&Theta::from_vector(&x, &layout).unwrap(), &part, &prev).unwrap();
        let mut f = |v: &DVector<f64>| loglik(&Theta::from_vector(v, &layout).unwrap(), &part, &prev).unwrap();
        for j in 0..x.len() {
            worst = worst.max(rel_err(analytic[j], five_point(&mut f, &x, j, 1e-3)));
        }
    }
    worst
}

/// Worst relative error of `a_matrix` against the five-point Jacobian of
/// `psi / n`, at the M-estimate and at a perturbed point, over `draws`
/// samples; also the largest `psi` sup-norm at the M-estimates.
pub fn m_estimation_gaps(scn: &SimScenario, draws: usize, seed: u64) -> (f64, f64) {
    use scc_mediate::mest::{a_matrix, fit_m, psi};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a_gap, mut psi_gap): (f64, f64) = (0.0, 0.0);
    for k in 0..draws {
        let (part, prev) = scenario_sample(scn, seed, k as u64);
        let layout = part.layout.clone();
        let fit = fit_m(&part, &prev).unwrap();
        assert!(fit.converged);
        let at_hat = fit.theta.to_vector();
        psi_gap = psi_gap.max(psi(&fit.theta, &part, &prev).unwrap().amax());
        let n = part.n() as f64;
        for x in [at_hat.clone(), at_hat.map(|v| v + rng.random_range(-0.2..0.2))] {
            let analytic = a_matrix(&Theta::from_vector(&x, &layout).unwrap(), &part, &prev).unwrap();
            let mut f = |v: &DVector<f64>| psi(&Theta::from_vector(v, &layout).unwrap(), &part, &prev).unwrap() / n;
            a_gap = a_gap.max(max_rel_err(&analytic, &five_point_jacobian(&mut f, &x, 1e-3)));
        }
    }
    (a_gap, psi_gap)
}

pub fn main_fit() -> FitResult {
    fixed_fit("ri + age + gas", &MAIN_BETA, &MAIN_DELTA, &MAIN_SE)
}

pub fn interaction_fit() -> FitResult {
    fixed_fit("ri + age + ri:age + gas", &INTERACTION_BETA, &INTERACTION_DELTA, &INTERACTION_SE)
}

/// Adds the within-model covariance of a saturated categorical mediator
/// model: each level effect has covariance `-Var(intercept)` with the
/// intercept and `Var(intercept)` with the other level effects.
pub fn with_saturated_mediator_covariance(mut fit: FitResult) -> FitResult {
    let dy = fit.layout.d_beta();
    let v0 = fit.covariance[(dy, dy)];
    for i in 1..fit.layout.d_delta() {
        fit.covariance[(dy, dy + i)] = -v0;
        fit.covariance[(dy + i, dy)] = -v0;
        for j in 1..fit.layout.d_delta() {
            if i != j {
                fit.covariance[(dy + i, dy + j)] = v0;
            }
        }
    }
    fit
}

/// (variable, level, reference, fixed variable, fixed level, value).
pub type PublishedContrast = (&'static str, &'static str, &'static str, &'static str, &'static str, f64);

/// Published M-estimation contrasts of the main-effects model.
pub const MAIN_CONTRASTS: [PublishedContrast; 6] = [
    ("age", "66-75", "40-65", "", "", 1.014),
    ("age", "76+", "40-65", "", "", 0.711),
    ("age", "76+", "66-75", "", "", -0.303),
    ("ri", "1", "0", "", "", 1.287),
    ("ri", "2", "0", "", "", 2.190),
    ("ri", "2", "1", "", "", 0.903),
];

/// Published M-estimation contrasts of the interaction model.
pub const INTERACTION_CONTRASTS: [PublishedContrast; 18] = [
    ("age", "66-75", "40-65", "ri", "0", 0.893),
    ("age", "66-75", "40-65", "ri", "1", 2.132),
    ("age", "66-75", "40-65", "ri", "2", 0.327),
    ("age", "76+", "40-65", "ri", "0", 1.471),
    ("age", "76+", "40-65", "ri", "1", 1.030),
    ("age", "76+", "40-65", "ri", "2", -0.066),
    ("age", "76+", "66-75", "ri", "0", 0.578),
    ("age", "76+", "66-75", "ri", "1", -1.102),
    ("age", "76+", "66-75", "ri", "2", -0.393),
    ("ri", "1", "0", "age", "40-65", 0.871),
    ("ri", "1", "0", "age", "66-75", 2.110),
    ("ri", "1", "0", "age", "76+", 0.430),
    ("ri", "2", "0", "age", "40-65", 2.696),
    ("ri", "2", "0", "age", "66-75", 2.131),
    ("ri", "2", "0", "age", "76+", 1.160),
    ("ri", "2", "1", "age", "40-65", 1.825),
    ("ri", "2", "1", "age", "66-75", 0.021),
    ("ri", "2", "1", "age", "76+", 0.729),
];

pub fn published_contrast_estimate(fit: &FitResult, variable: &str, level: &str, reference: &str, at_var: &str, at_level: &str) -> f64 {
    let mut at = Profile::reference(&fit.layout);
    if !at_var.is_empty() {
        at = at.with_level(at_var, at_level);
    }
    let request = ContrastRequest {
        contrast: Contrast::levels(variable, level, reference),
        at,
    };
    contrast_table(fit, &[request]).unwrap()[0].estimate
}
