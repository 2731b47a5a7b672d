use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use scc_mediate::correction::PrevalenceDesign;
use scc_mediate::data::{load_csv, Schema};
use scc_mediate::design::{build_design, DesignLayout, Factor, Profile};
use scc_mediate::effects::{compute_effects, Contrast, EffectEstimate};
use scc_mediate::fit::{FitRecord, FitResult, Method};
use scc_mediate::formula::{parse_formula, Roles};
use scc_mediate::mest::fit_m;
use scc_mediate::mle::fit_ml;
use scc_mediate::sim::{format_sig, metrics_csv, run_monte_carlo, summary_table, SimScenario};
use scc_mediate::weighting::fit_weighting;

use crate::config::{ContrastSpec, EffectsRun, RunConfig};

/// Significant digits of every number printed to the terminal.
pub const DIGITS: usize = 6;

pub const FIT_ARTIFACT: &str = "fit.json";
pub const COEFFICIENTS_CSV: &str = "coefficients.csv";
pub const EFFECTS_CSV: &str = "effects.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Everything `fit` produces, in one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub config: RunConfig,
    pub n: usize,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
    pub fits: BTreeMap<Method, FitRecord>,
    /// Error message of every estimator that produced no estimate.
    pub failures: BTreeMap<Method, String>,
}

fn fmt(x: f64) -> String {
    format_sig(x, DIGITS)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Two-sided normal p-value of `z`.
pub fn p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Outcome of a command that ran to completion: `false` when some requested
/// estimator failed or did not converge.
pub type Completed = bool;

pub fn cmd_fit(run: &RunConfig) -> Result<Completed> {
    let schema = Schema {
        outcome: run.outcome.clone(),
        mediator: run.mediator.clone(),
        stratum: run.stratum.clone(),
        categorical: run.categorical.clone(),
    };
    let data = load_csv(&run.data, &schema).with_context(|| format!("reading {}", run.data.display()))?;
    let roles = Roles {
        outcome: run.outcome.clone(),
        mediator: run.mediator.clone(),
        stratum: run.stratum.clone(),
    };
    let formula = parse_formula(&run.outcome_formula, &run.mediator_formula, &roles)?;
    let part = build_design(&data, &formula)?;
    let n_strata = part.layout.n_strata;
    if run.pi.len() < n_strata {
        bail!(
            "missing prevalence for stratum {} of {n_strata}: give one pi per stratum",
            run.pi.len() + 1
        );
    }
    if run.pi.len() > n_strata {
        bail!("{} prevalences given but the data have {n_strata} strata", run.pi.len());
    }
    let prev = PrevalenceDesign::for_sample(&run.pi, &part)?;

    let mut fits = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for &method in &run.estimators {
        let fit = match method {
            Method::M => fit_m(&part, &prev).map_err(|e| e.to_string()),
            Method::Ml => fit_ml(&part, &prev, &run.ml).map_err(|e| e.to_string()),
            Method::Weighting => fit_weighting(&part, &prev).map_err(|e| e.to_string()),
        };
        match fit {
            Ok(f) => {
                fits.insert(method, f);
            }
            Err(e) => {
                eprintln!("error: {method} estimator failed: {e}");
                failures.insert(method, e);
            }
        }
    }

    let (cases, controls) = data.case_control_counts();
    let artifact = FitArtifact {
        config: run.clone(),
        n: data.n(),
        cases,
        controls,
        fits: fits.iter().map(|(&m, f)| (m, f.to_record())).collect(),
        failures,
    };
    create_dir(&run.out)?;
    write_file(&run.out.join(FIT_ARTIFACT), &serde_json::to_string_pretty(&artifact)?)?;
    write_file(&run.out.join(COEFFICIENTS_CSV), &coefficient_csv(&fits)?)?;
    print!("{}", coefficient_table(&part.layout, &fits));

    let mut complete = artifact.failures.is_empty();
    for (method, fit) in &fits {
        if !fit.converged {
            eprintln!("error: {method} estimator did not converge");
            complete = false;
        }
        for msg in &fit.diagnostics.messages {
            eprintln!("warning: {method}: {msg}");
        }
    }
    Ok(complete)
}

/// One row per parameter and estimator, full precision. `estimate_sample`
/// is the sample-scale outcome coefficient and is empty for mediator rows.
pub fn coefficient_csv(fits: &BTreeMap<Method, FitResult>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["estimator", "parameter", "estimate", "estimate_sample", "se", "z", "p_value"])?;
    for (method, fit) in fits {
        let theta = fit.theta_vector();
        let se = fit.se();
        let d_beta = fit.layout.d_beta();
        for (j, name) in fit.parameter_names().iter().enumerate() {
            let z = theta[j] / se[j];
            let star = if j < d_beta { fit.beta_star_hat[j].to_string() } else { String::new() };
            w.write_record([
                method.label().to_string(),
                name.clone(),
                theta[j].to_string(),
                star,
                se[j].to_string(),
                z.to_string(),
                p_value(z).to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Parameters as rows, one `estimate (se)` column per estimator.
fn coefficient_table(layout: &DesignLayout, fits: &BTreeMap<Method, FitResult>) -> String {
    let names = layout.parameter_names();
    let width = names.iter().map(String::len).max().unwrap_or(9).max(9);
    let mut out = format!("{:width$}", "parameter");
    for method in fits.keys() {
        out.push_str(&format!("  {:>24}", format!("{method} estimate (se)")));
    }
    out.push('\n');
    for (j, name) in names.iter().enumerate() {
        out.push_str(&format!("{name:width$}"));
        for fit in fits.values() {
            let cell = format!("{} ({})", fmt(fit.theta_vector()[j]), fmt(fit.se()[j]));
            out.push_str(&format!("  {cell:>24}"));
        }
        out.push('\n');
    }
    out
}

/// Every non-reference level of each categorical variable in the mediator
/// model, against the reference level.
fn default_contrasts(layout: &DesignLayout) -> Vec<ContrastSpec> {
    let mut vars: Vec<&str> = Vec::new();
    for col in &layout.mediator_columns {
        for f in &col.factors {
            if let Factor::Level { variable, .. } = f {
                if !vars.contains(&variable.as_str()) {
                    vars.push(variable);
                }
            }
        }
    }
    let mut out = Vec::new();
    for var in vars {
        let levels = layout.levels(var).unwrap_or_default();
        for level in levels.iter().skip(1) {
            out.push(ContrastSpec {
                variable: var.to_string(),
                level: scc_mediate::design::Value::Level(level.clone()),
                reference: scc_mediate::design::Value::Level(levels[0].clone()),
                at: BTreeMap::new(),
                stratum: None,
            });
        }
    }
    out
}

fn pattern_label(p: &Profile, skip: &str) -> String {
    let mut parts: Vec<String> = p
        .values
        .iter()
        .filter(|(k, _)| k.as_str() != skip)
        .map(|(k, v)| match v {
            scc_mediate::design::Value::Level(l) => format!("{k}={l}"),
            scc_mediate::design::Value::Number(x) => format!("{k}={x}"),
        })
        .collect();
    parts.push(format!("stratum={}", p.stratum));
    parts.join(";")
}

pub fn cmd_effects(run: &EffectsRun) -> Result<Completed> {
    let text = fs::read_to_string(&run.fit).with_context(|| format!("reading {}", run.fit.display()))?;
    let artifact: FitArtifact =
        serde_json::from_str(&text).with_context(|| format!("parsing fit artifact {}", run.fit.display()))?;
    let mut rows: Vec<(Method, EffectEstimate)> = Vec::new();
    let wanted = run.estimators.clone().unwrap_or_else(|| artifact.fits.keys().copied().collect());
    for method in &wanted {
        let Some(record) = artifact.fits.get(method) else {
            bail!("the fit artifact has no {method} fit");
        };
        let fit = record.clone().into_fit()?;
        let contrasts = if run.contrasts.is_empty() {
            default_contrasts(&fit.layout)
        } else {
            run.contrasts.clone()
        };
        if contrasts.is_empty() {
            bail!("no contrasts requested and the mediator model has no categorical exposure");
        }
        for spec in &contrasts {
            let mut pattern = Profile::reference(&fit.layout);
            for (k, v) in &spec.at {
                if !fit.layout.variables.contains_key(k) {
                    bail!("unknown variable `{k}` in `at`");
                }
                pattern = pattern.with(k, v.clone());
            }
            if let Some(b) = spec.stratum {
                pattern.stratum = b;
            }
            let contrast = Contrast {
                variable: spec.variable.clone(),
                level: spec.level.clone(),
                reference: spec.reference.clone(),
            };
            let e = compute_effects(&fit, &contrast, &pattern)
                .with_context(|| format!("{method}: contrast {}", contrast.label()))?;
            rows.push((*method, e));
        }
    }

    create_dir(&run.out)?;
    write_file(&run.out.join(EFFECTS_CSV), &effects_csv(&rows)?)?;
    print!("{}", effects_table(&rows));
    Ok(true)
}

pub fn effects_csv(rows: &[(Method, EffectEstimate)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "estimator", "contrast", "pattern", "nde", "se_nde", "nie", "se_nie", "total", "se_total", "pm", "se_pm",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (method, e) in rows {
        w.write_record([
            method.label().to_string(),
            e.contrast.label(),
            pattern_label(&e.pattern, &e.contrast.variable),
            e.nde.to_string(),
            e.se_nde.to_string(),
            e.nie.to_string(),
            e.se_nie.to_string(),
            e.total.to_string(),
            e.se_total.to_string(),
            opt(e.prop_mediated),
            opt(e.se_pm),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn effects_table(rows: &[(Method, EffectEstimate)]) -> String {
    let mut out = String::new();
    for (method, e) in rows {
        let pm = match (e.prop_mediated, e.se_pm) {
            (Some(pm), Some(se)) => format!("{} ({})", fmt(pm), fmt(se)),
            _ => "undefined".into(),
        };
        out.push_str(&format!(
            "{method:<3} {} [{}]: NDE {} ({})  NIE {} ({})  total {} ({})  PM {pm}\n",
            e.contrast.label(),
            pattern_label(&e.pattern, &e.contrast.variable),
            fmt(e.nde),
            fmt(e.se_nde),
            fmt(e.nie),
            fmt(e.se_nie),
            fmt(e.total),
            fmt(e.se_total),
        ));
    }
    out
}

pub struct SimulateRun {
    pub scenario: SimScenario,
    pub estimators: Vec<Method>,
    pub out: std::path::PathBuf,
}

pub fn cmd_simulate(run: &SimulateRun) -> Result<Completed> {
    let output = run_monte_carlo(&run.scenario, &run.estimators)?;
    let metrics = &output.metrics;
    create_dir(&run.out)?;
    write_file(&run.out.join(METRICS_CSV), &metrics_csv(metrics))?;
    write_file(&run.out.join(METRICS_JSON), &serde_json::to_string_pretty(metrics)?)?;
    let summary = summary_table(metrics);
    write_file(&run.out.join(SUMMARY_TXT), &summary)?;
    print!("{summary}");
    Ok(true)
}
