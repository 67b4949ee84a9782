use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use findep_core::dp::{self, Panel};
use findep_core::estimate::bench::run_bench;
use findep_core::estimate::monte_carlo::{build_truth, monte_carlo};
use findep_core::estimate::{fd_estimate, EstimationReport, EstimatorConfig, WeightPath};
use findep_core::linalg::save_matrix;
use findep_core::markov::{build_entry_model, TransitionSet};
use findep_core::weights::{self, Operator, PlanKind, WeightPlan};
use serde::{Deserialize, Serialize};

use crate::config::{PlanChoice, RunConfig};

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    pub hash: &'a str,
}

impl Ctx<'_> {
    fn write_json<T: Serialize>(&self, name: &str, v: &T, files: &mut Vec<String>) -> Result<()> {
        let text = serde_json::to_string_pretty(v)?;
        std::fs::write(self.out.join(name), text + "\n").with_context(|| format!("writing {name}"))?;
        files.push(name.to_string());
        Ok(())
    }
}

pub fn simulate(ctx: &Ctx) -> Result<Vec<String>> {
    let e = &ctx.cfg.estimation;
    let truth = build_truth(&ctx.cfg.model)?;
    let mut panel = dp::simulate_panel(&truth.solution, &truth.dynamic, e.n_units, e.n_periods, e.seed, e.replication)?;
    panel.manifest.truth.config_hash = Some(ctx.hash.to_string());
    panel.save(ctx.out)?;
    Ok(vec!["panel.csv".into(), "panel.json".into()])
}

/// What `weights` records next to the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub kind: PlanKind,
    pub origin: usize,
    pub rho: usize,
    pub n_states: usize,
    pub factored: bool,
    pub residual_norms: Vec<f64>,
    pub residual_frobenius: Vec<f64>,
    /// Entries flagged as unreachable, per step.
    pub flagged: Vec<usize>,
}

fn write_operator(op: &Operator, dir: &Path, stem: &str, files: &mut Vec<String>) -> Result<()> {
    match op {
        Operator::Dense(m) => {
            let name = format!("{stem}.csv");
            save_matrix(m, &dir.join(&name))?;
            files.push(name);
        }
        Operator::Kron { endo, exo } => {
            let name = format!("{stem}_endo.csv");
            save_matrix(endo, &dir.join(&name))?;
            files.push(name);
            for (j, f) in exo.iter().enumerate() {
                let name = format!("{stem}_exo{j}.csv");
                save_matrix(f, &dir.join(&name))?;
                files.push(name);
            }
        }
    }
    Ok(())
}

fn dense_plan(ts: &TransitionSet, cfg: &RunConfig) -> Result<WeightPlan> {
    let s = &cfg.solver;
    Ok(match s.plan {
        PlanChoice::Sequential => weights::solve_sequential_periods(ts, s.origin, s.rho)?,
        PlanChoice::TwoPeriod => weights::two_period_plan(ts, s.origin)?,
    })
}

pub fn solve_weights(cfg: &RunConfig) -> Result<WeightPlan> {
    if let Some(dir) = &cfg.inputs.transitions {
        return dense_plan(&TransitionSet::load(dir)?, cfg);
    }
    let s = &cfg.solver;
    let kf = findep_core::markov::build_entry_factors(&cfg.model)?.factors;
    let kron = || -> Result<WeightPlan, weights::WeightsError> {
        match s.plan {
            PlanChoice::Sequential => weights::kron_sequential(&kf, s.origin, s.rho),
            PlanChoice::TwoPeriod => weights::kron_two_period(&kf, s.origin),
        }
    };
    match s.weight_path {
        WeightPath::Kron => Ok(kron()?),
        WeightPath::Dense => dense_plan(&kf.to_transition_set(cfg.model.max_dense_states)?, cfg),
        WeightPath::Auto => match kron() {
            Err(weights::WeightsError::SingularExogenous { .. }) => {
                dense_plan(&kf.to_transition_set(cfg.model.max_dense_states)?, cfg)
            }
            r => Ok(r?),
        },
    }
}

pub fn weights_cmd(ctx: &Ctx) -> Result<Vec<String>> {
    let plan = solve_weights(ctx.cfg)?;
    let mut files = Vec::new();
    write_operator(&plan.base, ctx.out, "K0", &mut files)?;
    for s in 0..plan.rho() {
        write_operator(&plan.weights[s], ctx.out, &format!("W{}", s + 1), &mut files)?;
        write_operator(&plan.residuals[s], ctx.out, &format!("K{}", s + 1), &mut files)?;
    }
    let summary = PlanSummary {
        kind: plan.kind,
        origin: plan.origin,
        rho: plan.rho(),
        n_states: plan.n_states(),
        factored: matches!(plan.base, Operator::Kron { .. }),
        residual_norms: plan.residual_norms.clone(),
        residual_frobenius: plan.residual_frobenius.clone(),
        flagged: plan.flags.iter().map(Vec::len).collect(),
    };
    ctx.write_json("plan.json", &summary, &mut files)?;
    Ok(files)
}

pub fn diagnose(ctx: &Ctx) -> Result<Vec<String>> {
    let cfg = ctx.cfg;
    let ts = match (&cfg.inputs.f0, &cfg.inputs.f1, &cfg.inputs.transitions) {
        (Some(f0), Some(f1), _) => TransitionSet::stationary(
            findep_core::linalg::load_matrix(f0)?,
            findep_core::linalg::load_matrix(f1)?,
        )?,
        (_, _, Some(dir)) => TransitionSet::load(dir)?,
        _ => build_entry_model(&cfg.model)?.0,
    };
    let t = cfg.solver.origin;
    let d = weights::diagnose_finite_dependence(&ts.ftilde(t)?, ts.f(0, t)?, cfg.solver.tol)?;
    let mut files = Vec::new();
    ctx.write_json("diagnosis.json", &d, &mut files)?;
    Ok(files)
}

pub fn estimate(ctx: &Ctx) -> Result<Vec<String>> {
    let cfg = ctx.cfg;
    let panel = Panel::load(cfg.inputs.panel.as_ref().expect("validated"))?;
    let truth = build_truth(&cfg.model)?;
    if panel.manifest.n_states != truth.estimation.transitions.n_states() {
        bail!(
            "panel has {} states but the model has {}",
            panel.manifest.n_states,
            truth.estimation.transitions.n_states()
        );
    }
    let reports: Vec<EstimationReport> = cfg
        .estimation
        .estimators
        .iter()
        .map(|&kind| {
            let ec = EstimatorConfig {
                kind,
                ccp_mode: cfg.estimation.ccp_mode,
                weight_path: cfg.solver.weight_path,
            };
            fd_estimate(&panel, &truth.estimation, &ec, Some(&truth.solution.ccp))
        })
        .collect::<Result<_, _>>()?;
    let mut files = Vec::new();
    ctx.write_json("estimate.json", &reports, &mut files)?;
    Ok(files)
}

pub fn mc(ctx: &Ctx) -> Result<Vec<String>> {
    let report = monte_carlo(&ctx.cfg.mc())?;
    let mut files = Vec::new();
    report.write_csv(&ctx.out.join("mc.csv"))?;
    files.push("mc.csv".into());
    ctx.write_json("mc.json", &report, &mut files)?;
    Ok(files)
}

pub fn bench(ctx: &Ctx) -> Result<Vec<String>> {
    let rows = run_bench(&ctx.cfg.bench_config())?;
    let mut w = csv::Writer::from_path(ctx.out.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(vec!["bench.csv".into()])
}

pub fn default_out(command: &str, hash: &str) -> PathBuf {
    PathBuf::from("out").join(format!("{command}-{hash}"))
}
