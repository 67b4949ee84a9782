//! Monte Carlo harness: simulate panels from the true model, estimate, and
//! summarize per estimator and parameter.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    estimate_ccp, prepare, run_prepared, CcpMode, EstimateError, EstimationModel, EstimationReport, EstimatorConfig,
    EstimatorKind, Prepared, Result, WeightPath,
};
use crate::dp::{self, Panel, Solution};
use crate::markov::{build_entry_model, EntryModelConfig, MarkovError};
use crate::model::DynamicModel;

pub const RMSE_DEFINITION: &str = "rmse = sqrt(mean over successful replications of (estimate - true)^2)";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub model: EntryModelConfig,
    pub estimators: Vec<EstimatorKind>,
    pub n_units: usize,
    pub n_periods: usize,
    pub reps: usize,
    pub seed: u64,
    pub ccp_mode: CcpMode,
    pub weight_path: WeightPath,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            model: EntryModelConfig::default(),
            estimators: vec![EstimatorKind::HM, EstimatorKind::FD, EstimatorKind::FD2],
            n_units: 30,
            n_periods: 40,
            reps: 50,
            seed: 0,
            ccp_mode: CcpMode::Oracle,
            weight_path: WeightPath::Auto,
        }
    }
}

impl McConfig {
    /// Every offending key, prefixed with its path.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.validate().into_iter().map(|e| format!("model.{e}")).collect();
        for (key, v) in [("n_units", self.n_units), ("n_periods", self.n_periods), ("reps", self.reps)] {
            if v == 0 {
                errs.push(format!("{key}: must be positive"));
            }
        }
        if self.estimators.is_empty() {
            errs.push("estimators: must name at least one estimator".into());
        }
        let horizon = self.model.n_periods();
        if horizon > 1 {
            if self.n_periods > horizon {
                errs.push(format!("n_periods: {} exceeds the model horizon {horizon}", self.n_periods));
            }
            if self.estimators.contains(&EstimatorKind::HM) {
                errs.push("estimators: HM needs a stationary model".into());
            }
            if horizon < 3 {
                errs.push("model.demand_intercepts: two-period weights need at least 3 periods".into());
            }
        }
        errs
    }
}

/// The true model: DGP solution plus what the estimator sees.
#[derive(Debug, Clone)]
pub struct Truth {
    pub dynamic: DynamicModel,
    pub solution: Solution,
    pub estimation: EstimationModel,
}

pub fn build_truth(model: &EntryModelConfig) -> Result<Truth> {
    let errs = model.validate();
    if !errs.is_empty() {
        return Err(MarkovError::InvalidConfig(errs).into());
    }
    let (ts, em) = build_entry_model(model)?;
    let dynamic = DynamicModel::new(ts.clone(), em.utility.clone(), model.theta.clone(), model.beta)?;
    let solution = if ts.is_stationary() {
        dp::solve_stationary(&dynamic, 1e-12, dp::DEFAULT_VI_MAX_ITER)?
    } else {
        dp::solve_finite_horizon(&dynamic, None)?
    };
    Ok(Truth {
        dynamic,
        solution,
        estimation: EstimationModel {
            transitions: ts,
            factors: Some(em.factors),
            utility: em.utility,
            beta: model.beta,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct McRow {
    pub estimator: EstimatorKind,
    pub param: String,
    #[serde(rename = "true")]
    pub true_value: f64,
    pub mean: f64,
    pub rmse: f64,
    pub time_total: f64,
    pub time_weights_or_inv: f64,
    pub residual1: Option<f64>,
    pub residual2: Option<f64>,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReplicationResult {
    pub replication: u64,
    pub estimator: EstimatorKind,
    pub report: Option<EstimationReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct McReport {
    pub config: McConfig,
    pub rmse_definition: String,
    pub rows: Vec<McRow>,
    pub replications: Vec<ReplicationResult>,
    pub wall_time: f64,
}

impl McReport {
    pub fn row(&self, est: EstimatorKind, param: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == est && r.param == param)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Panel for replication `r`; identical to what `simulate` writes.
pub fn simulate_replication(truth: &Truth, cfg: &McConfig, r: u64) -> Result<Panel> {
    let mut panel = dp::simulate_panel(&truth.solution, &truth.dynamic, cfg.n_units, cfg.n_periods, cfg.seed, r)?;
    panel.manifest.truth.config_hash = None;
    Ok(panel)
}

fn one(
    prep: &Prepared,
    truth: &Truth,
    panel: &Panel,
    mode: CcpMode,
) -> Result<EstimationReport> {
    let p = estimate_ccp(
        panel,
        truth.estimation.transitions.is_stationary(),
        mode,
        Some(&truth.solution.ccp),
    )?;
    run_prepared(prep, &truth.estimation, panel, &p)
}

pub fn summarize(cfg: &McConfig, truth: &Truth, preps: &[Prepared], results: &[ReplicationResult]) -> Vec<McRow> {
    let mut rows = Vec::new();
    for (k, prep) in preps.iter().enumerate() {
        let est = cfg.estimators[k];
        let ok: Vec<&EstimationReport> = results
            .iter()
            .filter(|r| r.estimator == est)
            .filter_map(|r| r.report.as_ref())
            .filter(|r| r.converged)
            .collect();
        let failures = cfg.reps - ok.len();
        let n = ok.len() as f64;
        let avg = |f: &dyn Fn(&EstimationReport) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / n
            }
        };
        let time_weights_or_inv = if est == EstimatorKind::HM {
            avg(&|r| r.timing.weights_or_inv)
        } else {
            prep.weight_time
        };
        let time_total = avg(&|r| r.timing.total);
        let residual1 = ok.first().and_then(|r| r.residual1);
        let residual2 = ok.first().and_then(|r| r.residual2);
        for (j, name) in truth.estimation.utility.names.iter().enumerate() {
            let tv = cfg.model.theta[j];
            rows.push(McRow {
                estimator: est,
                param: name.clone(),
                true_value: tv,
                mean: avg(&|r| r.theta[j]),
                rmse: avg(&|r| (r.theta[j] - tv).powi(2)).sqrt(),
                time_total,
                time_weights_or_inv,
                residual1,
                residual2,
                reps: cfg.reps,
                failures,
            });
        }
    }
    rows
}

/// Weights are solved once per estimator; replications run in parallel
/// with streams keyed by `(seed, replication)`.
pub fn monte_carlo(cfg: &McConfig) -> Result<McReport> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(EstimateError::Markov(MarkovError::InvalidConfig(errs)));
    }
    let start = Instant::now();
    let truth = build_truth(&cfg.model)?;
    let preps = cfg
        .estimators
        .iter()
        .map(|&kind| {
            prepare(
                &EstimatorConfig {
                    kind,
                    ccp_mode: cfg.ccp_mode,
                    weight_path: cfg.weight_path,
                },
                &truth.estimation,
                None,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<ReplicationResult> = (0..cfg.reps as u64)
        .into_par_iter()
        .flat_map_iter(|r| {
            let panel = simulate_replication(&truth, cfg, r);
            preps
                .iter()
                .map(|prep| {
                    let out = panel.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                        one(prep, &truth, p, cfg.ccp_mode).map_err(|e| e.to_string())
                    });
                    match out {
                        Ok(rep) => ReplicationResult {
                            replication: r,
                            estimator: prep.kind,
                            error: (!rep.converged).then(|| "optimizer did not converge".to_string()),
                            report: Some(rep),
                        },
                        Err(e) => ReplicationResult {
                            replication: r,
                            estimator: prep.kind,
                            report: None,
                            error: Some(e),
                        },
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let rows = summarize(cfg, &truth, &preps, &results);
    Ok(McReport {
        config: cfg.clone(),
        rmse_definition: RMSE_DEFINITION.into(),
        rows,
        replications: results,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::fd_estimate;

    fn small() -> McConfig {
        McConfig {
            model: EntryModelConfig {
                action_feedback: 0.3,
                ..Default::default()
            },
            n_units: 40,
            n_periods: 20,
            reps: 3,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn single_replication_equals_direct_estimate() {
        let cfg = McConfig { reps: 1, ..small() };
        let rep = monte_carlo(&cfg).unwrap();
        let truth = build_truth(&cfg.model).unwrap();
        let panel = simulate_replication(&truth, &cfg, 0).unwrap();
        for &k in &cfg.estimators {
            let direct = fd_estimate(&panel, &truth.estimation, &EstimatorConfig::new(k), Some(&truth.solution.ccp)).unwrap();
            for (j, name) in direct.names.iter().enumerate() {
                assert_eq!(rep.row(k, name).unwrap().mean, direct.theta[j]);
            }
        }
    }

    #[test]
    fn same_seed_same_estimates() {
        let a = monte_carlo(&small()).unwrap();
        let b = monte_carlo(&small()).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!((x.mean, x.rmse), (y.mean, y.rmse));
        }
    }

    #[test]
    fn validation_lists_every_key() {
        let cfg = McConfig {
            n_units: 0,
            reps: 0,
            model: EntryModelConfig {
                beta: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let errs = cfg.validate();
        assert!(errs.iter().any(|e| e.starts_with("n_units")));
        assert!(errs.iter().any(|e| e.starts_with("reps")));
        assert!(errs.iter().any(|e| e.starts_with("model.beta")));
    }
}
