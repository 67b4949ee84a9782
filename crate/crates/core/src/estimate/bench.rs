//! Timing of weight solves against policy inversion across state-space sizes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{hm_linear, EstimateError, Result};
use crate::ccp::CcpTable;
use crate::dp;
use crate::markov::{build_entry_factors, build_entry_model, EntryModelConfig, MarkovError};
use crate::model::DynamicModel;
use crate::weights;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// `kz` and `ko` are overwritten per size.
    pub model: EntryModelConfig,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Time value iteration for the full solution as well.
    pub solve: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: EntryModelConfig::default(),
            sizes: vec![64, 96, 128, 160],
            repeats: 5,
            solve: false,
        }
    }
}

/// `(kz, ko)` with `X = 2 kz^4 ko`, taking the largest `kz >= 2` that divides.
pub fn factor_size(x: usize) -> Option<(usize, usize)> {
    (2..=16usize)
        .rev()
        .find(|&kz| x % (2 * kz.pow(4)) == 0)
        .map(|kz| (kz, x / (2 * kz.pow(4))))
}

impl BenchConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.validate().into_iter().map(|e| format!("model.{e}")).collect();
        if self.sizes.is_empty() {
            errs.push("sizes: must list at least one size".into());
        }
        for &x in &self.sizes {
            if factor_size(x).is_none() {
                errs.push(format!("sizes: {x} is not of the form 2*kz^4*ko"));
            }
        }
        if self.repeats == 0 {
            errs.push("repeats: must be positive".into());
        }
        if self.model.n_periods() > 1 {
            errs.push("model.demand_intercepts: benchmarks use the stationary model".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub states: usize,
    pub kz: usize,
    pub ko: usize,
    pub gamma_a: f64,
    pub time_solve: Option<f64>,
    /// Median seconds for the inversion solve; empty above the dense cap.
    pub time_hm_inverse: Option<f64>,
    /// Median seconds for the factored one-period solve. Estimation applies
    /// the factors directly, so no X×X expansion is timed.
    pub time_fd1: f64,
    /// Median seconds for the factored two-period solve.
    pub time_fd2: f64,
    /// `‖K_1‖₂` of the one-period plan.
    pub residual1: f64,
    /// `‖K_2‖₂` of the optimal two-period plan.
    pub residual2: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let s = Instant::now();
        let out = f()?;
        times.push(s.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((median(&mut times), last.expect("repeats > 0")))
}

pub fn bench_size(cfg: &BenchConfig, x: usize) -> Result<BenchRow> {
    let (kz, ko) = factor_size(x).ok_or_else(|| EstimateError::Unsupported(format!("size {x}")))?;
    let model = EntryModelConfig {
        kz,
        ko,
        ..cfg.model.clone()
    };
    let kf = build_entry_factors(&model)?.factors;
    let (t1, fd1) = timed(cfg.repeats, || Ok(weights::kron_sequential(&kf, 0, 1)?))?;
    let (t2, fd2) = timed(cfg.repeats, || {
        Ok(match weights::kron_two_period(&kf, 0) {
            Err(weights::WeightsError::SingularExogenous { .. }) => {
                weights::two_period_plan(&kf.to_transition_set(model.max_dense_states)?, 0)?
            }
            r => r?,
        })
    })?;
    let (time_solve, time_hm_inverse) = if x <= model.max_dense_states {
        let (ts, em) = build_entry_model(&model)?;
        let dm = DynamicModel::new(ts.clone(), em.utility.clone(), model.theta.clone(), model.beta)?;
        let (ts_solve, p) = if cfg.solve {
            let (t, sol) = timed(1, || Ok(dp::solve_stationary(&dm, dp::DEFAULT_VI_TOL, dp::DEFAULT_VI_MAX_ITER)?))?;
            (Some(t), sol.ccp)
        } else {
            (None, CcpTable::stationary(vec![0.5; x])?)
        };
        let (th, _) = timed(cfg.repeats, || hm_linear(&ts, &em.utility, &p, model.beta))?;
        (ts_solve, Some(th))
    } else {
        (None, None)
    };
    Ok(BenchRow {
        states: x,
        kz,
        ko,
        gamma_a: model.action_feedback,
        time_solve,
        time_hm_inverse,
        time_fd1: t1,
        time_fd2: t2,
        residual1: fd1.residual_norms[0],
        residual2: fd2.residual_norms[1],
    })
}

/// Sizes run one after another so timings do not compete for cores.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(MarkovError::InvalidConfig(errs).into());
    }
    cfg.sizes.iter().map(|&x| bench_size(cfg, x)).collect()
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
