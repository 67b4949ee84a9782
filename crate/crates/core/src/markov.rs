//! Discretized state transitions: Tauchen chains, per-action transition sets,
//! Kronecker factor representations, and the firm entry/exit model builder.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::UtilityModel;

pub const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("transition for action {action} period {period} is not stochastic: {reason}")]
    NotStochastic {
        action: usize,
        period: usize,
        reason: String,
    },
    #[error("state space of {states} exceeds the dense cap of {cap}")]
    DimensionCap { states: usize, cap: usize },
    #[error("period {period} out of range for {periods} periods")]
    PeriodOutOfRange { period: usize, periods: usize },
    #[error("malformed transition set: {0}")]
    Malformed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MarkovError>;

fn invalid(name: &str, reason: impl Into<String>) -> MarkovError {
    MarkovError::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone)]
pub struct TauchenChain {
    pub grid: Vec<f64>,
    pub transition: Matrix,
}

/// Quantile grid of the stationary law of `z' = g0 + g1 z + sigma e`.
pub fn stationary_grid(k: usize, g0: f64, g1: f64, sigma: f64) -> Result<Vec<f64>> {
    check_ar1(k, g1, sigma)?;
    let mean = g0 / (1.0 - g1);
    let sd = sigma / (1.0 - g1 * g1).sqrt();
    let n = Normal::new(mean, sd).map_err(|e| invalid("sigma", e.to_string()))?;
    Ok((0..k)
        .map(|i| n.inverse_cdf((i as f64 + 0.5) / k as f64))
        .collect())
}

fn check_ar1(k: usize, g1: f64, sigma: f64) -> Result<()> {
    if k == 0 {
        return Err(invalid("K", "must be at least 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if !(g1.abs() < 1.0) {
        return Err(invalid("gamma1", format!("must satisfy |gamma1| < 1, got {g1}")));
    }
    Ok(())
}

/// Transition matrix on a fixed ascending grid for `z' = intercept + g1 z + sigma e`.
/// Cells are bounded by grid midpoints; the last cell is the complement so
/// every row sums to one.
pub fn tauchen_transition(grid: &[f64], intercept: f64, g1: f64, sigma: f64) -> Result<Matrix> {
    check_ar1(grid.len(), g1, sigma)?;
    if grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid", "must be finite and strictly increasing"));
    }
    let k = grid.len();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let cuts: Vec<f64> = grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mut f = Matrix::zeros(k, k);
    for i in 0..k {
        let mean = intercept + g1 * grid[i];
        let mut prev = 0.0;
        let mut acc = 0.0;
        for (j, c) in cuts.iter().enumerate() {
            let cdf = std.cdf((c - mean) / sigma);
            f[(i, j)] = (cdf - prev).max(0.0);
            acc += f[(i, j)];
            prev = cdf;
        }
        f[(i, k - 1)] = (1.0 - acc).max(0.0);
    }
    Ok(f)
}

pub fn tauchen(k: usize, g0: f64, g1: f64, sigma: f64, shift: f64) -> Result<TauchenChain> {
    let grid = stationary_grid(k, g0, g1, sigma)?;
    let transition = tauchen_transition(&grid, g0 + shift, g1, sigma)?;
    Ok(TauchenChain { grid, transition })
}

fn check_stochastic(m: &Matrix, action: usize, period: usize) -> Result<()> {
    let bad = |reason: String| MarkovError::NotStochastic {
        action,
        period,
        reason,
    };
    if !m.is_square() {
        return Err(bad(format!("shape {:?} is not square", m.shape())));
    }
    linalg::ensure_finite(m)?;
    for i in 0..m.nrows() {
        let row = m.row(i);
        if let Some(j) = row.iter().position(|&x| x < -1e-12) {
            return Err(bad(format!("negative entry at ({i}, {j})")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(bad(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Per-action, per-period transition matrices `F_{d,t}`; row `x` is the law
/// of the next state given `x` and action `d`. A single period means the
/// transitions are time-invariant.
#[derive(Debug, Clone)]
pub struct TransitionSet {
    periods: Vec<[Matrix; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionManifest {
    n_states: usize,
    n_periods: usize,
    actions: usize,
    layout: String,
}

impl TransitionSet {
    pub fn new(periods: Vec<[Matrix; 2]>) -> Result<Self> {
        if periods.is_empty() {
            return Err(MarkovError::Malformed("no periods".into()));
        }
        let x = periods[0][0].nrows();
        for (t, pair) in periods.iter().enumerate() {
            for (d, m) in pair.iter().enumerate() {
                check_stochastic(m, d, t)?;
                if m.nrows() != x {
                    return Err(MarkovError::Malformed(format!(
                        "period {t} action {d} has {} states, expected {x}",
                        m.nrows()
                    )));
                }
            }
        }
        Ok(TransitionSet { periods })
    }

    pub fn stationary(f0: Matrix, f1: Matrix) -> Result<Self> {
        Self::new(vec![[f0, f1]])
    }

    pub fn n_states(&self) -> usize {
        self.periods[0][0].nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn is_stationary(&self) -> bool {
        self.periods.len() == 1
    }

    fn index(&self, t: usize) -> Result<usize> {
        if self.is_stationary() {
            Ok(0)
        } else if t < self.periods.len() {
            Ok(t)
        } else {
            Err(MarkovError::PeriodOutOfRange {
                period: t,
                periods: self.periods.len(),
            })
        }
    }

    /// `F_{d,t}`. Stationary sets ignore `t`.
    pub fn f(&self, d: usize, t: usize) -> Result<&Matrix> {
        Ok(&self.periods[self.index(t)?][d])
    }

    pub fn ftilde(&self, t: usize) -> Result<Matrix> {
        let i = self.index(t)?;
        Ok(&self.periods[i][1] - &self.periods[i][0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (t, pair) in self.periods.iter().enumerate() {
            for (d, m) in pair.iter().enumerate() {
                linalg::save_matrix(m, &dir.join(format!("F_{d}_{t}.csv")))?;
            }
        }
        let manifest = TransitionManifest {
            n_states: self.n_states(),
            n_periods: self.n_periods(),
            actions: 2,
            layout: "row = current state, column = next state; file F_{d}_{t}.csv".into(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TransitionManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.actions != 2 {
            return Err(MarkovError::Malformed(format!(
                "{} actions, only binary choice is supported",
                manifest.actions
            )));
        }
        let mut periods = Vec::with_capacity(manifest.n_periods);
        for t in 0..manifest.n_periods {
            let f0 = linalg::load_matrix(&dir.join(format!("F_0_{t}.csv")))?;
            let f1 = linalg::load_matrix(&dir.join(format!("F_1_{t}.csv")))?;
            periods.push([f0, f1]);
        }
        let ts = Self::new(periods)?;
        if ts.n_states() != manifest.n_states {
            return Err(MarkovError::Malformed(format!(
                "manifest says {} states, matrices have {}",
                manifest.n_states,
                ts.n_states()
            )));
        }
        Ok(ts)
    }
}

pub fn diff_transition(ts: &TransitionSet, t: usize) -> Result<Matrix> {
    ts.ftilde(t)
}

/// `F_{d,t} = endo[t][d] ⊗ exo[0] ⊗ exo[1] ⊗ ...`. The exogenous chains are
/// time-invariant and unaffected by the action.
#[derive(Debug, Clone)]
pub struct KronFactors {
    pub endo: Vec<[Matrix; 2]>,
    pub exo: Vec<Matrix>,
}

impl KronFactors {
    pub fn new(endo: Vec<[Matrix; 2]>, exo: Vec<Matrix>) -> Result<Self> {
        if endo.is_empty() {
            return Err(MarkovError::Malformed("no periods".into()));
        }
        let n = endo[0][0].nrows();
        for (t, pair) in endo.iter().enumerate() {
            for (d, m) in pair.iter().enumerate() {
                check_stochastic(m, d, t)?;
                if m.nrows() != n {
                    return Err(MarkovError::Malformed("endogenous blocks differ in size".into()));
                }
            }
        }
        for m in &exo {
            check_stochastic(m, 0, 0)?;
        }
        Ok(KronFactors { endo, exo })
    }

    pub fn n_endo(&self) -> usize {
        self.endo[0][0].nrows()
    }

    pub fn n_exo(&self) -> usize {
        self.exo.iter().map(|m| m.nrows()).product()
    }

    pub fn n_states(&self) -> usize {
        self.n_endo() * self.n_exo()
    }

    pub fn n_periods(&self) -> usize {
        self.endo.len()
    }

    pub fn is_stationary(&self) -> bool {
        self.endo.len() == 1
    }

    pub fn endo_f(&self, d: usize, t: usize) -> Result<&Matrix> {
        if self.is_stationary() {
            return Ok(&self.endo[0][d]);
        }
        self.endo
            .get(t)
            .map(|p| &p[d])
            .ok_or(MarkovError::PeriodOutOfRange {
                period: t,
                periods: self.endo.len(),
            })
    }

    pub fn endo_ftilde(&self, t: usize) -> Result<Matrix> {
        Ok(self.endo_f(1, t)? - self.endo_f(0, t)?)
    }

    pub fn exo_dense(&self, cap: usize) -> Result<Matrix> {
        Ok(linalg::kron_all(&self.exo, cap)?)
    }

    pub fn to_transition_set(&self, cap_states: usize) -> Result<TransitionSet> {
        let x = self.n_states();
        if x > cap_states {
            return Err(MarkovError::DimensionCap {
                states: x,
                cap: cap_states,
            });
        }
        let fz = self.exo_dense(usize::MAX)?;
        let periods = self
            .endo
            .iter()
            .map(|[a0, a1]| -> Result<[Matrix; 2]> {
                Ok([linalg::kron_capped(a0, &fz, usize::MAX)?, linalg::kron_capped(a1, &fz, usize::MAX)?])
            })
            .collect::<Result<Vec<_>>>()?;
        TransitionSet::new(periods)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1 {
    pub intercept: f64,
    pub persistence: f64,
    pub sigma: f64,
}

impl Default for Ar1 {
    fn default() -> Self {
        Ar1 {
            intercept: 0.0,
            persistence: 0.9,
            sigma: 1.0,
        }
    }
}

/// Firm entry/exit model. State is (incumbency y, demand ω, cost shocks
/// z1..z4) with y varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntryModelConfig {
    /// Grid points per cost shock.
    pub kz: usize,
    /// Grid points for demand.
    pub ko: usize,
    /// (VP0, VP1, VP2, FC0, FC1, EC0, EC1)
    pub theta: Vec<f64>,
    pub beta: f64,
    pub shocks: Vec<Ar1>,
    pub demand: Ar1,
    /// Shift of the demand intercept when the firm is active.
    pub action_feedback: f64,
    /// Per-period demand intercepts. Present means a finite-horizon,
    /// time-varying model with one period per entry.
    pub demand_intercepts: Option<Vec<f64>>,
    pub max_dense_states: usize,
}

pub const ENTRY_THETA_NAMES: [&str; 7] = ["VP0", "VP1", "VP2", "FC0", "FC1", "EC0", "EC1"];
pub const NONSTATIONARY_INTERCEPTS: [f64; 4] = [-0.8, 0.8, 0.0, -0.3];

impl Default for EntryModelConfig {
    fn default() -> Self {
        EntryModelConfig {
            kz: 2,
            ko: 2,
            theta: vec![0.5, 1.0, -1.0, 0.5, 1.0, 1.0, 1.0],
            beta: 0.95,
            shocks: vec![Ar1::default(); 4],
            demand: Ar1::default(),
            action_feedback: 0.0,
            demand_intercepts: None,
            max_dense_states: 4096,
        }
    }
}

impl EntryModelConfig {
    pub fn n_states(&self) -> usize {
        2 * self.kz.pow(4) * self.ko
    }

    pub fn n_periods(&self) -> usize {
        self.demand_intercepts.as_ref().map_or(1, |v| v.len())
    }

    pub fn nonstationary_default() -> Self {
        EntryModelConfig {
            demand_intercepts: Some(NONSTATIONARY_INTERCEPTS.to_vec()),
            ..Default::default()
        }
    }

    /// Every problem found, each prefixed by the offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.kz == 0 {
            errs.push("kz: must be at least 1".to_string());
        }
        if self.ko == 0 {
            errs.push("ko: must be at least 1".to_string());
        }
        if self.theta.len() != 7 {
            errs.push(format!("theta: expected 7 values, got {}", self.theta.len()));
        }
        if self.theta.iter().any(|x| !x.is_finite()) {
            errs.push("theta: values must be finite".to_string());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            errs.push(format!("beta: must lie in (0, 1), got {}", self.beta));
        }
        if self.shocks.len() != 4 {
            errs.push(format!("shocks: expected 4 processes, got {}", self.shocks.len()));
        }
        let check = |name: String, p: &Ar1, errs: &mut Vec<String>| {
            if !(p.sigma > 0.0 && p.sigma.is_finite()) {
                errs.push(format!("{name}.sigma: must be positive, got {}", p.sigma));
            }
            if !(p.persistence.abs() < 1.0) {
                errs.push(format!("{name}.persistence: must satisfy |x| < 1, got {}", p.persistence));
            }
            if !p.intercept.is_finite() {
                errs.push(format!("{name}.intercept: must be finite"));
            }
        };
        for (i, p) in self.shocks.iter().enumerate() {
            check(format!("shocks[{i}]"), p, &mut errs);
        }
        check("demand".to_string(), &self.demand, &mut errs);
        if !self.action_feedback.is_finite() {
            errs.push("action_feedback: must be finite".to_string());
        }
        if let Some(v) = &self.demand_intercepts {
            if v.is_empty() {
                errs.push("demand_intercepts: must not be empty".to_string());
            }
            if v.iter().any(|x| !x.is_finite()) {
                errs.push("demand_intercepts: values must be finite".to_string());
            }
        }
        errs
    }
}

#[derive(Debug, Clone)]
pub struct EntryModel {
    pub config: EntryModelConfig,
    pub factors: KronFactors,
    pub utility: UtilityModel,
    pub demand_grid: Vec<f64>,
    pub shock_grids: Vec<Vec<f64>>,
}

/// Decomposed state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryState {
    pub y: usize,
    pub omega: usize,
    pub z: [usize; 4],
}

impl EntryState {
    pub fn index(&self, kz: usize, ko: usize) -> usize {
        let mut i = self.y * ko + self.omega;
        for &z in &self.z {
            i = i * kz + z;
        }
        i
    }

    pub fn from_index(mut i: usize, kz: usize, ko: usize) -> Self {
        let mut z = [0; 4];
        for k in (0..4).rev() {
            z[k] = i % kz;
            i /= kz;
        }
        EntryState {
            y: i / ko,
            omega: i % ko,
            z,
        }
    }
}

fn demand_grid(cfg: &EntryModelConfig) -> Result<Vec<f64>> {
    let d = &cfg.demand;
    let grid = stationary_grid(cfg.ko, d.intercept, d.persistence, d.sigma)?;
    if cfg.demand_intercepts.is_none() {
        return Ok(grid);
    }
    // Time-varying models use a fixed grid spanning [-1, 1].
    if grid.len() == 1 {
        return Ok(vec![0.0]);
    }
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    Ok(grid
        .iter()
        .map(|x| -1.0 + 2.0 * (x - lo) / (hi - lo))
        .collect())
}

/// Build the factored representation and utility features. Never forms a
/// dense X×X matrix.
pub fn build_entry_factors(cfg: &EntryModelConfig) -> Result<EntryModel> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(MarkovError::InvalidConfig(errs));
    }
    let ko = cfg.ko;
    let dgrid = demand_grid(cfg)?;
    let intercepts = cfg
        .demand_intercepts
        .clone()
        .unwrap_or_else(|| vec![cfg.demand.intercept]);
    let mut endo = Vec::with_capacity(intercepts.len());
    for &g0 in &intercepts {
        let mut pair = [Matrix::zeros(2 * ko, 2 * ko), Matrix::zeros(2 * ko, 2 * ko)];
        for (d, block) in pair.iter_mut().enumerate() {
            let shift = cfg.action_feedback * d as f64;
            let t = tauchen_transition(&dgrid, g0 + shift, cfg.demand.persistence, cfg.demand.sigma)?;
            for y in 0..2 {
                // Next incumbency equals today's action.
                block
                    .view_mut((y * ko, d * ko), (ko, ko))
                    .copy_from(&t);
            }
        }
        endo.push(pair);
    }
    let mut exo = Vec::with_capacity(4);
    let mut shock_grids = Vec::with_capacity(4);
    for p in &cfg.shocks {
        let chain = tauchen(cfg.kz, p.intercept, p.persistence, p.sigma, 0.0)?;
        exo.push(chain.transition);
        shock_grids.push(chain.grid);
    }
    let factors = KronFactors::new(endo, exo)?;
    let utility = entry_utility(cfg, &dgrid, &shock_grids);
    Ok(EntryModel {
        config: cfg.clone(),
        factors,
        utility,
        demand_grid: dgrid,
        shock_grids,
    })
}

fn entry_utility(cfg: &EntryModelConfig, dgrid: &[f64], zgrids: &[Vec<f64>]) -> UtilityModel {
    let x = cfg.n_states();
    let mut phi1 = Matrix::zeros(x, 7);
    for i in 0..x {
        let s = EntryState::from_index(i, cfg.kz, cfg.ko);
        let z: Vec<f64> = (0..4).map(|k| zgrids[k][s.z[k]]).collect();
        let e = dgrid[s.omega].exp();
        let entrant = 1.0 - s.y as f64;
        let row = [e, e * z[0], e * z[1], -1.0, -z[2], -entrant, -entrant * z[3]];
        for (k, v) in row.into_iter().enumerate() {
            phi1[(i, k)] = v;
        }
    }
    UtilityModel::new(
        Matrix::zeros(x, 7),
        phi1,
        ENTRY_THETA_NAMES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("entry features are well formed")
}

/// Dense transitions plus factors and features.
pub fn build_entry_model(cfg: &EntryModelConfig) -> Result<(TransitionSet, EntryModel)> {
    let m = build_entry_factors(cfg)?;
    let ts = m.factors.to_transition_set(cfg.max_dense_states)?;
    Ok((ts, m))
}
