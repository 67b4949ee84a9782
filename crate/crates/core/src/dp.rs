//! Exact dynamic programming oracles and panel simulation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccp::{self, CcpError, CcpTable, ValueDiffTable, EULER_GAMMA};
use crate::linalg::{Matrix, Vector};
use crate::markov::MarkovError;
use crate::model::DynamicModel;

pub const DEFAULT_VI_TOL: f64 = 1e-10;
pub const DEFAULT_VI_MAX_ITER: usize = 100_000;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("value iteration stopped after {iterations} iterations with sup-norm change {gap}")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("matrix I - beta F^P is singular")]
    Singular,
    #[error("{0}")]
    Unsupported(String),
    #[error("panel: {0}")]
    Panel(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Ccp(#[from] CcpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DpError>;

#[derive(Debug, Clone)]
pub struct Solution {
    /// `V_t` for each model period; one entry when stationary.
    pub values: Vec<Vector>,
    /// `V_T` after the last period of a finite horizon.
    pub terminal: Option<Vector>,
    pub ccp: CcpTable,
    pub vtilde: ValueDiffTable,
    pub iterations: usize,
}

impl Solution {
    pub fn is_stationary(&self) -> bool {
        self.terminal.is_none()
    }

    /// Ex-ante value at period `t`, including the terminal period.
    pub fn value(&self, t: usize) -> Option<&Vector> {
        if self.is_stationary() {
            return self.values.first();
        }
        match t.cmp(&self.values.len()) {
            std::cmp::Ordering::Less => Some(&self.values[t]),
            std::cmp::Ordering::Equal => self.terminal.as_ref(),
            std::cmp::Ordering::Greater => None,
        }
    }
}

fn lse(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// One Bellman step. Returns `(V_t, ṽ_t)` given `V_{t+1}`.
pub fn bellman_update(v_next: &Vector, model: &DynamicModel, t: usize) -> Result<(Vector, Vector)> {
    let [u0, u1] = model.payoffs();
    let ts = &model.transitions;
    let c0 = u0 + model.beta * (ts.f(0, t)? * v_next);
    let c1 = u1 + model.beta * (ts.f(1, t)? * v_next);
    let v = c0.zip_map(&c1, |a, b| lse(a, b) + EULER_GAMMA);
    Ok((v, c1 - c0))
}

pub fn solve_stationary(model: &DynamicModel, tol: f64, max_iter: usize) -> Result<Solution> {
    if !model.transitions.is_stationary() {
        return Err(DpError::Unsupported("transitions vary over time; use solve_finite_horizon".into()));
    }
    let mut v = Vector::zeros(model.n_states());
    let mut gap = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, vt) = bellman_update(&v, model, 0)?;
        gap = (&next - &v).amax();
        v = next;
        if gap <= tol {
            let diff = ValueDiffTable {
                periods: vec![vt.as_slice().to_vec()],
                stationary: true,
                boundary_hits: 0,
            };
            let ccp = ccp::lambda(&diff);
            return Ok(Solution {
                values: vec![v],
                terminal: None,
                ccp,
                vtilde: diff,
                iterations: it,
            });
        }
    }
    Err(DpError::NoConvergence {
        iterations: max_iter,
        gap,
    })
}

/// Backward induction over every model period from `terminal` (zero by default).
pub fn solve_finite_horizon(model: &DynamicModel, terminal: Option<Vector>) -> Result<Solution> {
    let n = model.n_states();
    let horizon = model.transitions.n_periods();
    let term = terminal.unwrap_or_else(|| Vector::zeros(n));
    let mut values = vec![Vector::zeros(n); horizon];
    let mut diffs = vec![Vec::new(); horizon];
    let mut next = term.clone();
    for t in (0..horizon).rev() {
        let (v, vt) = bellman_update(&next, model, t)?;
        diffs[t] = vt.as_slice().to_vec();
        values[t] = v.clone();
        next = v;
    }
    let vtilde = ValueDiffTable {
        periods: diffs,
        stationary: false,
        boundary_hits: 0,
    };
    Ok(Solution {
        values,
        terminal: Some(term),
        ccp: ccp::lambda(&vtilde),
        vtilde,
        iterations: horizon,
    })
}

/// `F^P = diag(p0) F_0 + diag(p1) F_1`.
pub fn policy_transition(p: &CcpTable, model: &DynamicModel, t: usize) -> Result<Matrix> {
    let ts = &model.transitions;
    let p1 = p.p1(t)?;
    let mut fp = ts.f(0, t)?.clone();
    let f1 = ts.f(1, t)?;
    for i in 0..fp.nrows() {
        let w = p1[i];
        for j in 0..fp.ncols() {
            fp[(i, j)] = (1.0 - w) * fp[(i, j)] + w * f1[(i, j)];
        }
    }
    Ok(fp)
}

/// Policy-weighted flows `(Φ^P, e^P)` for CCPs `p` at period `t`.
pub fn policy_flows(p: &CcpTable, model: &DynamicModel, t: usize) -> Result<(Matrix, Vector)> {
    let p1 = p.p1(t)?;
    let u = &model.utility;
    let mut phi = u.phi0.clone();
    let psi0 = ccp::psi(p, t, 0)?;
    let psi1 = ccp::psi(p, t, 1)?;
    let mut e = Vector::zeros(p1.len());
    for i in 0..p1.len() {
        let w = p1[i];
        for k in 0..phi.ncols() {
            phi[(i, k)] = (1.0 - w) * u.phi0[(i, k)] + w * u.phi1[(i, k)];
        }
        e[i] = (1.0 - w) * psi0[i] + w * psi1[i];
    }
    Ok((phi, e))
}

/// Value of following the stationary CCPs `p`, by one linear solve.
pub fn hm_solution(p: &CcpTable, model: &DynamicModel) -> Result<Solution> {
    if !model.transitions.is_stationary() || !p.is_stationary() {
        return Err(DpError::Unsupported("policy inversion needs stationary transitions and CCPs".into()));
    }
    let n = model.n_states();
    let fp = policy_transition(p, model, 0)?;
    let (phi, e) = policy_flows(p, model, 0)?;
    let theta = Vector::from_column_slice(&model.theta);
    let rhs = phi * theta + e;
    let a = Matrix::identity(n, n) - model.beta * fp;
    let v = a.lu().solve(&rhs).ok_or(DpError::Singular)?;
    let [u0, u1] = model.payoffs();
    let ft = model.transitions.ftilde(0)?;
    let vt = (u1 - u0) + model.beta * (ft * &v);
    let vtilde = ValueDiffTable {
        periods: vec![vt.as_slice().to_vec()],
        stationary: true,
        boundary_hits: 0,
    };
    Ok(Solution {
        values: vec![v],
        terminal: None,
        ccp: ccp::lambda(&vtilde),
        vtilde,
        iterations: 1,
    })
}

/// Invariant distribution of a stochastic matrix by power iteration.
pub fn stationary_distribution(f: &Matrix) -> Vector {
    let n = f.nrows();
    let ft = f.transpose();
    let mut pi = Vector::from_element(n, 1.0 / n as f64);
    for _ in 0..100_000 {
        let mut next = &ft * &pi;
        let s = next.sum();
        next /= s;
        let gap = (&next - &pi).amax();
        pi = next;
        if gap < 1e-14 {
            break;
        }
    }
    pi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(rename = "i")]
    pub unit: usize,
    #[serde(rename = "t")]
    pub period: usize,
    #[serde(rename = "x")]
    pub state: usize,
    #[serde(rename = "d")]
    pub action: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub theta: Vec<f64>,
    pub beta: f64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelManifest {
    pub n_units: usize,
    pub n_periods: usize,
    pub n_states: usize,
    pub seed: u64,
    pub replication: u64,
    pub truth: PanelTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub manifest: PanelManifest,
    /// Ordered by unit, then period.
    pub obs: Vec<Observation>,
}

impl Panel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("panel.csv"))?;
        for o in &self.obs {
            w.serialize(o)?;
        }
        w.flush()?;
        std::fs::write(dir.join("panel.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: PanelManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("panel.json"))?)?;
        let mut r = csv::Reader::from_path(dir.join("panel.csv"))?;
        let obs = r.deserialize().collect::<std::result::Result<Vec<Observation>, _>>()?;
        for o in &obs {
            if o.state >= manifest.n_states || o.action > 1 || o.period >= manifest.n_periods {
                return Err(DpError::Panel(format!("observation out of range: {o:?}")));
            }
        }
        Ok(Panel { manifest, obs })
    }
}

/// Independent stream for one simulation cell. Keys are fed straight into
/// the ChaCha seed, so distinct cells never share a stream.
pub fn cell_rng(seed: u64, replication: u64, unit: u64, period: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (k, v) in [seed, replication, unit, period].into_iter().enumerate() {
        key[8 * k..8 * k + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const INITIAL_DRAW: u64 = u64::MAX;

fn draw(cdf_row: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, p) in cdf_row.enumerate() {
        if p > 0.0 {
            last = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    last
}

/// Simulate `n` units for `t` periods from the model's CCPs. Initial states
/// follow the invariant law of the policy chain when stationary, uniform
/// otherwise.
pub fn simulate_panel(
    solution: &Solution,
    model: &DynamicModel,
    n: usize,
    t: usize,
    seed: u64,
    replication: u64,
) -> Result<Panel> {
    let ts = &model.transitions;
    let x = model.n_states();
    if !ts.is_stationary() && t > ts.n_periods() {
        return Err(DpError::Panel(format!(
            "{t} periods requested but the model has {}",
            ts.n_periods()
        )));
    }
    let init = if ts.is_stationary() {
        stationary_distribution(&policy_transition(&solution.ccp, model, 0)?)
    } else {
        Vector::from_element(x, 1.0 / x as f64)
    };
    let probs: Vec<Vec<f64>> = (0..t)
        .map(|p| solution.ccp.p1(p).map(|v| v.to_vec()))
        .collect::<std::result::Result<_, _>>()?;
    let units: Vec<Vec<Observation>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<Observation>> {
            let mut rng = cell_rng(seed, replication, i as u64, INITIAL_DRAW);
            let mut state = draw(init.iter().copied(), rng.random::<f64>());
            let mut out = Vec::with_capacity(t);
            for p in 0..t {
                let mut rng = cell_rng(seed, replication, i as u64, p as u64);
                let d = u8::from(rng.random::<f64>() < probs[p][state]);
                out.push(Observation {
                    unit: i,
                    period: p,
                    state,
                    action: d,
                });
                let f = ts.f(d as usize, p)?;
                state = draw(f.row(state).iter().copied(), rng.random::<f64>());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Panel {
        manifest: PanelManifest {
            n_units: n,
            n_periods: t,
            n_states: x,
            seed,
            replication,
            truth: PanelTruth {
                theta: model.theta.clone(),
                beta: model.beta,
                config_hash: None,
            },
        },
        obs: units.into_iter().flatten().collect(),
    })
}
