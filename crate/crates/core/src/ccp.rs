//! Conditional choice probabilities, value differences, the logit inversion
//! and social-surplus correction, and the weighted propagation of future
//! state distributions.

use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::markov::{MarkovError, TransitionSet};
use crate::weights::{WeightPlan, WeightsError};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CcpError {
    #[error("probability {value} at period {period} state {state} is outside [0, 1]")]
    OutOfRange {
        period: usize,
        state: usize,
        value: f64,
    },
    #[error("periods have inconsistent state counts")]
    Ragged,
    #[error("period {period} out of range for {periods} periods")]
    Period { period: usize, periods: usize },
    #[error("residual {step} disagrees with the plan by {gap}")]
    PlanMismatch { step: usize, gap: f64 },
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

pub type Result<T> = std::result::Result<T, CcpError>;

fn period_index(len: usize, stationary: bool, t: usize) -> Result<usize> {
    if stationary {
        Ok(0)
    } else if t < len {
        Ok(t)
    } else {
        Err(CcpError::Period {
            period: t,
            periods: len,
        })
    }
}

/// `P(d = 1 | x, t)`, clamped into `[1e-12, 1 - 1e-12]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpTable {
    periods: Vec<Vec<f64>>,
    stationary: bool,
    /// Number of entries moved by the clamp.
    pub clamped: usize,
    /// Exact log-odds when built from value differences, so that tails
    /// beyond the clamp keep their information.
    log_odds: Option<Vec<Vec<f64>>>,
}

impl CcpTable {
    pub fn new(periods: Vec<Vec<f64>>, stationary: bool) -> Result<Self> {
        let n = periods.first().map_or(0, |p| p.len());
        if periods.iter().any(|p| p.len() != n) || (stationary && periods.len() != 1) {
            return Err(CcpError::Ragged);
        }
        let mut clamped = 0;
        let mut out = periods;
        for (t, p) in out.iter_mut().enumerate() {
            for (x, v) in p.iter_mut().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(CcpError::OutOfRange {
                        period: t,
                        state: x,
                        value: *v,
                    });
                }
                let c = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if c != *v {
                    clamped += 1;
                    *v = c;
                }
            }
        }
        Ok(CcpTable {
            periods: out,
            stationary,
            clamped,
            log_odds: None,
        })
    }

    pub fn stationary(p: Vec<f64>) -> Result<Self> {
        Self::new(vec![p], true)
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_states(&self) -> usize {
        self.periods[0].len()
    }

    pub fn p1(&self, t: usize) -> Result<&[f64]> {
        Ok(&self.periods[period_index(self.periods.len(), self.stationary, t)?])
    }

    /// Probability of action `d`.
    pub fn prob(&self, t: usize, d: usize) -> Result<Vec<f64>> {
        let p = self.p1(t)?;
        Ok(if d == 1 {
            p.to_vec()
        } else {
            p.iter().map(|x| 1.0 - x).collect()
        })
    }

    /// `ln P(d | x, t)`: exact when log-odds are known, clamped otherwise.
    pub fn log_prob(&self, t: usize, d: usize) -> Result<Vec<f64>> {
        if let Some(lo) = &self.log_odds {
            let v = &lo[period_index(lo.len(), self.stationary, t)?];
            let sign = if d == 1 { -1.0 } else { 1.0 };
            return Ok(v.iter().map(|&x| -softplus(sign * x)).collect());
        }
        Ok(self.prob(t, d)?.into_iter().map(|p| p.max(PROB_CLAMP).ln()).collect())
    }

    pub fn has_log_odds(&self) -> bool {
        self.log_odds.is_some()
    }

    /// Rows `(t, x, p1)`.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.periods
            .iter()
            .enumerate()
            .flat_map(|(t, p)| p.iter().enumerate().map(move |(x, &v)| (t, x, v)))
    }
}

/// `v(x, 1, t) - v(x, 0, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDiffTable {
    pub periods: Vec<Vec<f64>>,
    pub stationary: bool,
    /// Entries whose probability sat on the clamp.
    pub boundary_hits: usize,
}

impl ValueDiffTable {
    pub fn get(&self, t: usize) -> Result<&[f64]> {
        Ok(&self.periods[period_index(self.periods.len(), self.stationary, t)?])
    }
}

/// Overflow-safe logistic function.
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn lambda(v: &ValueDiffTable) -> CcpTable {
    let periods = v
        .periods
        .iter()
        .map(|p| p.iter().map(|&x| logistic(x)).collect())
        .collect();
    let mut t = CcpTable::new(periods, v.stationary).expect("logistic output lies in [0, 1]");
    t.log_odds = Some(v.periods.clone());
    t
}

/// `ln(p1 / p0)`.
pub fn lambda_inv(p: &CcpTable) -> ValueDiffTable {
    if let Some(lo) = &p.log_odds {
        return ValueDiffTable {
            periods: lo.clone(),
            stationary: p.stationary,
            boundary_hits: 0,
        };
    }
    let mut hits = 0;
    let periods = p
        .periods
        .iter()
        .map(|row| {
            row.iter()
                .map(|&x| {
                    if x <= PROB_CLAMP || x >= 1.0 - PROB_CLAMP {
                        hits += 1;
                    }
                    (x / (1.0 - x)).ln()
                })
                .collect()
        })
        .collect();
    ValueDiffTable {
        periods,
        stationary: p.stationary,
        boundary_hits: hits,
    }
}

/// Expected extreme-value shock given the choice: `gamma_E - ln(prob)`.
pub fn psi_of(prob: f64) -> f64 {
    EULER_GAMMA - prob.max(PROB_CLAMP).ln()
}

pub fn psi(p: &CcpTable, t: usize, d: usize) -> Result<Vector> {
    Ok(Vector::from_iterator(
        p.n_states(),
        p.log_prob(t, d)?.into_iter().map(|l| EULER_GAMMA - l),
    ))
}

/// `(Σ w (u1 - u0), Σ w (ψ1 - ψ0))` for one row of weights.
pub fn weighted_aggregates(w_row: &[f64], u0: &[f64], u1: &[f64], p1: &[f64]) -> (f64, f64) {
    let mut ub = 0.0;
    let mut pb = 0.0;
    for (k, &w) in w_row.iter().enumerate() {
        ub += w * (u1[k] - u0[k]);
        pb += w * (psi_of(p1[k]) - psi_of(1.0 - p1[k]));
    }
    (ub, pb)
}

/// Cumulative weighted distribution differences `K_0..K_{rho-1}`, recomputed
/// from the weights and transitions and checked against the plan.
pub fn kappa_propagate(plan: &WeightPlan, ts: &TransitionSet) -> Result<Vec<Matrix>> {
    let mut out = vec![ts.ftilde(plan.origin)?];
    for s in 1..plan.rho() {
        let tau = plan.origin + s;
        let w = plan.weights[s - 1].to_dense()?;
        let k = &w * ts.ftilde(tau)? + &out[s - 1] * ts.f(0, tau)?;
        let expect = plan.residuals[s - 1].to_dense()?;
        let gap = (&k - &expect).amax();
        if gap > 1e-9 * (1.0 + expect.amax()) {
            return Err(CcpError::PlanMismatch { step: s, gap });
        }
        out.push(k);
    }
    Ok(out)
}
