//! Two-step CCP estimation: first-stage choice probabilities, linear
//! value-difference representations (finite dependence or policy
//! inversion), and the offset-logit likelihood maximized by damped Newton.

pub mod bench;
pub mod monte_carlo;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccp::{self, CcpError, CcpTable};
use crate::dp::{self, DpError, Observation, Panel};
use crate::linalg::{Matrix, Vector};
use crate::markov::{KronFactors, MarkovError, TransitionSet};
use crate::model::{DynamicModel, ModelError, UtilityModel};
use crate::weights::{self, WeightPlan, WeightsError};

pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Ccp(#[from] CcpError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Unsupported(String),
    #[error("no observations fall in the estimation window")]
    NoData,
    #[error("parameter vector is not finite")]
    NonFinite,
    #[error("oracle CCPs requested but none supplied")]
    MissingOracle,
}

pub type Result<T> = std::result::Result<T, EstimateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// One-period sequential weights.
    FD,
    /// Jointly optimal two-period weights.
    FD2,
    /// Policy-valuation inversion; stationary models only.
    HM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CcpMode {
    #[default]
    Oracle,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightPath {
    /// Factored when factors are available, dense otherwise.
    #[default]
    Auto,
    Dense,
    Kron,
}

/// What the econometrician knows: transitions, features, discount factor.
#[derive(Debug, Clone)]
pub struct EstimationModel {
    pub transitions: TransitionSet,
    pub factors: Option<KronFactors>,
    pub utility: UtilityModel,
    pub beta: f64,
}

impl EstimationModel {
    pub fn at(&self, theta: &[f64]) -> Result<DynamicModel> {
        Ok(DynamicModel::new(
            self.transitions.clone(),
            self.utility.clone(),
            theta.to_vec(),
            self.beta,
        )?)
    }

    /// Origins whose plans need only available periods: `t + 2 <= T - 1`.
    pub fn default_window(&self) -> Vec<usize> {
        if self.transitions.is_stationary() {
            vec![0]
        } else {
            (0..self.transitions.n_periods().saturating_sub(2)).collect()
        }
    }
}

/// First-stage CCPs. Frequency mode pools periods when `stationary`.
pub fn estimate_ccp(panel: &Panel, stationary: bool, mode: CcpMode, oracle: Option<&CcpTable>) -> Result<CcpTable> {
    match mode {
        CcpMode::Oracle => oracle.cloned().ok_or(EstimateError::MissingOracle),
        CcpMode::Frequency => {
            let x = panel.manifest.n_states;
            let periods = if stationary { 1 } else { panel.manifest.n_periods };
            let mut n = vec![vec![0.0; x]; periods];
            let mut k = vec![vec![0.0; x]; periods];
            for o in &panel.obs {
                let t = if stationary { 0 } else { o.period };
                n[t][o.state] += 1.0;
                k[t][o.state] += o.action as f64;
            }
            let p = n
                .iter()
                .zip(&k)
                .map(|(n, k)| n.iter().zip(k).map(|(n, k)| (k + 0.5) / (n + 1.0)).collect())
                .collect();
            Ok(CcpTable::new(p, stationary)?)
        }
    }
}

/// `ṽ(x; θ) = H(x) θ + h(x) (+ b(x))`.
#[derive(Debug, Clone)]
pub struct LinearValueDiff {
    pub h: Matrix,
    pub offset: Vector,
    pub bias: Option<Vector>,
}

impl LinearValueDiff {
    pub fn value(&self, theta: &[f64]) -> Vector {
        let mut v = &self.h * Vector::from_column_slice(theta) + &self.offset;
        if let Some(b) = &self.bias {
            v += b;
        }
        v
    }
}

/// Feature part of the representation; depends only on the weights.
pub fn assemble_features(plan: &WeightPlan, utility: &UtilityModel, beta: f64) -> Result<Matrix> {
    let phit = utility.phi_tilde();
    let mut h = phit.clone();
    let mut disc = 1.0;
    for s in 1..=plan.rho() {
        disc *= beta;
        h += disc * (plan.weights[s - 1].apply(&phit)? + plan.kappa(s - 1).apply(&utility.phi0)?);
    }
    Ok(h)
}

/// CCP-dependent offset `Σ β^s [W_s ẽ_{t+s} + K_{s-1} e0_{t+s}]`.
pub fn assemble_offset(plan: &WeightPlan, p: &CcpTable, beta: f64) -> Result<Vector> {
    let x = plan.n_states();
    let mut h = Vector::zeros(x);
    let mut disc = 1.0;
    for s in 1..=plan.rho() {
        disc *= beta;
        let tau = plan.origin + s;
        let e0 = ccp::psi(p, tau, 0)?;
        let et = ccp::psi(p, tau, 1)? - &e0;
        h += disc * (plan.weights[s - 1].apply_vec(&et)? + plan.kappa(s - 1).apply_vec(&e0)?);
    }
    Ok(h)
}

/// Linear representation of value differences at the plan's origin. When
/// `continuation` holds `V_{t+rho+1}`, the neglected term
/// `β^{rho+1} K_rho V` is included as a bias correction.
pub fn assemble_linear(
    plan: &WeightPlan,
    utility: &UtilityModel,
    p: &CcpTable,
    beta: f64,
    continuation: Option<&Vector>,
) -> Result<LinearValueDiff> {
    if !p.is_stationary() && plan.origin + plan.rho() >= p.n_periods() {
        return Err(WeightsError::HorizonExceeded {
            needed: plan.origin + plan.rho(),
            available: p.n_periods(),
        }
        .into());
    }
    let h = assemble_features(plan, utility, beta)?;
    let offset = assemble_offset(plan, p, beta)?;
    let bias = continuation
        .map(|v| -> Result<Vector> {
            Ok(beta.powi(plan.rho() as i32 + 1) * plan.kappa(plan.rho()).apply_vec(v)?)
        })
        .transpose()?;
    Ok(LinearValueDiff { h, offset, bias })
}

/// Policy-inversion representation: `H = Φ̃ + βF̃(I - βF^P)^{-1}Φ^P`,
/// `h = βF̃(I - βF^P)^{-1}e^P`.
pub fn hm_linear(ts: &TransitionSet, utility: &UtilityModel, p: &CcpTable, beta: f64) -> Result<LinearValueDiff> {
    if !ts.is_stationary() || !p.is_stationary() {
        return Err(EstimateError::Unsupported("policy inversion needs a stationary model".into()));
    }
    let model = DynamicModel::new(ts.clone(), utility.clone(), vec![0.0; utility.n_params()], beta)?;
    let n = ts.n_states();
    let k = utility.n_params();
    let fp = dp::policy_transition(p, &model, 0)?;
    let (phi, e) = dp::policy_flows(p, &model, 0)?;
    let mut rhs = Matrix::zeros(n, k + 1);
    rhs.columns_mut(0, k).copy_from(&phi);
    rhs.set_column(k, &e);
    let a = Matrix::identity(n, n) - beta * fp;
    let y = a.lu().solve(&rhs).ok_or(DpError::Singular)?;
    let fy = beta * (ts.ftilde(0)? * y);
    Ok(LinearValueDiff {
        h: utility.phi_tilde() + fy.columns(0, k),
        offset: fy.column(k).into_owned(),
        bias: None,
    })
}

/// Per-observation rows of the offset logit.
#[derive(Debug, Clone)]
pub struct LogitDesign {
    pub x: Matrix,
    pub offset: Vector,
    pub y: Vector,
}

impl LogitDesign {
    /// Rows for every observation whose period has a representation.
    pub fn build<'a>(obs: &[Observation], lin: impl Fn(usize) -> Option<&'a LinearValueDiff>) -> Result<Self> {
        let kept: Vec<(&Observation, &LinearValueDiff)> =
            obs.iter().filter_map(|o| lin(o.period).map(|l| (o, l))).collect();
        if kept.is_empty() {
            return Err(EstimateError::NoData);
        }
        let k = kept[0].1.h.ncols();
        let mut x = Matrix::zeros(kept.len(), k);
        let mut offset = Vector::zeros(kept.len());
        let mut y = Vector::zeros(kept.len());
        for (r, (o, l)) in kept.iter().enumerate() {
            x.row_mut(r).copy_from(&l.h.row(o.state));
            offset[r] = l.offset[o.state] + l.bias.as_ref().map_or(0.0, |b| b[o.state]);
            y[r] = o.action as f64;
        }
        Ok(LogitDesign { x, offset, y })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

fn log1pexp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// `ℓ(θ) = Σ d ṽ - ln(1 + e^ṽ)` and its gradient.
pub fn fd_loglik(theta: &[f64], design: &LogitDesign) -> Result<(f64, Vector)> {
    let (l, g, _) = loglik_full(theta, design, false)?;
    Ok((l, g))
}

fn loglik_full(theta: &[f64], d: &LogitDesign, hessian: bool) -> Result<(f64, Vector, Matrix)> {
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(EstimateError::NonFinite);
    }
    let v = &d.x * Vector::from_column_slice(theta) + &d.offset;
    let k = d.x.ncols();
    let mut ll = 0.0;
    let mut resid = Vector::zeros(v.len());
    let mut wts = Vector::zeros(v.len());
    for i in 0..v.len() {
        ll += d.y[i] * v[i] - log1pexp(v[i]);
        let p = ccp::logistic(v[i]);
        resid[i] = d.y[i] - p;
        wts[i] = p * (1.0 - p);
    }
    let grad = d.x.transpose() * resid;
    let info = if hessian {
        let mut xw = d.x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= wts[i];
        }
        d.x.transpose() * xw
    } else {
        Matrix::zeros(k, k)
    };
    Ok((ll, grad, info))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NewtonResult {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton with step halving on the concave offset logit.
pub fn maximize_logit(design: &LogitDesign, start: &[f64], tol: f64, max_iter: usize) -> Result<NewtonResult> {
    let k = design.x.ncols();
    let mut theta = Vector::from_column_slice(start);
    let (mut ll, mut grad, mut info) = loglik_full(theta.as_slice(), design, true)?;
    for it in 0..max_iter {
        let gn = grad.amax();
        if gn <= tol {
            return Ok(NewtonResult {
                theta: theta.as_slice().to_vec(),
                loglik: ll,
                gradient_norm: gn,
                iterations: it,
                converged: true,
            });
        }
        let scale = info.diagonal().amax().max(1.0);
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                let ridge = &info + Matrix::identity(k, k) * (1e-10 * scale);
                match ridge.cholesky() {
                    Some(c) => c.solve(&grad),
                    None => grad.clone() / scale,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + t * &step;
            let (l2, g2, i2) = loglik_full(cand.as_slice(), design, true)?;
            if l2 >= ll - 1e-12 * ll.abs().max(1.0) {
                theta = cand;
                ll = l2;
                grad = g2;
                info = i2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let gn = grad.amax();
    Ok(NewtonResult {
        theta: theta.as_slice().to_vec(),
        loglik: ll,
        gradient_norm: gn,
        iterations: max_iter,
        converged: gn <= tol,
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Timing {
    /// Weight solve (finite dependence) or linear solve (inversion), seconds.
    pub weights_or_inv: f64,
    pub assembly: f64,
    pub optimize: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimationReport {
    pub estimator: EstimatorKind,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_obs: usize,
    pub timing: Timing,
    /// Largest spectral norm of `K_1` and `K_2` across origins.
    pub residual1: Option<f64>,
    pub residual2: Option<f64>,
    pub ccp_clamped: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub ccp_mode: CcpMode,
    pub weight_path: WeightPath,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            ccp_mode: CcpMode::Oracle,
            weight_path: WeightPath::Auto,
        }
    }
}

/// Everything that does not depend on the data: weights and the feature
/// part of the representation for each origin.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kind: EstimatorKind,
    pub origins: Vec<usize>,
    pub plans: Vec<WeightPlan>,
    pub features: Vec<Matrix>,
    pub weight_time: f64,
}

fn solve_plan(kind: EstimatorKind, model: &EstimationModel, origin: usize, path: WeightPath) -> Result<WeightPlan> {
    let kron = match path {
        WeightPath::Dense => None,
        WeightPath::Kron => Some(model.factors.as_ref().ok_or_else(|| {
            EstimateError::Unsupported("factored weights requested without Kronecker factors".into())
        })?),
        WeightPath::Auto => model.factors.as_ref(),
    };
    let ts = &model.transitions;
    Ok(match (kind, kron) {
        (EstimatorKind::FD, Some(kf)) => weights::kron_sequential(kf, origin, 1)?,
        (EstimatorKind::FD, None) => weights::solve_sequential_periods(ts, origin, 1)?,
        (EstimatorKind::FD2, Some(kf)) => match weights::kron_two_period(kf, origin) {
            Err(WeightsError::SingularExogenous { .. }) if path == WeightPath::Auto => {
                weights::two_period_plan(ts, origin)?
            }
            r => r?,
        },
        (EstimatorKind::FD2, None) => weights::two_period_plan(ts, origin)?,
        (EstimatorKind::HM, _) => unreachable!("inversion has no weights"),
    })
}

pub fn prepare(cfg: &EstimatorConfig, model: &EstimationModel, window: Option<&[usize]>) -> Result<Prepared> {
    let origins = window.map_or_else(|| model.default_window(), |w| w.to_vec());
    if cfg.kind == EstimatorKind::HM {
        if !model.transitions.is_stationary() {
            return Err(EstimateError::Unsupported("policy inversion needs a stationary model".into()));
        }
        return Ok(Prepared {
            kind: cfg.kind,
            origins,
            plans: Vec::new(),
            features: Vec::new(),
            weight_time: 0.0,
        });
    }
    let start = Instant::now();
    let plans = origins
        .iter()
        .map(|&t| solve_plan(cfg.kind, model, t, cfg.weight_path))
        .collect::<Result<Vec<_>>>()?;
    let weight_time = start.elapsed().as_secs_f64();
    let features = plans
        .iter()
        .map(|p| assemble_features(p, &model.utility, model.beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        kind: cfg.kind,
        origins,
        plans,
        features,
        weight_time,
    })
}

fn max_norm(plans: &[WeightPlan], s: usize) -> Option<f64> {
    plans
        .iter()
        .filter_map(|p| p.residual_norms.get(s).copied())
        .reduce(f64::max)
}

/// Second step given the prepared weights and first-stage CCPs.
pub fn run_prepared(prep: &Prepared, model: &EstimationModel, panel: &Panel, p: &CcpTable) -> Result<EstimationReport> {
    let t0 = Instant::now();
    let stationary = model.transitions.is_stationary();
    let mut inv_time = 0.0;
    let lins: Vec<LinearValueDiff> = if prep.kind == EstimatorKind::HM {
        let s = Instant::now();
        let l = hm_linear(&model.transitions, &model.utility, p, model.beta)?;
        inv_time = s.elapsed().as_secs_f64();
        vec![l]
    } else {
        prep.plans
            .iter()
            .zip(&prep.features)
            .map(|(plan, h)| {
                Ok(LinearValueDiff {
                    h: h.clone(),
                    offset: assemble_offset(plan, p, model.beta)?,
                    bias: None,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let design = LogitDesign::build(&panel.obs, |t| {
        if stationary {
            lins.first()
        } else {
            prep.origins.iter().position(|&o| o == t).map(|i| &lins[i])
        }
    })?;
    let assembly = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let k = model.utility.n_params();
    let fit = maximize_logit(&design, &vec![0.0; k], NEWTON_TOL, NEWTON_MAX_ITER)?;
    let optimize = t1.elapsed().as_secs_f64();
    let weights_or_inv = if prep.kind == EstimatorKind::HM {
        inv_time
    } else {
        prep.weight_time
    };
    Ok(EstimationReport {
        estimator: prep.kind,
        names: model.utility.names.clone(),
        theta: fit.theta,
        loglik: fit.loglik,
        gradient_norm: fit.gradient_norm,
        iterations: fit.iterations,
        converged: fit.converged,
        n_obs: design.n_obs(),
        timing: Timing {
            weights_or_inv,
            assembly: assembly - inv_time,
            optimize,
            total: assembly + optimize + if prep.kind == EstimatorKind::HM { 0.0 } else { prep.weight_time },
        },
        residual1: max_norm(&prep.plans, 0),
        residual2: max_norm(&prep.plans, 1),
        ccp_clamped: p.clamped,
    })
}

/// Full two-step estimate from a panel.
pub fn fd_estimate(
    panel: &Panel,
    model: &EstimationModel,
    cfg: &EstimatorConfig,
    oracle: Option<&CcpTable>,
) -> Result<EstimationReport> {
    let p = estimate_ccp(panel, model.transitions.is_stationary(), cfg.ccp_mode, oracle)?;
    let prep = prepare(cfg, model, None)?;
    run_prepared(&prep, model, panel, &p)
}
