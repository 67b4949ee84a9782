//! Decision weights that make future value terms cancel: sequential
//! (myopic) weights, jointly optimal two-period weights, nonstationary
//! variants, Kronecker-factored solvers, the diagonal least-squares
//! baseline, and a finite-dependence diagnosis.
//!
//! Notation: `F̃_t = F_{1,t} - F_{0,t}`. A plan starting at period `t` holds
//! weight matrices `W_s` (row = state at `t`, column = state at `t+s`) and
//! residuals `K_s = W_s F̃_{t+s} + K_{s-1} F_{0,t+s}` with `K_0 = F̃_t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, RankTol, Vector};
use crate::markov::{KronFactors, MarkovError, TransitionSet};

/// Rank rule used for every pseudo-inverse taken while solving for weights.
pub const WEIGHT_TOL: RankTol = RankTol::Scaled(1e-10);
pub const FLAG_EPS: f64 = 1e-12;
/// Default cap on the `X^3` entries of the diagonal least-squares design.
pub const DEFAULT_LSQ_CAP: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("shapes do not conform: {0}")]
    Shape(String),
    #[error("exogenous factor {factor} is singular; use the dense solver")]
    SingularExogenous { factor: usize },
    #[error("plan needs period {needed} but only {available} are available")]
    HorizonExceeded { needed: usize, available: usize },
    #[error("diagonal least squares needs {needed} entries, cap is {cap}")]
    TooLarge { needed: usize, cap: usize },
}

pub type Result<T> = std::result::Result<T, WeightsError>;

/// An X×X matrix, stored densely or as `endo ⊗ exo[0] ⊗ exo[1] ⊗ ...`.
#[derive(Debug, Clone)]
pub enum Operator {
    Dense(Matrix),
    Kron { endo: Matrix, exo: Vec<Matrix> },
}

impl Operator {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Operator::Dense(m) => m.shape(),
            Operator::Kron { endo, exo } => exo.iter().fold(endo.shape(), |(r, c), m| {
                (r * m.nrows(), c * m.ncols())
            }),
        }
    }

    fn exo_dense(exo: &[Matrix]) -> Result<Matrix> {
        Ok(linalg::kron_all(exo, usize::MAX)?)
    }

    /// `self * m`
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        match self {
            Operator::Dense(a) => {
                if a.ncols() != m.nrows() {
                    return Err(WeightsError::Shape(format!("{:?} * {:?}", a.shape(), m.shape())));
                }
                Ok(a * m)
            }
            Operator::Kron { endo, exo } => Ok(linalg::kron_matmul(endo, &Self::exo_dense(exo)?, m)?),
        }
    }

    pub fn apply_vec(&self, v: &Vector) -> Result<Vector> {
        let m = Matrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.apply(&m)?.column(0).into_owned())
    }

    pub fn to_dense(&self) -> Result<Matrix> {
        match self {
            Operator::Dense(m) => Ok(m.clone()),
            Operator::Kron { endo, exo } => {
                let (r, c) = self.shape();
                let cap = linalg::DEFAULT_KRON_CAP;
                if r.saturating_mul(c) > cap {
                    return Err(LinalgError::TooLarge { rows: r, cols: c, cap }.into());
                }
                Ok(linalg::kron(endo, &Self::exo_dense(exo)?)?)
            }
        }
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        match self {
            Operator::Dense(m) => Ok(linalg::spectral_norm(m)?),
            Operator::Kron { endo, exo } => {
                let mut n = linalg::spectral_norm(endo)?;
                for m in exo {
                    n *= linalg::spectral_norm(m)?;
                }
                Ok(n)
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Operator::Dense(m) => m.norm(),
            Operator::Kron { endo, exo } => exo.iter().fold(endo.norm(), |a, m| a * m.norm()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let ma = |m: &Matrix| m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
        match self {
            Operator::Dense(m) => ma(m),
            Operator::Kron { endo, exo } => exo.iter().fold(ma(endo), |a, m| a * ma(m)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    OnePeriod,
    Sequential,
    TwoPeriodOptimal,
}

#[derive(Debug, Clone)]
pub struct WeightPlan {
    pub kind: PlanKind,
    /// Period of the current state.
    pub origin: usize,
    /// `K_0 = F̃_origin`.
    pub base: Operator,
    /// `W_1..W_rho`.
    pub weights: Vec<Operator>,
    /// `K_1..K_rho`; the last one is the remaining dependence.
    pub residuals: Vec<Operator>,
    pub residual_norms: Vec<f64>,
    pub residual_frobenius: Vec<f64>,
    /// Per step, `(row, col)` entries with a nonzero weight on a path the
    /// preceding residual says is unreachable. Empty for factored plans.
    pub flags: Vec<Vec<(usize, usize)>>,
}

impl WeightPlan {
    pub fn rho(&self) -> usize {
        self.weights.len()
    }

    /// `K_s` for `s` in `0..=rho`.
    pub fn kappa(&self, s: usize) -> &Operator {
        if s == 0 {
            &self.base
        } else {
            &self.residuals[s - 1]
        }
    }

    pub fn final_residual_norm(&self) -> f64 {
        *self.residual_norms.last().expect("nonempty plan")
    }

    pub fn n_states(&self) -> usize {
        self.base.shape().0
    }

    fn finish(
        kind: PlanKind,
        origin: usize,
        base: Operator,
        weights: Vec<Operator>,
        residuals: Vec<Operator>,
    ) -> Result<Self> {
        let residual_norms = residuals
            .iter()
            .map(|r| r.spectral_norm())
            .collect::<Result<Vec<_>>>()?;
        let residual_frobenius = residuals.iter().map(|r| r.frobenius_norm()).collect();
        let mut flags = Vec::new();
        if let Operator::Dense(_) = base {
            for s in 0..weights.len() {
                let k = match s {
                    0 => &base,
                    _ => &residuals[s - 1],
                };
                if let (Operator::Dense(w), Operator::Dense(k)) = (&weights[s], k) {
                    flags.push(extract_w(w, k, FLAG_EPS)?.1);
                }
            }
        }
        Ok(WeightPlan {
            kind,
            origin,
            base,
            weights,
            residuals,
            residual_norms,
            residual_frobenius,
            flags,
        })
    }
}

fn conform(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.ncols() != b.nrows() {
        return Err(WeightsError::Shape(format!("{op}: {:?} * {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_square(name: &str, m: &Matrix, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(WeightsError::Shape(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
    }
    linalg::ensure_finite(m)?;
    Ok(())
}

/// One future period: `(F_0, F̃, F̃^+)`.
struct Step<'a> {
    f0: &'a Matrix,
    ft: &'a Matrix,
    ft_pinv: Matrix,
}

impl<'a> Step<'a> {
    fn new(f0: &'a Matrix, ft: &'a Matrix) -> Result<Self> {
        Ok(Step {
            f0,
            ft,
            ft_pinv: linalg::pinv(ft, WEIGHT_TOL)?,
        })
    }
}

/// `W_s = -K_{s-1} F_0 F̃^+`, `K_s = W_s F̃ + K_{s-1} F_0` for each step.
fn sequential_core(base: &Matrix, steps: &[Step]) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut ws = Vec::with_capacity(steps.len());
    let mut ks = Vec::with_capacity(steps.len());
    let mut k = base.clone();
    for st in steps {
        conform("sequential", &k, st.f0)?;
        let kf0 = &k * st.f0;
        let w = -(&kf0 * &st.ft_pinv);
        let next = &w * st.ft + kf0;
        ws.push(w);
        ks.push(next.clone());
        k = next;
    }
    Ok((ws, ks))
}

/// Jointly optimal two-step weights. Returns `W_1, W_2, K_1, K_2`.
fn two_period_core(base: &Matrix, s1: &Step, s2: &Step) -> Result<[Matrix; 4]> {
    conform("two-period", base, s1.f0)?;
    let n = s2.ft.ncols();
    let proj2 = Matrix::identity(n, n) - &s2.ft_pinv * s2.ft;
    let e0 = s2.f0 * proj2;
    let g = s1.ft * &e0;
    let bf0 = base * s1.f0;
    let a = &bf0 * &e0;
    let w1 = -(a * linalg::pinv(&g, WEIGHT_TOL)?);
    let k1 = &w1 * s1.ft + bf0;
    let k1f0 = &k1 * s2.f0;
    let w2 = -(&k1f0 * &s2.ft_pinv);
    let k2 = &w2 * s2.ft + k1f0;
    Ok([w1, w2, k1, k2])
}

/// Closed form of the optimal two-step residual,
/// `F̃_t F_{0,t+1} E (I - (F̃_{t+1} E)^+ F̃_{t+1} E)` with `E = F_{0,t+2} P_{t+2}`.
pub fn two_period_residual_closed_form(
    ft: &Matrix,
    f0_t1: &Matrix,
    ftilde_t1: &Matrix,
    f0_t2: &Matrix,
    ftilde_t2: &Matrix,
) -> Result<Matrix> {
    let e0 = f0_t2 * linalg::null_projector(ftilde_t2, WEIGHT_TOL)?;
    let g = ftilde_t1 * &e0;
    let a = ft * f0_t1 * &e0;
    Ok(&a * linalg::null_projector(&g, WEIGHT_TOL)?)
}

fn dense_ops(ms: Vec<Matrix>) -> Vec<Operator> {
    ms.into_iter().map(Operator::Dense).collect()
}

/// `W = -F̃_t F_{0,t+1} F̃_{t+1}^+` and its residual `W F̃_{t+1} + F̃_t F_{0,t+1}`.
pub fn solve_one_period(
    ft: &Matrix,
    f0_next: &Matrix,
    ftilde_next: &Matrix,
    tol: RankTol,
) -> Result<(Matrix, Matrix)> {
    let n = ft.nrows();
    check_square("F̃_t", ft, n)?;
    check_square("F_0,t+1", f0_next, n)?;
    check_square("F̃_t+1", ftilde_next, n)?;
    let fp = ft * f0_next;
    let w = -(&fp * linalg::pinv(ftilde_next, tol)?);
    let r = &w * ftilde_next + fp;
    Ok((w, r))
}

/// Stationary sequential weights over `rho` steps.
pub fn solve_sequential(ftilde: &Matrix, f0: &Matrix, rho: usize) -> Result<WeightPlan> {
    if rho == 0 {
        return Err(WeightsError::ZeroHorizon);
    }
    let n = ftilde.nrows();
    check_square("F̃", ftilde, n)?;
    check_square("F_0", f0, n)?;
    let step = Step::new(f0, ftilde)?;
    let steps: Vec<Step> = (0..rho)
        .map(|_| Step {
            f0,
            ft: ftilde,
            ft_pinv: step.ft_pinv.clone(),
        })
        .collect();
    let (ws, ks) = sequential_core(ftilde, &steps)?;
    let kind = if rho == 1 {
        PlanKind::OnePeriod
    } else {
        PlanKind::Sequential
    };
    WeightPlan::finish(kind, 0, Operator::Dense(ftilde.clone()), dense_ops(ws), dense_ops(ks))
}

fn needed_periods(ts_periods: usize, stationary: bool, origin: usize, rho: usize) -> Result<()> {
    if !stationary && origin + rho >= ts_periods {
        return Err(WeightsError::HorizonExceeded {
            needed: origin + rho,
            available: ts_periods,
        });
    }
    Ok(())
}

/// Sequential weights with period-specific transitions.
pub fn solve_sequential_periods(ts: &TransitionSet, origin: usize, rho: usize) -> Result<WeightPlan> {
    if rho == 0 {
        return Err(WeightsError::ZeroHorizon);
    }
    if ts.is_stationary() {
        return solve_sequential(&ts.ftilde(0)?, ts.f(0, 0)?, rho);
    }
    needed_periods(ts.n_periods(), false, origin, rho)?;
    let fts: Vec<Matrix> = (1..=rho).map(|s| ts.ftilde(origin + s)).collect::<std::result::Result<_, _>>()?;
    let steps = (1..=rho)
        .map(|s| Step::new(ts.f(0, origin + s)?, &fts[s - 1]))
        .collect::<Result<Vec<_>>>()?;
    let base = ts.ftilde(origin)?;
    let (ws, ks) = sequential_core(&base, &steps)?;
    let kind = if rho == 1 {
        PlanKind::OnePeriod
    } else {
        PlanKind::Sequential
    };
    WeightPlan::finish(kind, origin, Operator::Dense(base), dense_ops(ws), dense_ops(ks))
}

/// Stationary jointly optimal two-period weights.
pub fn solve_two_period_optimal(ftilde: &Matrix, f0: &Matrix) -> Result<WeightPlan> {
    solve_nonstationary_two_period(ftilde, f0, ftilde, f0, ftilde).map(|mut p| {
        p.origin = 0;
        p
    })
}

/// Jointly optimal two-period weights with period-specific transitions.
pub fn solve_nonstationary_two_period(
    ft: &Matrix,
    f0_t1: &Matrix,
    ftilde_t1: &Matrix,
    f0_t2: &Matrix,
    ftilde_t2: &Matrix,
) -> Result<WeightPlan> {
    let n = ft.nrows();
    for (name, m) in [
        ("F̃_t", ft),
        ("F_0,t+1", f0_t1),
        ("F̃_t+1", ftilde_t1),
        ("F_0,t+2", f0_t2),
        ("F̃_t+2", ftilde_t2),
    ] {
        check_square(name, m, n)?;
    }
    let s1 = Step::new(f0_t1, ftilde_t1)?;
    let s2 = Step::new(f0_t2, ftilde_t2)?;
    let [w1, w2, k1, k2] = two_period_core(ft, &s1, &s2)?;
    WeightPlan::finish(
        PlanKind::TwoPeriodOptimal,
        0,
        Operator::Dense(ft.clone()),
        dense_ops(vec![w1, w2]),
        dense_ops(vec![k1, k2]),
    )
}

pub fn two_period_plan(ts: &TransitionSet, origin: usize) -> Result<WeightPlan> {
    if ts.is_stationary() {
        return solve_two_period_optimal(&ts.ftilde(0)?, ts.f(0, 0)?);
    }
    needed_periods(ts.n_periods(), false, origin, 2)?;
    let mut plan = solve_nonstationary_two_period(
        &ts.ftilde(origin)?,
        ts.f(0, origin + 1)?,
        &ts.ftilde(origin + 1)?,
        ts.f(0, origin + 2)?,
        &ts.ftilde(origin + 2)?,
    )?;
    plan.origin = origin;
    Ok(plan)
}

fn powers(f: &Matrix, upto: usize) -> Vec<Matrix> {
    let n = f.nrows();
    let mut out = vec![Matrix::identity(n, n)];
    for p in 1..=upto {
        out.push(&out[p - 1] * f);
    }
    out
}

/// Sequential weights on the factored representation. Exogenous parts are
/// `f^{s+1} f^+` for weights and `f^{s+1}` for residuals, so no X×X matrix is
/// ever formed.
pub fn kron_sequential(kf: &KronFactors, origin: usize, rho: usize) -> Result<WeightPlan> {
    if rho == 0 {
        return Err(WeightsError::ZeroHorizon);
    }
    needed_periods(kf.n_periods(), kf.is_stationary(), origin, rho)?;
    let fts: Vec<Matrix> = (1..=rho)
        .map(|s| kf.endo_ftilde(origin + s))
        .collect::<std::result::Result<_, _>>()?;
    let steps = (1..=rho)
        .map(|s| Step::new(kf.endo_f(0, origin + s)?, &fts[s - 1]))
        .collect::<Result<Vec<_>>>()?;
    let base = kf.endo_ftilde(origin)?;
    let (ws, ks) = sequential_core(&base, &steps)?;
    let pows: Vec<Vec<Matrix>> = kf.exo.iter().map(|f| powers(f, rho + 1)).collect();
    let pinvs = kf
        .exo
        .iter()
        .map(|f| linalg::pinv(f, WEIGHT_TOL))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let weights = ws
        .into_iter()
        .enumerate()
        .map(|(i, w)| Operator::Kron {
            endo: w,
            exo: pows.iter().zip(&pinvs).map(|(p, q)| &p[i + 2] * q).collect(),
        })
        .collect();
    let residuals = ks
        .into_iter()
        .enumerate()
        .map(|(i, k)| Operator::Kron {
            endo: k,
            exo: pows.iter().map(|p| p[i + 2].clone()).collect(),
        })
        .collect();
    let kind = if rho == 1 {
        PlanKind::OnePeriod
    } else {
        PlanKind::Sequential
    };
    WeightPlan::finish(
        kind,
        origin,
        Operator::Kron {
            endo: base,
            exo: kf.exo.clone(),
        },
        weights,
        residuals,
    )
}

/// Stationary factored sequential weights.
pub fn kron_solve(kf: &KronFactors, rho: usize) -> Result<WeightPlan> {
    kron_sequential(kf, 0, rho)
}

/// Jointly optimal two-period weights on the factored representation.
/// Requires every exogenous chain to be invertible.
pub fn kron_two_period(kf: &KronFactors, origin: usize) -> Result<WeightPlan> {
    needed_periods(kf.n_periods(), kf.is_stationary(), origin, 2)?;
    for (i, f) in kf.exo.iter().enumerate() {
        if linalg::svd(f, WEIGHT_TOL)?.rank < f.nrows() {
            return Err(WeightsError::SingularExogenous { factor: i });
        }
    }
    let ft1 = kf.endo_ftilde(origin + 1)?;
    let ft2 = kf.endo_ftilde(origin + 2)?;
    let s1 = Step::new(kf.endo_f(0, origin + 1)?, &ft1)?;
    let s2 = Step::new(kf.endo_f(0, origin + 2)?, &ft2)?;
    let base = kf.endo_ftilde(origin)?;
    let [w1, w2, k1, k2] = two_period_core(&base, &s1, &s2)?;
    let pows: Vec<Vec<Matrix>> = kf.exo.iter().map(|f| powers(f, 3)).collect();
    let exo = |p: usize| pows.iter().map(|v| v[p].clone()).collect::<Vec<_>>();
    WeightPlan::finish(
        PlanKind::TwoPeriodOptimal,
        origin,
        Operator::Kron {
            endo: base,
            exo: kf.exo.clone(),
        },
        vec![
            Operator::Kron { endo: w1, exo: exo(1) },
            Operator::Kron { endo: w2, exo: exo(2) },
        ],
        vec![
            Operator::Kron { endo: k1, exo: exo(2) },
            Operator::Kron { endo: k2, exo: exo(3) },
        ],
    )
}

/// Realizable weights: the input unchanged plus every entry that puts
/// weight where `f̃` is zero.
pub fn extract_w(w_check: &Matrix, ftilde: &Matrix, eps: f64) -> Result<(Matrix, Vec<(usize, usize)>)> {
    if w_check.shape() != ftilde.shape() {
        return Err(WeightsError::Shape(format!(
            "weights {:?} vs residual {:?}",
            w_check.shape(),
            ftilde.shape()
        )));
    }
    let mut flagged = Vec::new();
    for j in 0..w_check.ncols() {
        for i in 0..w_check.nrows() {
            if w_check[(i, j)].abs() > eps && ftilde[(i, j)].abs() <= eps {
                flagged.push((i, j));
            }
        }
    }
    Ok((w_check.clone(), flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdVerdict {
    OnePeriodFD,
    TwoPeriodFD,
    NotDetected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdDiagnosis {
    pub verdict: FdVerdict,
    pub rank: usize,
    pub nullity: usize,
    /// Norm of the block of `V^T F_0 V` mapping the null space of F̃ into its row space.
    pub norm_s01: f64,
    /// Norm of the obstruction to two-period dependence.
    pub norm_two_period: f64,
    pub tol: f64,
}

/// Classify one- and two-period finite dependence from the SVD of F̃.
pub fn diagnose_finite_dependence(ftilde: &Matrix, f0: &Matrix, tol: f64) -> Result<FdDiagnosis> {
    let n = ftilde.nrows();
    check_square("F̃", ftilde, n)?;
    check_square("F_0", f0, n)?;
    let f = linalg::svd(ftilde, WEIGHT_TOL)?;
    let r = f.rank;
    let s0 = f.v.transpose() * f0 * &f.v;
    let s01 = s0.view((0, r), (r, n - r)).into_owned();
    let s11 = s0.view((r, r), (n - r, n - r)).into_owned();
    let norm_s01 = if s01.is_empty() {
        0.0
    } else {
        linalg::spectral_norm(&s01)?
    };
    let norm_two_period = if s01.is_empty() {
        0.0
    } else {
        let m = &s01 * &s11 * linalg::null_projector(&s01, WEIGHT_TOL)?;
        linalg::spectral_norm(&m)?
    };
    let verdict = if norm_s01 <= tol {
        FdVerdict::OnePeriodFD
    } else if norm_two_period <= tol {
        FdVerdict::TwoPeriodFD
    } else {
        FdVerdict::NotDetected
    };
    Ok(FdDiagnosis {
        verdict,
        rank: r,
        nullity: n - r,
        norm_s01,
        norm_two_period,
        tol,
    })
}

#[derive(Debug, Clone)]
pub struct VecLsq {
    /// One weight per next state, shared by every current state.
    pub w: Vector,
    /// `||F̃ (diag(w) F̃ + F_0)||_F`
    pub residual: f64,
}

/// Minimum-norm diagonal weights minimizing `||F̃ (diag(w) F̃ + F_0)||_F`.
pub fn vec_lsq_solve(ftilde: &Matrix, f0: &Matrix, cap: usize) -> Result<VecLsq> {
    let n = ftilde.nrows();
    check_square("F̃", ftilde, n)?;
    check_square("F_0", f0, n)?;
    let needed = n.saturating_mul(n).saturating_mul(n);
    if needed > cap {
        return Err(WeightsError::TooLarge { needed, cap });
    }
    // Column i of the design is vec(F̃[:, i] F̃[i, :]); its Gram matrix is
    // (F̃^T F̃) ∘ (F̃ F̃^T) and the design never needs to be formed.
    let gram = (ftilde.transpose() * ftilde).component_mul(&(ftilde * ftilde.transpose()));
    let target = ftilde * f0;
    let cross = (ftilde.transpose() * &target * ftilde.transpose()).diagonal();
    let w = -(linalg::pinv(&gram, RankTol::Scaled(1e-12))? * cross);
    let r = ftilde * (Matrix::from_diagonal(&w) * ftilde + f0);
    Ok(VecLsq {
        w,
        residual: r.norm(),
    })
}
