use findep_core::dp;
use findep_core::estimate::monte_carlo::{build_truth, Truth};
use findep_core::estimate::{
    assemble_linear, fd_estimate, fd_loglik, hm_linear, maximize_logit, EstimatorConfig, EstimatorKind,
    LinearValueDiff, LogitDesign, NEWTON_MAX_ITER, NEWTON_TOL,
};
use findep_core::linalg::{Matrix, Vector};
use findep_core::markov::EntryModelConfig;
use findep_core::weights;

fn truth(gamma_a: f64) -> Truth {
    build_truth(&EntryModelConfig {
        action_feedback: gamma_a,
        ..Default::default()
    })
    .unwrap()
}

fn fd2_linear(t: &Truth) -> LinearValueDiff {
    let plan = weights::kron_two_period(t.estimation.factors.as_ref().unwrap(), 0).unwrap();
    assemble_linear(&plan, &t.estimation.utility, &t.solution.ccp, t.estimation.beta, None).unwrap()
}

#[test]
fn fd2_and_inversion_likelihoods_agree_at_truth() {
    let t = truth(0.5);
    let panel = dp::simulate_panel(&t.solution, &t.dynamic, 200, 10, 5, 0).unwrap();
    let fd2 = fd2_linear(&t);
    let hm = hm_linear(&t.estimation.transitions, &t.estimation.utility, &t.solution.ccp, t.estimation.beta).unwrap();
    let d1 = LogitDesign::build(&panel.obs, |_| Some(&fd2)).unwrap();
    let d2 = LogitDesign::build(&panel.obs, |_| Some(&hm)).unwrap();
    let theta = &t.dynamic.theta;
    let (l1, _) = fd_loglik(theta, &d1).unwrap();
    let (l2, _) = fd_loglik(theta, &d2).unwrap();
    let n = d1.n_obs() as f64;
    assert!((l1 - l2).abs() / n <= 1e-6, "{l1} vs {l2}");
}

/// One fractional-response row per state: the population first-order
/// condition holds exactly at the true parameters.
fn population_design(lin: &LinearValueDiff, p1: &[f64]) -> LogitDesign {
    LogitDesign {
        x: lin.h.clone(),
        offset: lin.offset.clone(),
        y: Vector::from_column_slice(p1),
    }
}

#[test]
fn population_limit_recovers_truth() {
    for gamma_a in [0.0, 0.5] {
        let t = truth(gamma_a);
        let p1 = t.solution.ccp.p1(0).unwrap();
        let hm = hm_linear(&t.estimation.transitions, &t.estimation.utility, &t.solution.ccp, t.estimation.beta).unwrap();
        for lin in [fd2_linear(&t), hm] {
            let fit = maximize_logit(&population_design(&lin, p1), &[0.0; 7], NEWTON_TOL, NEWTON_MAX_ITER).unwrap();
            assert!(fit.converged);
            for (a, b) in fit.theta.iter().zip(&t.dynamic.theta) {
                assert!((a - b).abs() < 1e-6, "gamma_a={gamma_a}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn large_panel_recovers_truth_for_every_estimator() {
    let t = truth(0.0);
    let panel = dp::simulate_panel(&t.solution, &t.dynamic, 2500, 40, 31, 0).unwrap();
    for kind in [EstimatorKind::FD, EstimatorKind::FD2, EstimatorKind::HM] {
        let rep = fd_estimate(&panel, &t.estimation, &EstimatorConfig::new(kind), Some(&t.solution.ccp)).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.n_obs, 100_000);
        // Asymptotic standard errors from the information at the estimate.
        let lin = match kind {
            EstimatorKind::HM => {
                hm_linear(&t.estimation.transitions, &t.estimation.utility, &t.solution.ccp, t.estimation.beta).unwrap()
            }
            _ => fd2_linear(&t),
        };
        let d = LogitDesign::build(&panel.obs, |_| Some(&lin)).unwrap();
        let v = &d.x * Vector::from_column_slice(&rep.theta) + &d.offset;
        let mut info = Matrix::zeros(7, 7);
        for (i, row) in d.x.row_iter().enumerate() {
            let p = 1.0 / (1.0 + (-v[i]).exp());
            info += p * (1.0 - p) * row.transpose() * row;
        }
        let cov = info.try_inverse().unwrap();
        for j in 0..7 {
            let se = cov[(j, j)].sqrt();
            let err = (rep.theta[j] - t.dynamic.theta[j]).abs();
            assert!(err <= 4.0 * se, "{kind:?} param {j}: error {err} vs se {se}");
        }
        // The score at the truth is O(sqrt(n)), not O(n).
        let (_, g) = fd_loglik(&t.dynamic.theta, &d).unwrap();
        assert!(g.amax() < 5.0 * (d.n_obs() as f64).sqrt());
    }
}

#[test]
fn nonstationary_estimates_use_the_window() {
    let t = build_truth(&EntryModelConfig {
        action_feedback: 0.5,
        ..EntryModelConfig::nonstationary_default()
    })
    .unwrap();
    let panel = dp::simulate_panel(&t.solution, &t.dynamic, 300, 4, 8, 0).unwrap();
    let rep = fd_estimate(&panel, &t.estimation, &EstimatorConfig::new(EstimatorKind::FD2), Some(&t.solution.ccp)).unwrap();
    assert_eq!(rep.n_obs, 600);
    assert!(rep.residual2.unwrap() <= 1e-10);
    let hm = fd_estimate(&panel, &t.estimation, &EstimatorConfig::new(EstimatorKind::HM), Some(&t.solution.ccp));
    assert!(hm.is_err());
}
