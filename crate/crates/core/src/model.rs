//! Linear-in-parameters flow utility and the assembled structural model.

use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::markov::TransitionSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature matrices have shapes {0:?} and {1:?}")]
    FeatureShape((usize, usize), (usize, usize)),
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("{0} parameter names for {1} features")]
    NameCount(usize, usize),
    #[error("utility has {utility} states but transitions have {transitions}")]
    StateMismatch { utility: usize, transitions: usize },
    #[error("beta must lie in (0, 1), got {0}")]
    Discount(f64),
}

/// `u(x, d) = phi_d(x) · theta`.
#[derive(Debug, Clone)]
pub struct UtilityModel {
    pub phi0: Matrix,
    pub phi1: Matrix,
    pub names: Vec<String>,
}

impl UtilityModel {
    pub fn new(phi0: Matrix, phi1: Matrix, names: Vec<String>) -> Result<Self, ModelError> {
        if phi0.shape() != phi1.shape() {
            return Err(ModelError::FeatureShape(phi0.shape(), phi1.shape()));
        }
        if names.len() != phi0.ncols() {
            return Err(ModelError::NameCount(names.len(), phi0.ncols()));
        }
        Ok(UtilityModel { phi0, phi1, names })
    }

    pub fn n_states(&self) -> usize {
        self.phi0.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.phi0.ncols()
    }

    pub fn phi(&self, d: usize) -> &Matrix {
        if d == 0 {
            &self.phi0
        } else {
            &self.phi1
        }
    }

    pub fn phi_tilde(&self) -> Matrix {
        &self.phi1 - &self.phi0
    }

    pub fn flow(&self, theta: &[f64]) -> Result<[Vector; 2], ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::ParameterCount {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let th = Vector::from_column_slice(theta);
        Ok([&self.phi0 * &th, &self.phi1 * &th])
    }
}

/// Transitions, utility features, a parameter point, and the discount factor.
#[derive(Debug, Clone)]
pub struct DynamicModel {
    pub transitions: TransitionSet,
    pub utility: UtilityModel,
    pub theta: Vec<f64>,
    pub beta: f64,
}

impl DynamicModel {
    pub fn new(
        transitions: TransitionSet,
        utility: UtilityModel,
        theta: Vec<f64>,
        beta: f64,
    ) -> Result<Self, ModelError> {
        if utility.n_states() != transitions.n_states() {
            return Err(ModelError::StateMismatch {
                utility: utility.n_states(),
                transitions: transitions.n_states(),
            });
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(ModelError::Discount(beta));
        }
        utility.flow(&theta)?;
        Ok(DynamicModel {
            transitions,
            utility,
            theta,
            beta,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transitions.n_states()
    }

    pub fn payoffs(&self) -> [Vector; 2] {
        self.utility.flow(&self.theta).expect("validated at construction")
    }
}
