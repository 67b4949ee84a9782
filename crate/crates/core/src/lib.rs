//! Finite-dependence tools for binary dynamic discrete choice models.

pub mod linalg;
pub mod markov;
pub mod model;
pub mod weights;
pub mod ccp;
pub mod dp;
pub mod estimate;
