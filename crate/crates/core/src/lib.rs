//! Finite-element laboratory for the mean-zero Moser-Trudinger inequality
//! with the alpha-modified Dirichlet norm `||u||_{1,a}^2 = |grad u|^2 - a |u|^2`.

pub mod error;
pub mod expr;
pub mod fem;
pub mod green;
pub mod meanfield;
pub mod mesh;
pub mod moser;
pub mod quad;
pub mod runner;
pub mod solver;
pub mod sparse;
pub mod spectral;
pub mod subcritical;

pub use error::{Error, Result};
