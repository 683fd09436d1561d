//! Harmonic and Poisson metrics on flat vector bundles over lattice model
//! domains, computed by the metric heat flow `H^{-1} dH/dt = 2 D_H^* psi_H`.

pub mod error;
pub mod linalg;
pub mod mesh;
pub mod bundle;
pub mod oracle;
pub mod analysis;
pub mod flow;
pub mod hodge;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
