//! Rare-event probabilities via large-deviation optimization, importance
//! sampling and FORM/SORM, with a 1D tsunami model solved by DG shallow water
//! equations and a hand-written discrete adjoint.

pub mod error;
pub mod measures;
pub mod source_model;
pub mod swe;
pub mod adjoint;
pub mod ldt;
pub mod tsunami;
pub mod estimators;

pub use error::{Error, Result};
