//! Aggregation kinetics of toxic protein oligomers with clearance, on
//! single regions and on brain networks, plus therapy and dosing analysis.

pub mod error;
pub mod kinetics;
pub mod solver;
pub mod analysis;
pub mod connectome;
pub mod therapy;
pub mod optimizer;

pub use error::{Error, Result};
