//! Self-optimizing controlled-variable (CV) design for batch processes.
//!
//! The crate covers the full workflow: per-scenario dynamic optimization of a
//! batch process, assembly of the scenario-averaged quadratic economic loss,
//! linear encoding of structural constraints on the stacked combination
//! matrix, the numerical and analytical CV design solvers, and closed-loop
//! Monte Carlo evaluation of the realized economic loss on a fed-batch
//! reactor benchmark.

pub mod closed_loop;
pub mod config;
pub mod design;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod process;
pub mod reactor;
pub mod scenario;
pub mod structure;
pub mod trajopt;

pub use error::{Error, Result};
