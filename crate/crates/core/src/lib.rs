//! Downlink analysis toolkit for asynchronous cell-free massive MIMO with
//! rate-splitting.
//!
//! The crate is organised bottom-up: [`model`] draws networks and phase
//! statistics, [`estimation`] derives MMSE statistics, [`closed_form`]
//! evaluates the analytical SINR/SE expressions, [`montecarlo`] checks them
//! by sampling, [`optimize`] picks the power split and robust common
//! weights, and [`cli`] wires everything to config files and CSV output.

pub mod closed_form;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod optimize;
pub mod scenario;

pub use error::{Error, Result};
pub use scenario::Scenario;
