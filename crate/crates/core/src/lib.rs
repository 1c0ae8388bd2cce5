//! Equilibrium liquidation of a bubble asset as a mean field game.
//!
//! Traders hold inventory in an asset whose price carries a bubble
//! component. The bubble bursts either exogenously or once the mean
//! inventory falls to a threshold. Each trader's best response is the
//! solution of a coupled pre-/post-burst BSDE system, solved here by
//! least-squares Monte Carlo; the mean flows are found by damped Picard
//! iteration.

// `!(x > 0.0)` is used on purpose so NaN fails validation; the numeric
// kernels index several parallel arrays and take many inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bsde;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod output;
pub mod paths;
pub mod scenario;
pub mod simulate;
pub mod stochastics;
pub mod validation;

pub use bsde::{BsdeFamily, PolyFit, StepData, TimeGrid};
pub use equilibrium::{picard_solve, Equilibrium, FixedPointReport, MeanFlows, NumericsSpec};
pub use error::{Error, Result};
pub use scenario::{Preset, Scenario};
pub use simulate::{Estimate, PathStats, PolicyField};
pub use stochastics::{PathBundle, Seed};
