//! Reshuffled-cyclic SGD on finite-sum objectives, with path diagnostics.
//!
//! The library trains small models (synthetic least squares, phase retrieval,
//! MLPs over datasets) with constant-step SGD under per-epoch reshuffling,
//! records the optimization path, and derives diagnostics from it: epochwise
//! and iterationwise star-convexity residuals, distance-to-reference series,
//! star-convex step fractions, per-component subsequence losses, stochastic
//! gradient variance, and per-step/per-epoch inequality audits.
//!
//! Everything is deterministic given explicit seeds: the same problem, start
//! point and run configuration reproduce bitwise-identical traces.
//!
//! See the crate examples for end-to-end usage; the `starpath` binary exposes
//! the `train` / `analyze` / `plot` pipeline over config files.

pub mod analyzer;
pub mod cli;
pub mod dataio;
pub mod model;
pub mod numcore;
pub mod plot;
pub mod problems;
pub mod rng;
pub mod schedule;
pub mod sgdrun;

pub use numcore::ParamVector;
pub use problems::FiniteSumProblem;
