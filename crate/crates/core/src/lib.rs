//! Closed-form preservation–memorization model editing on toy residual models.
//!
//! A [`toy_model::ToyModel`] is a stack of residual feed-forward blocks
//! `h ← h + W·σ(A·h)`. Each down-projection `W` acts as a linear key–value
//! memory: the key of an input at layer ℓ is `σ(A_ℓ·h_ℓ)`, the value is what
//! `W_ℓ` maps it to. The editors in [`editors`] compute updates `Δ` to a single
//! `W_ℓ` that write new key–value pairs while keeping the outputs on a set of
//! preserved keys close to the original:
//!
//! - ROME: one key, equality constraint, rank-one update.
//! - MEMIT: many keys, least-squares memorization weighted against preservation by λ.
//! - EMMET: many keys, equality constraints.
//!
//! [`harness`] wraps these in the singular, batched, and sequential-batched
//! editing protocols with efficacy/paraphrase/neighborhood scoring, and
//! [`cli_report`] provides the command-line runner, CSV output and SVG plots.

pub mod cli_report;
pub mod editors;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod svg;
pub mod toy_model;
pub mod value_solver;

pub use error::{EditError, Result};
pub use numerics::Matrix;
