//! Rule learning for knowledge-graph reasoning.
//!
//! An autoregressive [`generator`] proposes chain rules per query relation, a
//! log-linear [`predictor`] scores candidate answers from the rules'
//! [`grounding`] paths, and the [`em`] trainer alternates between the two:
//! the predictor is fit on sampled rules, high-quality rules are selected per
//! training instance, and the generator is refit on the selection. [`eval`]
//! ranks test queries under the filtered protocol.

pub mod checkpoint;
pub mod em;
pub mod error;
pub mod eval;
pub mod generator;
pub mod grounding;
pub mod kg;
pub mod optim;
pub mod predictor;
pub mod rule;

pub use error::{Error, Result};
