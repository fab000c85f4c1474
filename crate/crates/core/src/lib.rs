//! Ensemble transform particle filtering.
//!
//! Prior ensembles are turned into equally weighted posterior ensembles by
//! solving a discrete optimal transport problem between the importance
//! weights and the prior weights, then applying the induced Markov matrix
//! deterministically (`X^a = X^f P`). The crate provides the transport
//! solver, the transform itself, importance sampling helpers, an implicit
//! midpoint integrator with Gaussian observation models, the resulting
//! particle filter next to an ensemble square root filter, and drivers for
//! the scalar and Lorenz-63 experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod defaults;
pub mod dynamics;
pub mod ensemble_transform;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod inference;
mod quadrature;
pub mod transport;

pub use ensemble_transform::Ensemble;
pub use error::{Error, Result};
