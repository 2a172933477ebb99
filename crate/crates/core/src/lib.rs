//! Asynchronous, delay-tolerant distributed pose-graph optimization.
//!
//! Robots own disjoint trajectories of a pose graph and run Riemannian
//! gradient steps on their local cost using possibly stale copies of their
//! neighbors' boundary poses. The [`sim`] module drives the robots with a
//! deterministic discrete-event loop so that convergence properties can be
//! audited iteration by iteration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod graph;
pub mod manifold;
pub mod objective;
pub mod sim;
pub mod worker;

pub use error::{Error, Result};
