//! Joint neural-architecture and split-point search for split computing.
//!
//! A model that is split between an end device and an edge server pays three
//! latency costs: head-network compute on the device, transmission of the
//! intermediate representation over the link, and tail-network compute on the
//! server. This crate searches a layer-wise candidate-block space together
//! with the split position, minimizing a weighted sum of model loss and a
//! latency-threshold penalty. The search distribution is a product of
//! categoricals updated by an adaptive stochastic natural-gradient rule; the
//! loss term averages over packet-loss dropout rates at the split boundary.
//!
//! Module map:
//! - [`space`]: the joint search domain (candidate blocks, layers, splits) and
//!   its geometry (intermediate sizes, FLOPs, cardinality).
//! - [`categorical`]: the product-of-categoricals distribution: sampling,
//!   natural log-gradient, Fisher quantities, simplex projection.
//! - [`asng`]: the adaptive natural-gradient distribution update.
//! - [`latency`]: compute/communication latency models and the penalty.
//! - [`objective`]: the penalized objective and the evaluator contract.
//! - [`supernet`]: a desk-scale weight-sharing supernet with manual
//!   forward/backward and the pre-train / re-train stages.
//! - [`baseline`]: the hardware-aware-NAS comparison protocol (search without
//!   communication awareness, then post-hoc split selection).
//! - [`oracle`]: brute-force enumeration for small spaces.
//! - [`config`] / [`run`]: run configuration, orchestration, persistence.

pub mod asng;
pub mod baseline;
pub mod bundled;
pub mod categorical;
pub mod config;
pub mod error;
pub mod latency;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod run;
pub mod space;
pub mod supernet;

pub use error::{Error, Result};
