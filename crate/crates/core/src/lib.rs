//! Hierarchical matching of crowdsourced-delivery drivers to delivery tasks.
//!
//! The pipeline has three layers:
//!
//! * [`master`] splits the task supply across driver groups (one group per
//!   origin-destination pair) by solving a logit fluid approximation, which is
//!   an entropy-regularized optimal transport problem with a capped column
//!   marginal. It is solved by Sinkhorn scaling.
//! * [`auction`] runs one VCG auction per group on the rounded partition,
//!   matching individual drivers to tasks and pricing each driver's externality.
//! * [`baseline`] solves the undecomposed problem exactly and checks the
//!   market-equilibrium conditions, for comparison.
//!
//! [`network`] and [`scenario`] build instances; [`bench`] runs the whole
//! comparison and writes reports.

pub mod auction;
pub mod baseline;
pub mod bench;
mod error;
pub mod master;
pub mod network;
pub mod scenario;
pub mod transport;

pub use error::{Error, Result};
