//! Generic local identifiability of layered feed-forward network systems.
//!
//! A network is a layered DAG with linear edge weights and one analytic node
//! nonlinearity `f` with `f(0) = 0`. Exciting the source with a pulse of
//! amplitude `x` makes the sink read `F(x)`, a nested composition of `f`.
//!
//! * [`network`]: topologies, weights, activations, JSON files.
//! * [`series`]: truncated MacLaurin propagation of `F` with weight gradients.
//! * [`identifiability`]: Jacobian rank certificates and Gauss–Newton recovery.
//! * [`simulator`]: time-domain simulation of the node dynamics.
//! * [`exp_recovery`]: constructive recovery for `f(x) = e^x - 1`.

pub mod exp_recovery;
pub mod identifiability;
pub mod network;
pub mod par;
pub mod series;
pub mod simulator;

pub use network::{
    AnalyticActivation, LayeredTopology, Network, NetworkError, NetworkFile, WeightMatrix,
};
pub use par::Parallelism;
pub use series::{JetSeries, SeriesError, TruncatedSeries};
