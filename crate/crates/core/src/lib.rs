//! Budgeted real-time versus cached recommendation serving: a session
//! simulator, a small dense-network toolkit, an actor-critic predictor of
//! real-time value and a streaming allocator under a strict hourly budget.

pub mod allocation;
pub mod harness;
pub mod nn;
pub mod prediction;
pub mod sim;
