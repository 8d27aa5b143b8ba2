//! Simulation and planning toolkit for pipeline-parallel training over
//! unreliable, heterogeneous peers.
//!
//! The building blocks are independent of the simulator: [`cost_model`]
//! estimates per-stage compute and transfer time, [`wiring`] routes requests
//! between stages, [`registry`] models a delayed key-value directory of peers,
//! [`rebalancer`] moves peers between stages, and [`compression`] shrinks the
//! activations sent between them. [`sim`] composes them into a deterministic
//! discrete-event simulation driven by a preemption [`trace`].

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compression;
pub mod cost_model;
pub mod parallel;
pub mod peer;
pub mod rebalancer;
pub mod registry;
pub mod sim;
pub mod trace;
pub mod wiring;

pub use peer::{PeerId, StageIndex};
