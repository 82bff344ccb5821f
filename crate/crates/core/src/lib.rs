//! Discrete-time downlink slicing simulator.
//!
//! One base station serves self-managed slices (aggregate capacity
//! contracts) and reliable low-latency slices (per-user delay/reliability
//! contracts) over a shared set of PRBs. Each slot a controller turns
//! contract backlog into per-user rate weights and the allocator picks PRB
//! owners and powers that minimise power minus weighted rate.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocator;
pub mod channel;
pub mod controller;
pub mod engine;
pub mod lyapunov;
pub mod scenario;
pub mod traffic;
