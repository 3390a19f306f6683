//! Schedule-shaped continuation for action-chunked flow-matching policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: guidance weights over the chunk horizon, built from a
//!   full-guidance prefix `d` and a linear ramp of length `r`.
//! - [`flowmath`]: closed-form paths, mixtures, target velocities and the
//!   per-step guided Euler recurrence. Everything here is model-free.
//! - [`policy`]: a small MLP velocity field with hand-written backprop, Adam,
//!   and the training loop for the vanilla, continuation and hard-prefix
//!   families.
//! - [`tasks`]: synthetic 2-D environments with expert demonstrators and a
//!   binary dataset container.
//! - [`executor`]: the delayed receding-horizon simulator and the five
//!   continuation strategies.
//! - [`metrics`]: spectral arc length, log dimensionless jerk, overlap RMSE
//!   and mode-switch counting.

pub mod error;
pub mod executor;
pub mod flowmath;
pub mod metrics;
pub mod policy;
pub mod schedule;
pub mod tasks;

pub use error::{Error, Result};
pub use flowmath::Chunk;
pub use schedule::{GuidanceSchedule, ScheduleParams};
