//! Orchestration for `legato-core`: run configs, the train / rollout /
//! metrics / report / sweep pipeline and the model-free oracle check.

pub mod commands;
pub mod config;
pub mod oracle;

pub use commands::{
    aggregate, cmd_metrics, cmd_report, cmd_rollout, cmd_sweep, cmd_train, completion_proxy, find_traces, RunOptions,
};
pub use config::{Cell, GridSchedule, Layout, RunConfig};
pub use oracle::{CheckOutcome, OracleSuite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
