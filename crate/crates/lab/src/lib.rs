//! Files, configuration, analysis tools and the `sta` command line built on
//! [`sta_core`].
//!
//! - [`config`]: TOML run configuration with a resolved-config echo
//! - [`dataset`]: demonstration datasets on disk
//! - [`checkpoint`]: policy and optimiser checkpoints
//! - [`run`]: training runs with metrics logs
//! - [`ablation`]: masking and history-length ablations
//! - [`trace`]: attention-trace export
//! - [`bench`]: inference cost of cached and uncached attention
//! - [`cli`]: the command line

pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod run;
pub mod trace;
