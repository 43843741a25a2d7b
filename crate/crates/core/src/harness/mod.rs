//! Plumbing around the core: configuration, trajectory files, statistics,
//! remote model clients and the HTTP session service.

pub mod config;
pub mod persist;
pub mod remote;
pub mod script;
pub mod service;
pub mod stats;

pub use config::{Config, ImageMode};
pub use persist::{
    append_records, read_jsonl, read_records, write_records, TrajectoryRecord, SCHEMA_VERSION,
};
pub use script::{ScriptBook, ScriptEntry};
pub use stats::{compute_stats, StatsReport};
