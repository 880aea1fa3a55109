//! Monitoring service around `situwatch-core`: HTTP and event-stream API, raw TCP
//! line ingest, and the offline commands used by the `situwatch` CLI.

pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use config::ServiceConfig;
pub use server::{router, start, AppState, IngestSummary, Running, Shared};
