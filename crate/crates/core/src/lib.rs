//! Real-time comparison of multivariate bio-signal situations against baselines
//! recorded ahead of known events.
//!
//! The pipeline: raw readings ([`ingest`]) are windowed onto uniform grids
//! ([`situation`]), ranked against stored baselines in percent ([`similarity`]), and
//! the ranks drive a hysteresis alert state machine ([`prediction`]). [`engine`] wires
//! the steps into one loop; [`simulator`] and [`study`] provide seeded synthetic ground
//! truth.
//!
//! With the default `parallel` feature, registry comparisons and study trials run on
//! the rayon pool; disable it for a purely sequential build.

pub mod engine;
pub mod exec;
pub mod ingest;
pub mod prediction;
pub mod similarity;
pub mod simulator;
pub mod situation;
pub mod study;

pub use engine::{EngineError, EngineEvent, EngineState, TickOutput, WindowConfig};
pub use ingest::{
    format_record, load_baselines, parse_record, save_baseline, IngestError, StreamCursor,
};
pub use prediction::{
    knn_classify, resolve_baseline, step_alert, Alert, AlertCleared, AlertPolicy, AlertState,
    AlertStatus, BaselineSelector, Emission,
};
pub use similarity::{
    channel_similarity, dtw_distance, euclid_distance, extract_features, situation_similarity,
    znormalize, Band, Method, SimilarityConfig, SimilarityReport,
};
pub use simulator::{generate, make_paired_trial, Scenario};
pub use situation::{
    build_situation, snapshot_baseline, validate_situation, Baseline, ChannelSpec, GapPolicy,
    Provenance, Sample, Situation, SituationWindow, SnapshotRequest,
};
