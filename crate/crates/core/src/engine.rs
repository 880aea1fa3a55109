//! The monitoring loop: buffered readings become live windows, each window is ranked
//! against every registered baseline, and the ranks drive the alert state machines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{StreamCursor, DEFAULT_RETENTION, DEFAULT_STRIDE};
use crate::prediction::{
    resolve_baseline, step_alert, Alert, AlertCleared, AlertPolicy, AlertState, AlertStatus,
    Emission, PredictionError,
};
use crate::similarity::{compare_registry, SimilarityConfig, SimilarityError, SimilarityReport};
use crate::situation::{
    validate_specs, Baseline, ChannelSpec, GapPolicy, Sample, SituationError, SnapshotRequest,
    DEFAULT_DURATION, DEFAULT_N_SAMPLES,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Situation(#[from] SituationError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
}

/// Shape of the live windows and the buffer that feeds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub duration: f64,
    pub n_samples: usize,
    pub stride: f64,
    pub retention: f64,
    pub gap_policy: GapPolicy,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            duration: DEFAULT_DURATION,
            n_samples: DEFAULT_N_SAMPLES,
            stride: DEFAULT_STRIDE,
            retention: DEFAULT_RETENTION,
            gap_policy: GapPolicy::Strict,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), SituationError> {
        let bad = |m: String| Err(SituationError::InvalidWindow(m));
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if self.n_samples < 2 {
            return bad(format!("n_samples must be >= 2, got {}", self.n_samples));
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return bad(format!("stride must be > 0, got {}", self.stride));
        }
        if !(self.retention.is_finite() && self.retention >= self.duration) {
            return bad("retention must cover at least one window".into());
        }
        Ok(())
    }
}

/// Everything the loop publishes, in the order it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    Report(SimilarityReport),
    Alert(Alert),
    AlertCleared(AlertCleared),
}

impl From<Emission> for EngineEvent {
    fn from(e: Emission) -> Self {
        match e {
            Emission::Alert(a) => EngineEvent::Alert(a),
            Emission::AlertCleared(c) => EngineEvent::AlertCleared(c),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutput {
    pub windows: usize,
    pub reports: Vec<SimilarityReport>,
    pub emissions: Vec<Emission>,
    pub events: Vec<EngineEvent>,
}

impl TickOutput {
    pub fn is_empty(&self) -> bool {
        self.windows == 0
    }
}

#[derive(Debug, Clone)]
pub struct EngineState {
    specs: Vec<ChannelSpec>,
    window: WindowConfig,
    cursor: StreamCursor,
    registry: Vec<Baseline>,
    policy: AlertPolicy,
    sim_config: SimilarityConfig,
    alert_states: BTreeMap<String, AlertState>,
    latest_reports: BTreeMap<String, SimilarityReport>,
    alert_log: Vec<Alert>,
}

impl EngineState {
    pub fn new(
        specs: Vec<ChannelSpec>,
        window: WindowConfig,
        policy: AlertPolicy,
        sim_config: SimilarityConfig,
    ) -> Result<Self, EngineError> {
        validate_specs(&specs)?;
        window.validate()?;
        policy.validate()?;
        let sim_config = sim_config.with_spec_weights(&specs);
        sim_config.validate()?;
        Ok(Self {
            cursor: StreamCursor::new(window.retention, window.stride),
            specs,
            window,
            registry: vec![],
            policy,
            sim_config,
            alert_states: BTreeMap::new(),
            latest_reports: BTreeMap::new(),
            alert_log: vec![],
        })
    }

    pub fn specs(&self) -> &[ChannelSpec] {
        &self.specs
    }

    pub fn window_config(&self) -> &WindowConfig {
        &self.window
    }

    pub fn cursor(&self) -> &StreamCursor {
        &self.cursor
    }

    pub fn registry(&self) -> &[Baseline] {
        &self.registry
    }

    pub fn baseline(&self, id: &str) -> Option<&Baseline> {
        self.registry.iter().find(|b| b.baseline_id == id)
    }

    pub fn policy(&self) -> &AlertPolicy {
        &self.policy
    }

    pub fn similarity_config(&self) -> &SimilarityConfig {
        &self.sim_config
    }

    pub fn alert_state(&self, baseline_id: &str) -> Option<&AlertState> {
        self.alert_states.get(baseline_id)
    }

    pub fn latest_reports(&self) -> &BTreeMap<String, SimilarityReport> {
        &self.latest_reports
    }

    pub fn alert_log(&self) -> &[Alert] {
        &self.alert_log
    }

    /// Alerts raised at or after `since`.
    pub fn alerts_since(&self, since: f64) -> &[Alert] {
        let idx = self.alert_log.partition_point(|a| a.raised_at < since);
        &self.alert_log[idx..]
    }

    /// Time up to which every configured channel has reported.
    pub fn watermark(&self) -> Option<f64> {
        self.cursor.watermark(&self.specs)
    }

    pub fn push_sample(&mut self, sample: Sample) -> bool {
        self.cursor.push_sample(sample).accepted
    }

    pub fn set_policy(&mut self, policy: AlertPolicy) -> Result<(), EngineError> {
        policy.validate()?;
        self.policy = policy;
        Ok(())
    }

    pub fn set_similarity_config(&mut self, cfg: SimilarityConfig) -> Result<(), EngineError> {
        let cfg = cfg.with_spec_weights(&self.specs);
        cfg.validate()?;
        self.sim_config = cfg;
        Ok(())
    }

    /// Adds a baseline, replacing any with the same id.
    pub fn add_baseline(&mut self, baseline: Baseline) {
        self.alert_states.remove(&baseline.baseline_id);
        self.latest_reports.remove(&baseline.baseline_id);
        match self
            .registry
            .iter_mut()
            .find(|b| b.baseline_id == baseline.baseline_id)
        {
            Some(slot) => *slot = baseline,
            None => self.registry.push(baseline),
        }
    }

    pub fn remove_baseline(&mut self, baseline_id: &str) -> Option<Baseline> {
        let idx = self
            .registry
            .iter()
            .position(|b| b.baseline_id == baseline_id)?;
        self.alert_states.remove(baseline_id);
        self.latest_reports.remove(baseline_id);
        Some(self.registry.remove(idx))
    }

    /// An id derived from the event time that no registered baseline uses yet.
    pub fn fresh_baseline_id(&self, event_time: f64) -> String {
        let stem = format!("bmbs-{event_time}");
        let mut id = stem.clone();
        let mut k = 2;
        while self.baseline(&id).is_some() {
            id = format!("{stem}-{k}");
            k += 1;
        }
        id
    }

    /// Captures a baseline from the live buffer and registers it.
    pub fn snapshot_baseline(&mut self, req: &SnapshotRequest) -> Result<Baseline, EngineError> {
        let id = self.fresh_baseline_id(req.event_time);
        let baseline =
            self.cursor
                .snapshot_baseline(&self.specs, &id, req, self.window.gap_policy)?;
        self.add_baseline(baseline.clone());
        Ok(baseline)
    }

    /// Emits every window that became due, ranks it against the registry and advances
    /// the alert state machines. Per-window failures are logged and skipped.
    pub fn tick(&mut self, now: f64) -> TickOutput {
        let windows = self.cursor.emit_windows(
            now,
            self.window.duration,
            self.window.n_samples,
            &self.specs,
            self.window.gap_policy,
        );
        let mut out = TickOutput {
            windows: windows.len(),
            ..TickOutput::default()
        };
        for situation in windows {
            if self.registry.is_empty() {
                continue;
            }
            let mut reports = BTreeMap::new();
            for (b, result) in self.registry.iter().zip(compare_registry(
                &situation,
                &self.registry,
                &self.sim_config,
            )) {
                match result {
                    Ok(r) => {
                        out.reports.push(r.clone());
                        out.events.push(EngineEvent::Report(r.clone()));
                        reports.insert(b.baseline_id.clone(), r);
                    }
                    Err(e) => log::warn!(
                        "window ending at {} vs `{}`: {e}",
                        situation.window.t_end,
                        b.baseline_id
                    ),
                }
            }
            if reports.is_empty() {
                continue;
            }
            self.latest_reports
                .extend(reports.iter().map(|(k, v)| (k.clone(), v.clone())));
            let resolved = match resolve_baseline(&self.registry, &self.policy, &reports) {
                Ok(id) => id,
                Err(e) => {
                    log::warn!("no baseline to drive alerting: {e}");
                    continue;
                }
            };
            let data_now = situation.window.t_end;
            for b in &self.registry {
                let Some(report) = reports.get(&b.baseline_id) else {
                    continue;
                };
                let state = self.alert_states.entry(b.baseline_id.clone()).or_default();
                // Only the resolved baseline may arm or raise; others can still clear.
                if b.baseline_id != resolved && state.status != AlertStatus::Firing {
                    *state = AlertState::default();
                    continue;
                }
                let (next, emission) = step_alert(state, report, &self.policy, data_now, b);
                *state = next;
                if let Some(emission) = emission {
                    match &emission {
                        Emission::Alert(a) => self.alert_log.push(a.clone()),
                        Emission::AlertCleared(c) => {
                            if let Some(a) = self
                                .alert_log
                                .iter_mut()
                                .rev()
                                .find(|a| a.alert_id == c.alert_id)
                            {
                                a.cleared_at = Some(c.cleared_at);
                            }
                        }
                    }
                    out.events.push(emission.clone().into());
                    out.emissions.push(emission);
                }
            }
        }
        out
    }

    /// Pushes samples one at a time, ticking after each; returns everything emitted.
    pub fn run_stream<I: IntoIterator<Item = Sample>>(&mut self, samples: I) -> Vec<EngineEvent> {
        let mut events = vec![];
        for s in samples {
            if self.push_sample(s) {
                events.extend(self.tick(f64::INFINITY).events);
            }
        }
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ChannelSpec> {
        vec![ChannelSpec::new("hr")]
    }

    fn ramp(t: f64) -> f64 {
        (t / 37.0).sin() + t / 500.0
    }

    fn engine() -> EngineState {
        EngineState::new(
            specs(),
            WindowConfig::default(),
            AlertPolicy::default(),
            SimilarityConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn no_window_no_reports() {
        let mut e = engine();
        for t in 0..500 {
            e.push_sample(Sample::new(t as f64, "hr", ramp(t as f64)));
        }
        let out = e.tick(f64::INFINITY);
        assert!(out.is_empty() && out.reports.is_empty() && out.events.is_empty());
        assert!(e.alert_log().is_empty());
    }

    #[test]
    fn replayed_window_matches_its_own_snapshot() {
        let mut e = engine();
        for t in 0..=2000 {
            e.push_sample(Sample::new(t as f64, "hr", ramp(t as f64)));
        }
        e.tick(1500.0);
        let req = SnapshotRequest {
            event_time: 1500.0,
            lead_time: 0.0,
            ..SnapshotRequest::new(1500.0, "pain")
        };
        let b = e.snapshot_baseline(&req).unwrap();
        assert_eq!(b.baseline_id, "bmbs-1500");
        // Replaying the same readings reproduces the captured window exactly.
        let mut fresh = engine();
        fresh.add_baseline(b.clone());
        let mut reports = vec![];
        for t in 0..=2000 {
            fresh.push_sample(Sample::new(t as f64, "hr", ramp(t as f64)));
            reports.extend(fresh.tick(f64::INFINITY).reports);
        }
        let at_event = reports
            .iter()
            .find(|r| r.bmsi_window.t_end == 1500.0)
            .unwrap();
        assert!((at_event.aggregate_percent - 100.0).abs() < 1e-9);
        assert!(fresh
            .alert_log()
            .iter()
            .all(|a| a.predicted_event_time >= a.raised_at));
    }

    #[test]
    fn snapshot_ids_are_unique() {
        let mut e = engine();
        for t in 0..=1000 {
            e.push_sample(Sample::new(t as f64, "hr", ramp(t as f64)));
        }
        let req = SnapshotRequest {
            lead_time: 0.0,
            ..SnapshotRequest::new(1000.0, "pain")
        };
        let a = e.snapshot_baseline(&req).unwrap();
        let b = e.snapshot_baseline(&req).unwrap();
        assert_ne!(a.baseline_id, b.baseline_id);
        assert_eq!(e.registry().len(), 2);
        assert!(e.remove_baseline(&a.baseline_id).is_some());
        assert!(e.remove_baseline(&a.baseline_id).is_none());
    }

    #[test]
    fn snapshot_without_history() {
        let mut e = engine();
        for t in 0..100 {
            e.push_sample(Sample::new(t as f64, "hr", 0.0));
        }
        let err = e
            .snapshot_baseline(&SnapshotRequest::new(99.0, "pain"))
            .unwrap_err();
        assert!(matches!(
            err,
            EngineError::Situation(SituationError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn rejects_bad_configuration() {
        let bad = AlertPolicy {
            theta_off: 90.0,
            ..AlertPolicy::default()
        };
        assert!(EngineState::new(
            specs(),
            WindowConfig::default(),
            bad,
            SimilarityConfig::default()
        )
        .is_err());
        let window = WindowConfig {
            retention: 10.0,
            ..WindowConfig::default()
        };
        assert!(EngineState::new(
            specs(),
            window,
            AlertPolicy::default(),
            SimilarityConfig::default()
        )
        .is_err());
    }
}
