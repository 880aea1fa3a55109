//! Seeded detection study on paired synthetic trials.
//!
//! Each trial generates a baseline stream and an independent live stream of the same
//! scenario, captures a baseline from the first, runs the monitoring loop over the
//! second and scores the alerts against the known signature windows.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, EngineState, WindowConfig};
use crate::exec;
use crate::prediction::{Alert, AlertPolicy};
use crate::similarity::SimilarityConfig;
use crate::simulator::{make_paired_trial, EventMarker, InvalidScenario, Scenario};
use crate::situation::{snapshot_baseline, SnapshotRequest};

/// Gap between the captured baseline window and the event. The default scenario's
/// signature spans the last 300 s before the event, so a 120 s gap leaves three
/// minutes of ramp inside the baseline window.
pub const DEFAULT_SNAPSHOT_LEAD: f64 = 120.0;

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Scenario(#[from] InvalidScenario),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub trials: u64,
    /// Lead time used when capturing the baseline before the scenario's first event.
    pub snapshot_lead: f64,
    pub window: WindowConfig,
    pub policy: AlertPolicy,
    pub similarity: SimilarityConfig,
}

impl Default for StudyParams {
    fn default() -> Self {
        Self {
            trials: 50,
            snapshot_lead: DEFAULT_SNAPSHOT_LEAD,
            window: WindowConfig::default(),
            policy: AlertPolicy::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub windows: usize,
    pub alerts: Vec<Alert>,
    /// Raise time of the first alert inside a signature window.
    pub detected_at: Option<f64>,
    pub false_alerts: usize,
    /// Highest rank seen inside and outside the signature windows.
    pub peak_in_signature: f64,
    pub peak_outside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub trials: Vec<TrialOutcome>,
    pub detection_rate: f64,
    pub max_false_alerts: usize,
    pub mean_false_alerts: f64,
}

fn in_signature(t: f64, events: &[EventMarker]) -> bool {
    events
        .iter()
        .any(|e| t >= e.signature_start && t <= e.event_time)
}

pub fn run_trial(
    scenario: &Scenario,
    trial: u64,
    params: &StudyParams,
) -> Result<TrialOutcome, StudyError> {
    let pair = make_paired_trial(scenario, trial)?;
    let event = pair.baseline.events[0];
    let specs = scenario.channel_specs();
    let req = SnapshotRequest {
        event_time: event.event_time,
        lead_time: params.snapshot_lead,
        duration: params.window.duration,
        n_samples: params.window.n_samples,
        label: "pain-precursor".into(),
    };
    let baseline = snapshot_baseline(
        &pair.baseline.samples,
        &specs,
        &format!("trial-{trial}"),
        &req,
        params.window.gap_policy,
    )
    .map_err(EngineError::from)?;

    let mut engine = EngineState::new(
        specs,
        params.window.clone(),
        params.policy.clone(),
        params.similarity.clone(),
    )?;
    engine.add_baseline(baseline);

    let mut windows = 0;
    let mut peak_in = 0.0_f64;
    let mut peak_out = 0.0_f64;
    for sample in pair.live.samples {
        if !engine.push_sample(sample) {
            continue;
        }
        let out = engine.tick(f64::INFINITY);
        windows += out.windows;
        for r in &out.reports {
            if in_signature(r.bmsi_window.t_end, &pair.live.events) {
                peak_in = peak_in.max(r.aggregate_percent);
            } else {
                peak_out = peak_out.max(r.aggregate_percent);
            }
        }
    }
    let alerts = engine.alert_log().to_vec();
    let detected_at = alerts
        .iter()
        .map(|a| a.raised_at)
        .find(|t| in_signature(*t, &pair.live.events));
    let false_alerts = alerts
        .iter()
        .filter(|a| !in_signature(a.raised_at, &pair.live.events))
        .count();
    Ok(TrialOutcome {
        trial,
        windows,
        alerts,
        detected_at,
        false_alerts,
        peak_in_signature: peak_in,
        peak_outside: peak_out,
    })
}

/// Runs trials `0..params.trials`, in parallel when the `parallel` feature is enabled.
pub fn run_study(scenario: &Scenario, params: &StudyParams) -> Result<StudySummary, StudyError> {
    let trials: Vec<TrialOutcome> = exec::map_range(0..params.trials as usize, |i| {
        run_trial(scenario, i as u64, params)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let n = trials.len().max(1) as f64;
    let detected = trials.iter().filter(|t| t.detected_at.is_some()).count();
    Ok(StudySummary {
        detection_rate: detected as f64 / n,
        max_false_alerts: trials.iter().map(|t| t.false_alerts).max().unwrap_or(0),
        mean_false_alerts: trials.iter().map(|t| t.false_alerts).sum::<usize>() as f64 / n,
        trials,
    })
}
