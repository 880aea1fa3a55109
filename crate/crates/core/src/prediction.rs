//! Nearest-neighbour labelling of situations and the hysteresis alert state machine.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{compare_registry, SimilarityConfig, SimilarityError, SimilarityReport};
use crate::situation::{Baseline, Situation};

pub const DEFAULT_THETA_ON: f64 = 85.0;
pub const DEFAULT_THETA_OFF: f64 = 70.0;
pub const DEFAULT_MIN_CONSECUTIVE: u32 = 2;
pub const DEFAULT_K: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("baseline registry is empty")]
    EmptyRegistry,
    #[error("k = {k} exceeds the registry size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("unknown baseline `{0}`")]
    UnknownBaseline(String),
    #[error("no similarity reports to choose from")]
    NoReports,
    #[error("invalid `{field}`: {reason}")]
    InvalidPolicy { field: &'static str, reason: String },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

pub type Result<T, E = PredictionError> = std::result::Result<T, E>;

/// Which baseline drives the alert state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaselineSelector {
    /// The baseline with the highest rank in the current window.
    BestMatch,
    Fixed(String),
}

impl Serialize for BaselineSelector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            BaselineSelector::BestMatch => serializer.serialize_str("best-match"),
            BaselineSelector::Fixed(id) => serializer.serialize_str(id),
        }
    }
}

impl<'de> Deserialize<'de> for BaselineSelector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == "best-match" {
            BaselineSelector::BestMatch
        } else {
            BaselineSelector::Fixed(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertPolicy {
    pub theta_on: f64,
    pub theta_off: f64,
    pub min_consecutive: u32,
    pub baseline_id: BaselineSelector,
}

impl Default for AlertPolicy {
    fn default() -> Self {
        Self {
            theta_on: DEFAULT_THETA_ON,
            theta_off: DEFAULT_THETA_OFF,
            min_consecutive: DEFAULT_MIN_CONSECUTIVE,
            baseline_id: BaselineSelector::BestMatch,
        }
    }
}

impl AlertPolicy {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field, reason: String| Err(PredictionError::InvalidPolicy { field, reason });
        if !(self.theta_on > 0.0 && self.theta_on <= 100.0) {
            return invalid(
                "theta_on",
                format!("must lie in (0, 100], got {}", self.theta_on),
            );
        }
        if !(self.theta_off >= 0.0 && self.theta_off < 100.0) {
            return invalid(
                "theta_off",
                format!("must lie in [0, 100), got {}", self.theta_off),
            );
        }
        if self.theta_off >= self.theta_on {
            return invalid(
                "theta_off",
                format!(
                    "must be below theta_on ({} >= {})",
                    self.theta_off, self.theta_on
                ),
            );
        }
        if self.min_consecutive == 0 {
            return invalid("min_consecutive", "must be >= 1".into());
        }
        if let BaselineSelector::Fixed(id) = &self.baseline_id {
            if id.is_empty() {
                return invalid("baseline_id", "must not be empty".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub raised_at: f64,
    pub baseline_id: String,
    pub rank_percent: f64,
    /// Live window end plus the baseline's lead time.
    pub predicted_event_time: f64,
    pub cleared_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertCleared {
    pub alert_id: String,
    pub baseline_id: String,
    pub cleared_at: f64,
    pub rank_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Emission {
    Alert(Alert),
    AlertCleared(AlertCleared),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertStatus {
    #[default]
    Idle,
    /// Some qualifying windows seen, not yet enough to fire.
    Armed,
    Firing,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlertState {
    pub status: AlertStatus,
    pub consecutive_hits: u32,
    pub active_alert: Option<Alert>,
}

/// One transition of the alert state machine.
///
/// `now` is the data time of the evaluated window. Ranks at or above `theta_on` count
/// as hits; `min_consecutive` hits in a row raise an alert. A firing alert clears only
/// once the rank drops below `theta_off`.
pub fn step_alert(
    state: &AlertState,
    report: &SimilarityReport,
    policy: &AlertPolicy,
    now: f64,
    baseline: &Baseline,
) -> (AlertState, Option<Emission>) {
    let rank = report.aggregate_percent;
    let hit = rank >= policy.theta_on;
    let need = policy.min_consecutive.max(1);

    if state.status == AlertStatus::Firing {
        if rank < policy.theta_off {
            let cleared = state.active_alert.as_ref().map(|a| AlertCleared {
                alert_id: a.alert_id.clone(),
                baseline_id: a.baseline_id.clone(),
                cleared_at: now,
                rank_percent: rank,
            });
            return (AlertState::default(), cleared.map(Emission::AlertCleared));
        }
        let hits = if hit {
            (state.consecutive_hits + 1).min(need)
        } else {
            state.consecutive_hits
        };
        let next = AlertState {
            consecutive_hits: hits,
            ..state.clone()
        };
        return (next, None);
    }

    if !hit {
        return (AlertState::default(), None);
    }
    let hits = (state.consecutive_hits + 1).min(need);
    if hits < need {
        let next = AlertState {
            status: AlertStatus::Armed,
            consecutive_hits: hits,
            active_alert: None,
        };
        return (next, None);
    }
    let alert = Alert {
        alert_id: format!("{}@{}", baseline.baseline_id, now),
        raised_at: now,
        baseline_id: baseline.baseline_id.clone(),
        rank_percent: rank,
        predicted_event_time: report.bmsi_window.t_end + baseline.lead_time,
        cleared_at: None,
    };
    let next = AlertState {
        status: AlertStatus::Firing,
        consecutive_hits: hits,
        active_alert: Some(alert.clone()),
    };
    (next, Some(Emission::Alert(alert)))
}

/// Picks the baseline that drives alerting for the current window.
pub fn resolve_baseline(
    registry: &[Baseline],
    policy: &AlertPolicy,
    reports: &BTreeMap<String, SimilarityReport>,
) -> Result<String> {
    match &policy.baseline_id {
        BaselineSelector::Fixed(id) => {
            if registry.iter().any(|b| &b.baseline_id == id) {
                Ok(id.clone())
            } else {
                Err(PredictionError::UnknownBaseline(id.clone()))
            }
        }
        BaselineSelector::BestMatch => {
            // BTreeMap iterates ids in order, so a strict `>` keeps the smallest id on ties.
            let mut best: Option<(&String, f64)> = None;
            for (id, report) in reports {
                if !registry.iter().any(|b| &b.baseline_id == id) {
                    continue;
                }
                let p = report.aggregate_percent;
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((id, p));
                }
            }
            best.map(|(id, _)| id.clone())
                .ok_or(PredictionError::NoReports)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub baseline_id: String,
    pub label: String,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    /// Share of the top-k neighbours voting for `label`.
    pub confidence: f64,
    /// Every baseline, best first.
    pub neighbors: Vec<Neighbor>,
}

/// Ranks neighbours by aggregate percent (descending, then id ascending).
pub fn rank_neighbors(mut neighbors: Vec<Neighbor>) -> Vec<Neighbor> {
    neighbors.sort_by(|a, b| {
        b.percent
            .partial_cmp(&a.percent)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.baseline_id.cmp(&b.baseline_id))
    });
    neighbors
}

/// Majority vote among the `k` most similar baselines. Label ties go to the higher
/// summed percent, then to the lexicographically smaller label.
pub fn knn_classify(
    query: &Situation,
    registry: &[Baseline],
    k: usize,
    cfg: &SimilarityConfig,
) -> Result<Classification> {
    if registry.is_empty() {
        return Err(PredictionError::EmptyRegistry);
    }
    if k == 0 {
        return Err(PredictionError::ZeroK);
    }
    if k > registry.len() {
        return Err(PredictionError::KTooLarge {
            k,
            size: registry.len(),
        });
    }
    let mut neighbors = Vec::with_capacity(registry.len());
    for (b, report) in registry.iter().zip(compare_registry(query, registry, cfg)) {
        neighbors.push(Neighbor {
            baseline_id: b.baseline_id.clone(),
            label: b.label.clone(),
            percent: report?.aggregate_percent,
        });
    }
    let neighbors = rank_neighbors(neighbors);

    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for n in &neighbors[..k] {
        let entry = votes.entry(n.label.as_str()).or_default();
        entry.0 += 1;
        entry.1 += n.percent;
    }
    let (label, (count, _)) = votes
        .into_iter()
        .max_by(|(la, (ca, sa)), (lb, (cb, sb))| {
            ca.cmp(cb)
                .then(sa.partial_cmp(sb).unwrap_or(Ordering::Equal))
                .then_with(|| lb.cmp(la))
        })
        .expect("k >= 1 neighbours");
    let label = label.to_string();
    Ok(Classification {
        confidence: count as f64 / k as f64,
        label,
        neighbors,
    })
}

impl fmt::Display for AlertStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertStatus::Idle => "idle",
            AlertStatus::Armed => "armed",
            AlertStatus::Firing => "firing",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::Method;
    use crate::situation::{build_situation, ChannelSpec, GapPolicy, Sample, SituationWindow};

    fn tiny_baseline(id: &str, lead: f64) -> Baseline {
        let specs = vec![ChannelSpec::new("hr")];
        let samples = vec![Sample::new(0.0, "hr", 1.0), Sample::new(10.0, "hr", 2.0)];
        let w = SituationWindow::new(0.0, 10.0, 3).unwrap();
        let s = build_situation(&samples, &specs, &w, GapPolicy::Strict).unwrap();
        Baseline::new(id, "pain", s, lead, 0.0).unwrap()
    }

    fn report(id: &str, rank: f64, t_end: f64) -> SimilarityReport {
        SimilarityReport {
            baseline_id: id.into(),
            bmsi_window: SituationWindow::new(t_end - 900.0, t_end, 90).unwrap(),
            per_channel: BTreeMap::new(),
            aggregate_percent: rank,
            method: Method::Dtw,
            computed_at: t_end,
            skipped_channels: vec![],
        }
    }

    fn run(ranks: &[f64], policy: &AlertPolicy) -> Vec<(usize, Emission)> {
        let b = tiny_baseline("b1", 300.0);
        let mut state = AlertState::default();
        let mut out = vec![];
        for (i, &r) in ranks.iter().enumerate() {
            let t = 1000.0 + 60.0 * i as f64;
            let (next, e) = step_alert(&state, &report("b1", r, t), policy, t, &b);
            state = next;
            if let Some(e) = e {
                out.push((i + 1, e));
            }
        }
        out
    }

    #[test]
    fn raise_then_clear() {
        let policy = AlertPolicy {
            theta_on: 78.0,
            theta_off: 65.0,
            min_consecutive: 1,
            ..AlertPolicy::default()
        };
        let out = run(&[50.0, 80.0, 75.0, 60.0], &policy);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, 2);
        let Emission::Alert(a) = &out[0].1 else {
            panic!("expected alert")
        };
        assert_eq!(a.raised_at, 1060.0);
        assert_eq!(a.predicted_event_time, 1060.0 + 300.0);
        assert_eq!(a.rank_percent, 80.0);
        assert_eq!(out[1].0, 4);
        assert!(matches!(out[1].1, Emission::AlertCleared(_)));
    }

    #[test]
    fn below_threshold_stays_idle() {
        let policy = AlertPolicy::default();
        let b = tiny_baseline("b1", 0.0);
        let mut state = AlertState::default();
        for r in [10.0, 84.9, 50.0, 0.0] {
            let (next, e) = step_alert(&state, &report("b1", r, 900.0), &policy, 900.0, &b);
            assert!(e.is_none());
            assert_eq!(next.status, AlertStatus::Idle);
            state = next;
        }
    }

    #[test]
    fn lone_hit_is_reset() {
        let policy = AlertPolicy {
            theta_on: 78.0,
            theta_off: 65.0,
            min_consecutive: 2,
            ..AlertPolicy::default()
        };
        let out = run(&[80.0, 60.0, 80.0, 80.0], &policy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 4);
        // Ranks in the hysteresis band while idle also reset the count.
        let out = run(&[80.0, 70.0, 80.0, 70.0], &policy);
        assert!(out.is_empty());
    }

    #[test]
    fn hysteresis_band_keeps_firing() {
        let policy = AlertPolicy {
            min_consecutive: 1,
            ..AlertPolicy::default()
        };
        let out = run(&[90.0, 71.0, 84.0, 70.0, 99.0, 69.9], &policy);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].0, 6);
    }

    #[test]
    fn policy_validation_names_field() {
        let p = AlertPolicy {
            theta_on: 70.0,
            theta_off: 70.0,
            ..AlertPolicy::default()
        };
        assert!(matches!(
            p.validate(),
            Err(PredictionError::InvalidPolicy {
                field: "theta_off",
                ..
            })
        ));
        let p = AlertPolicy {
            theta_on: 0.0,
            theta_off: 0.0,
            ..AlertPolicy::default()
        };
        assert!(matches!(
            p.validate(),
            Err(PredictionError::InvalidPolicy {
                field: "theta_on",
                ..
            })
        ));
        assert!(AlertPolicy::default().validate().is_ok());
    }

    #[test]
    fn selector_serde() {
        let p: AlertPolicy = serde_json::from_str(r#"{"baseline_id":"b7"}"#).unwrap();
        assert_eq!(p.baseline_id, BaselineSelector::Fixed("b7".into()));
        assert_eq!(p.theta_on, DEFAULT_THETA_ON);
        let p: AlertPolicy = serde_json::from_str(r#"{"baseline_id":"best-match"}"#).unwrap();
        assert_eq!(p.baseline_id, BaselineSelector::BestMatch);
        assert_eq!(
            serde_json::to_value(&p).unwrap()["baseline_id"],
            "best-match"
        );
    }

    #[test]
    fn resolve_examples() {
        let registry = vec![
            tiny_baseline("a", 0.0),
            tiny_baseline("b", 0.0),
            tiny_baseline("b1", 0.0),
            tiny_baseline("b2", 0.0),
        ];
        let fixed = AlertPolicy {
            baseline_id: BaselineSelector::Fixed("b1".into()),
            ..AlertPolicy::default()
        };
        assert_eq!(
            resolve_baseline(&registry, &fixed, &BTreeMap::new()).unwrap(),
            "b1"
        );
        let missing = AlertPolicy {
            baseline_id: BaselineSelector::Fixed("zz".into()),
            ..AlertPolicy::default()
        };
        assert_eq!(
            resolve_baseline(&registry, &missing, &BTreeMap::new()),
            Err(PredictionError::UnknownBaseline("zz".into()))
        );

        let best = AlertPolicy::default();
        let reports: BTreeMap<_, _> = [("b1", 40.0), ("b2", 90.0)]
            .iter()
            .map(|(id, p)| (id.to_string(), report(id, *p, 900.0)))
            .collect();
        assert_eq!(resolve_baseline(&registry, &best, &reports).unwrap(), "b2");
        let tie: BTreeMap<_, _> = [("b", 70.0), ("a", 70.0)]
            .iter()
            .map(|(id, p)| (id.to_string(), report(id, *p, 900.0)))
            .collect();
        assert_eq!(resolve_baseline(&registry, &best, &tie).unwrap(), "a");
    }

    #[test]
    fn knn_self_match_and_errors() {
        let a = tiny_baseline("A", 0.0);
        let cfg = SimilarityConfig::default();
        let c = knn_classify(&a.situation, std::slice::from_ref(&a), 1, &cfg).unwrap();
        assert_eq!(c.label, "pain");
        assert_eq!(c.confidence, 1.0);
        assert_eq!(
            knn_classify(&a.situation, &[], 1, &cfg),
            Err(PredictionError::EmptyRegistry)
        );
        assert!(matches!(
            knn_classify(&a.situation, std::slice::from_ref(&a), 2, &cfg),
            Err(PredictionError::KTooLarge { k: 2, size: 1 })
        ));
    }

    #[test]
    fn majority_vote() {
        let n = |id: &str, label: &str, p: f64| Neighbor {
            baseline_id: id.into(),
            label: label.into(),
            percent: p,
        };
        let ranked = rank_neighbors(vec![
            n("c", "normal", 80.0),
            n("a", "p", 90.0),
            n("b", "p", 80.0),
        ]);
        assert_eq!(
            ranked
                .iter()
                .map(|x| x.baseline_id.as_str())
                .collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
    }
}
