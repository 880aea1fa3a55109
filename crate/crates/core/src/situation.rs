//! Situation data model and resampling of irregular readings onto a uniform grid.
//!
//! A [`Situation`] is an `m x n` matrix: `m` channels, each resampled onto the same
//! `n`-point grid spanning `[t_start, t_end]`. Raw readings are linearly interpolated
//! between the two samples bracketing each grid point; grid points outside the span of
//! the raw readings are clamped to the nearest reading and count against the channel's
//! coverage.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default situation length in seconds (15 minutes).
pub const DEFAULT_DURATION: f64 = 900.0;
/// Default number of grid points per situation (one every 10 s over the default duration).
pub const DEFAULT_N_SAMPLES: usize = 90;
/// Default gap between a baseline window's end and its event.
pub const DEFAULT_LEAD_TIME: f64 = 300.0;

const BASELINE_TIME_TOL: f64 = 1e-6;
const GRID_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SituationError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid channel spec: {0}")]
    InvalidChannelSpec(String),
    #[error("no channel has any sample inside the window")]
    EmptyWindow,
    #[error("channel `{0}` has no sample inside the window")]
    EmptyChannel(String),
    #[error("invalid reading on channel `{channel}` at t={timestamp}: timestamps must be finite and non-negative, values finite")]
    NonFiniteValue { channel: String, timestamp: f64 },
    #[error("sample references unknown channel `{0}`")]
    ChannelMismatch(String),
    #[error(
        "history [{have_start}, {have_end}] does not span the requested window [{need_start}, {need_end}]"
    )]
    InsufficientHistory {
        need_start: f64,
        need_end: f64,
        have_start: f64,
        have_end: f64,
    },
    #[error("invalid baseline: {0}")]
    InvalidBaseline(String),
}

pub type Result<T, E = SituationError> = std::result::Result<T, E>;

/// One timestamped reading of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds since the Unix epoch (UTC).
    pub timestamp: f64,
    pub channel_id: String,
    pub value: f64,
}

impl Sample {
    pub fn new(timestamp: f64, channel_id: impl Into<String>, value: f64) -> Self {
        Self {
            timestamp,
            channel_id: channel_id.into(),
            value,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.timestamp.is_finite() && self.timestamp >= 0.0 && self.value.is_finite()
    }
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub channel_id: String,
    #[serde(default)]
    pub kind: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl ChannelSpec {
    pub fn new(channel_id: impl Into<String>) -> Self {
        Self {
            channel_id: channel_id.into(),
            kind: String::new(),
            unit: String::new(),
            weight: 1.0,
        }
    }

    pub fn with_kind(mut self, kind: impl Into<String>, unit: impl Into<String>) -> Self {
        self.kind = kind.into();
        self.unit = unit.into();
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Checks registry-level invariants: unique ids, non-negative weights, at least one
/// positively weighted channel.
pub fn validate_specs(specs: &[ChannelSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(SituationError::InvalidChannelSpec(
            "registry has no channels".into(),
        ));
    }
    let mut seen = HashSet::new();
    for spec in specs {
        if spec.channel_id.is_empty() {
            return Err(SituationError::InvalidChannelSpec(
                "empty channel_id".into(),
            ));
        }
        if !seen.insert(spec.channel_id.as_str()) {
            return Err(SituationError::InvalidChannelSpec(format!(
                "duplicate channel_id `{}`",
                spec.channel_id
            )));
        }
        if !(spec.weight.is_finite() && spec.weight >= 0.0) {
            return Err(SituationError::InvalidChannelSpec(format!(
                "weight of `{}` must be finite and >= 0",
                spec.channel_id
            )));
        }
    }
    if !specs.iter().any(|s| s.weight > 0.0) {
        return Err(SituationError::InvalidChannelSpec(
            "at least one channel needs a positive weight".into(),
        ));
    }
    Ok(())
}

/// Time span and grid resolution of a situation.
///
/// The interval between grid points is derived, `(t_end - t_start) / (n_samples - 1)`,
/// so it can never disagree with the other fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SituationWindow {
    pub t_start: f64,
    pub t_end: f64,
    pub n_samples: usize,
}

impl SituationWindow {
    pub fn new(t_start: f64, t_end: f64, n_samples: usize) -> Result<Self> {
        let window = Self {
            t_start,
            t_end,
            n_samples,
        };
        window.check()?;
        Ok(window)
    }

    /// Window of `duration` seconds ending at `t_end`.
    pub fn ending_at(t_end: f64, duration: f64, n_samples: usize) -> Result<Self> {
        Self::new(t_end - duration, t_end, n_samples)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.t_start.is_finite() && self.t_end.is_finite()) {
            return Err(SituationError::InvalidWindow(
                "bounds must be finite".into(),
            ));
        }
        if self.t_end <= self.t_start {
            return Err(SituationError::InvalidWindow(format!(
                "t_end {} must exceed t_start {}",
                self.t_end, self.t_start
            )));
        }
        if self.n_samples < 2 {
            return Err(SituationError::InvalidWindow(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if self.interval() <= 0.0 {
            return Err(SituationError::InvalidWindow(
                "window too short to hold n_samples distinct grid points".into(),
            ));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn interval(&self) -> f64 {
        (self.t_end - self.t_start) / (self.n_samples - 1) as f64
    }

    /// The uniform grid. The last point is pinned to `t_end` exactly.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_samples;
        let step = self.interval();
        let mut grid: Vec<f64> = (0..n).map(|i| self.t_start + i as f64 * step).collect();
        grid[n - 1] = self.t_end;
        grid
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t <= self.t_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Live,
    Replay,
    Synthetic,
}

/// What to do with a channel that has no reading inside the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GapPolicy {
    #[default]
    #[serde(rename = "strict")]
    Strict,
    #[serde(rename = "zero-fill")]
    ZeroFill,
}

/// An `m`-channel by `n`-sample matrix over a time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Situation {
    pub window: SituationWindow,
    pub grid: Vec<f64>,
    pub channels: BTreeMap<String, Vec<f64>>,
    pub provenance: Provenance,
    /// Fraction of grid points per channel that lie within the span of real readings.
    pub coverage: BTreeMap<String, f64>,
}

impl Situation {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.window.n_samples
    }

    pub fn channel(&self, id: &str) -> Option<&[f64]> {
        self.channels.get(id).map(Vec::as_slice)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// A situation recorded ahead of a known event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub baseline_id: String,
    pub situation: Situation,
    pub event_time: f64,
    pub lead_time: f64,
    pub label: String,
    pub created_at: f64,
}

impl Baseline {
    /// Wraps a situation whose window ends `lead_time` seconds before `event_time`.
    pub fn new(
        baseline_id: impl Into<String>,
        label: impl Into<String>,
        situation: Situation,
        lead_time: f64,
        created_at: f64,
    ) -> Result<Self> {
        let baseline = Self {
            baseline_id: baseline_id.into(),
            event_time: situation.window.t_end + lead_time,
            situation,
            lead_time,
            label: label.into(),
            created_at,
        };
        baseline.check()?;
        Ok(baseline)
    }

    pub fn check(&self) -> Result<()> {
        if self.baseline_id.is_empty() {
            return Err(SituationError::InvalidBaseline("empty baseline_id".into()));
        }
        if !(self.lead_time.is_finite() && self.lead_time >= 0.0) {
            return Err(SituationError::InvalidBaseline(format!(
                "lead_time must be finite and >= 0, got {}",
                self.lead_time
            )));
        }
        let w = &self.situation.window;
        if (w.t_end + self.lead_time - self.event_time).abs() > BASELINE_TIME_TOL {
            return Err(SituationError::InvalidBaseline(format!(
                "window end {} + lead_time {} != event_time {}",
                w.t_end, self.lead_time, self.event_time
            )));
        }
        if self.event_time <= w.t_start {
            return Err(SituationError::InvalidBaseline(
                "event_time must follow the window start".into(),
            ));
        }
        if let Some(v) = validate_situation(&self.situation).into_iter().next() {
            return Err(SituationError::InvalidBaseline(v.to_string()));
        }
        Ok(())
    }
}

/// Sorted, duplicate-free `(timestamp, value)` readings of one channel.
pub(crate) type Points<'a> = &'a [(f64, f64)];

/// Resamples sorted unique readings onto `grid`. Returns the values and the coverage
/// fraction. `points` must be non-empty.
pub(crate) fn resample(points: Points<'_>, grid: &[f64]) -> (Vec<f64>, f64) {
    debug_assert!(!points.is_empty());
    let (first_t, first_v) = points[0];
    let (last_t, last_v) = points[points.len() - 1];
    let mut covered = 0usize;
    let mut values = Vec::with_capacity(grid.len());
    // Grid is increasing, so the bracketing index only moves forward.
    let mut k = 0usize;
    for &g in grid {
        if g < first_t {
            values.push(first_v);
            continue;
        }
        if g > last_t {
            values.push(last_v);
            continue;
        }
        covered += 1;
        while points[k].0 < g {
            k += 1;
        }
        let (tk, vk) = points[k];
        if tk == g {
            values.push(vk);
        } else {
            let (tp, vp) = points[k - 1];
            values.push(vp + (vk - vp) * (g - tp) / (tk - tp));
        }
    }
    (values, covered as f64 / grid.len() as f64)
}

/// Builds a situation from per-channel readings already restricted to the window,
/// sorted and de-duplicated. Channels are taken in `specs` order.
pub(crate) fn build_from_points<'a, F>(
    specs: &[ChannelSpec],
    window: &SituationWindow,
    gap_policy: GapPolicy,
    provenance: Provenance,
    mut points_of: F,
) -> Result<Situation>
where
    F: FnMut(&str) -> Points<'a>,
{
    window.check()?;
    validate_specs(specs)?;
    let grid = window.grid();
    let mut channels = BTreeMap::new();
    let mut coverage = BTreeMap::new();
    let mut any = false;
    let mut first_empty = None;
    for spec in specs {
        let points = points_of(&spec.channel_id);
        if points.is_empty() {
            first_empty.get_or_insert_with(|| spec.channel_id.clone());
            channels.insert(spec.channel_id.clone(), vec![0.0; grid.len()]);
            coverage.insert(spec.channel_id.clone(), 0.0);
            continue;
        }
        any = true;
        let (values, cov) = resample(points, &grid);
        channels.insert(spec.channel_id.clone(), values);
        coverage.insert(spec.channel_id.clone(), cov);
    }
    if gap_policy == GapPolicy::Strict {
        if !any {
            return Err(SituationError::EmptyWindow);
        }
        if let Some(id) = first_empty {
            return Err(SituationError::EmptyChannel(id));
        }
    }
    Ok(Situation {
        window: *window,
        grid,
        channels,
        provenance,
        coverage,
    })
}

/// Groups raw samples by channel, keeps those inside `window`, and resamples every
/// channel in `specs` onto the window grid.
///
/// Readings sharing a timestamp on the same channel collapse to the one that appears
/// last in `samples`.
pub fn build_situation(
    samples: &[Sample],
    specs: &[ChannelSpec],
    window: &SituationWindow,
    gap_policy: GapPolicy,
) -> Result<Situation> {
    window.check()?;
    validate_specs(specs)?;
    let mut by_channel: BTreeMap<&str, Vec<(f64, f64)>> = specs
        .iter()
        .map(|s| (s.channel_id.as_str(), Vec::new()))
        .collect();
    for s in samples {
        if !s.is_valid() {
            return Err(SituationError::NonFiniteValue {
                channel: s.channel_id.clone(),
                timestamp: s.timestamp,
            });
        }
        match by_channel.get_mut(s.channel_id.as_str()) {
            Some(points) => {
                if window.contains(s.timestamp) {
                    points.push((s.timestamp, s.value));
                }
            }
            None if gap_policy == GapPolicy::Strict => {
                return Err(SituationError::ChannelMismatch(s.channel_id.clone()));
            }
            None => {}
        }
    }
    for points in by_channel.values_mut() {
        sort_dedup_keep_last(points);
    }
    build_from_points(specs, window, gap_policy, Provenance::Live, |id| {
        by_channel.get(id).map(Vec::as_slice).unwrap_or(&[])
    })
}

fn sort_dedup_keep_last(points: &mut Vec<(f64, f64)>) {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &p in points.iter() {
        match out.last_mut() {
            Some(last) if last.0 == p.0 => *last = p,
            _ => out.push(p),
        }
    }
    *points = out;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidWindow(String),
    NoChannels,
    GridLength { expected: usize, actual: usize },
    GridStart,
    GridEnd,
    GridNonUniform(usize),
    LengthMismatch(String),
    NonFinite(String, usize),
    CoverageMissing(String),
    CoverageOutOfRange(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidWindow(why) => write!(f, "invalid window: {why}"),
            Violation::NoChannels => write!(f, "situation has no channels"),
            Violation::GridLength { expected, actual } => {
                write!(f, "grid has {actual} points, expected {expected}")
            }
            Violation::GridStart => write!(f, "grid does not start at t_start"),
            Violation::GridEnd => write!(f, "grid does not end at t_end"),
            Violation::GridNonUniform(i) => write!(f, "grid step {i} deviates from the interval"),
            Violation::LengthMismatch(ch) => write!(f, "channel `{ch}` has the wrong length"),
            Violation::NonFinite(ch, i) => write!(f, "channel `{ch}` is non-finite at {i}"),
            Violation::CoverageMissing(ch) => write!(f, "channel `{ch}` has no coverage entry"),
            Violation::CoverageOutOfRange(ch) => {
                write!(f, "coverage of `{ch}` is outside [0, 1]")
            }
        }
    }
}

/// Lists every violated situation invariant; empty means the situation is well-formed.
pub fn validate_situation(s: &Situation) -> Vec<Violation> {
    let mut out = Vec::new();
    let w = &s.window;
    if let Err(SituationError::InvalidWindow(why)) = w.check() {
        out.push(Violation::InvalidWindow(why));
    }
    if s.channels.is_empty() {
        out.push(Violation::NoChannels);
    }
    let n = w.n_samples;
    if s.grid.len() != n {
        out.push(Violation::GridLength {
            expected: n,
            actual: s.grid.len(),
        });
    } else if n >= 2 {
        if s.grid[0] != w.t_start {
            out.push(Violation::GridStart);
        }
        if s.grid[n - 1] != w.t_end {
            out.push(Violation::GridEnd);
        }
        let interval = w.interval();
        // Absolute slack for the rounding of large (epoch-scale) timestamps.
        let magnitude = w.t_start.abs().max(w.t_end.abs());
        let tol = GRID_REL_TOL * interval.abs() + 4.0 * f64::EPSILON * magnitude;
        for i in 1..n {
            let delta = s.grid[i] - s.grid[i - 1];
            if (delta - interval).abs() > tol || delta.is_nan() {
                out.push(Violation::GridNonUniform(i));
                break;
            }
        }
    }
    for (id, values) in &s.channels {
        if values.len() != n {
            out.push(Violation::LengthMismatch(id.clone()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::NonFinite(id.clone(), i));
        }
        match s.coverage.get(id) {
            None => out.push(Violation::CoverageMissing(id.clone())),
            Some(c) if !(0.0..=1.0).contains(c) => {
                out.push(Violation::CoverageOutOfRange(id.clone()))
            }
            Some(_) => {}
        }
    }
    out
}

/// Parameters of a baseline capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRequest {
    pub event_time: f64,
    pub lead_time: f64,
    pub duration: f64,
    pub n_samples: usize,
    pub label: String,
}

impl SnapshotRequest {
    pub fn new(event_time: f64, label: impl Into<String>) -> Self {
        Self {
            event_time,
            lead_time: DEFAULT_LEAD_TIME,
            duration: DEFAULT_DURATION,
            n_samples: DEFAULT_N_SAMPLES,
            label: label.into(),
        }
    }

    pub fn window(&self) -> Result<SituationWindow> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(SituationError::InvalidWindow(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        if !(self.lead_time.is_finite() && self.lead_time >= 0.0) {
            return Err(SituationError::InvalidBaseline(format!(
                "lead_time must be >= 0, got {}",
                self.lead_time
            )));
        }
        let t_end = self.event_time - self.lead_time;
        SituationWindow::new(t_end - self.duration, t_end, self.n_samples)
    }
}

pub(crate) fn check_span(window: &SituationWindow, have_start: f64, have_end: f64) -> Result<()> {
    if have_start <= window.t_start && have_end >= window.t_end {
        Ok(())
    } else {
        Err(SituationError::InsufficientHistory {
            need_start: window.t_start,
            need_end: window.t_end,
            have_start,
            have_end,
        })
    }
}

/// Captures the window that preceded `req.event_time` by `req.lead_time` as a baseline.
///
/// `history` must span the whole window. `created_at` is set to the event time so that
/// captures from replayed data are reproducible.
pub fn snapshot_baseline(
    history: &[Sample],
    specs: &[ChannelSpec],
    baseline_id: &str,
    req: &SnapshotRequest,
    gap_policy: GapPolicy,
) -> Result<Baseline> {
    let window = req.window()?;
    let (lo, hi) = history
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.timestamp), hi.max(s.timestamp))
        });
    check_span(&window, lo, hi)?;
    let situation = build_situation(history, specs, &window, gap_policy)?;
    Baseline::new(
        baseline_id,
        &req.label,
        situation,
        req.lead_time,
        req.event_time,
    )
}
