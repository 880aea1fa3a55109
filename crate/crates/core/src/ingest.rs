//! Line-protocol parsing, the per-channel ring buffer that assembles live situations,
//! and the on-disk baseline store.
//!
//! Wire format: one reading per line, `<timestamp>,<channel_id>,<value>`. Lines starting
//! with `#` and blank lines are ignored.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::situation::{
    build_from_points, check_span, validate_situation, Baseline, ChannelSpec, GapPolicy,
    Provenance, Sample, Situation, SituationError, SituationWindow, SnapshotRequest,
};

pub const DEFAULT_RETENTION: f64 = 7200.0;
pub const DEFAULT_STRIDE: f64 = 60.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed line: {0:?}")]
    MalformedLine(String),
    #[error("non-finite value in line: {0:?}")]
    NonFiniteValue(String),
    #[error("bad timestamp in line: {0:?}")]
    BadTimestamp(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema violation at `{0}`")]
    SchemaViolation(String),
    #[error("invalid baseline id `{0}` (use letters, digits, `-`, `_` or `.`)")]
    InvalidId(String),
    #[error(transparent)]
    Situation(#[from] SituationError),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

fn valid_channel_token(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('#')
        && !id
            .chars()
            .any(|c| c == ',' || c.is_whitespace() || c.is_control())
}

/// Parses one wire line. Comments and blank lines yield `Ok(None)`.
pub fn parse_record(line: &str) -> Result<Option<Sample>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
    let [ts, channel, value] = fields[..] else {
        return Err(IngestError::MalformedLine(line.to_string()));
    };
    if !valid_channel_token(channel) {
        return Err(IngestError::MalformedLine(line.to_string()));
    }
    let timestamp: f64 = ts
        .parse()
        .map_err(|_| IngestError::MalformedLine(line.to_string()))?;
    let value: f64 = value
        .parse()
        .map_err(|_| IngestError::MalformedLine(line.to_string()))?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(IngestError::BadTimestamp(line.to_string()));
    }
    if !value.is_finite() {
        return Err(IngestError::NonFiniteValue(line.to_string()));
    }
    Ok(Some(Sample {
        timestamp,
        channel_id: channel.to_string(),
        value,
    }))
}

/// Formats a sample as a wire line (no trailing newline). Floats use the shortest
/// representation that parses back to the same bits.
pub fn format_record(sample: &Sample) -> String {
    format!(
        "{},{},{}",
        sample.timestamp, sample.channel_id, sample.value
    )
}

/// Reads a replay stream. Malformed lines are logged and skipped; the second element
/// counts them.
pub fn read_records<R: BufRead>(reader: R) -> io::Result<(Vec<Sample>, usize)> {
    let mut samples = Vec::new();
    let mut rejected = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        match parse_record(&line) {
            Ok(Some(s)) => samples.push(s),
            Ok(None) => {}
            Err(e) => {
                log::warn!("line {}: {e}", lineno + 1);
                rejected += 1;
            }
        }
    }
    Ok((samples, rejected))
}

pub fn read_replay_file(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|source| IngestError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    read_records(io::BufReader::new(file))
        .map(|(samples, _)| samples)
        .map_err(|source| IngestError::IoFailure {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PushOutcome {
    pub accepted: bool,
    pub evicted: usize,
}

#[derive(Debug, Clone, Default)]
struct ChannelBuffer {
    points: VecDeque<(f64, f64)>,
    watermark: f64,
}

/// Per-channel time-ordered buffers with bounded retention, plus the bookkeeping for
/// stride-aligned window emission.
///
/// A single owner pushes samples and emits windows.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    buffers: BTreeMap<String, ChannelBuffer>,
    retention: f64,
    stride: f64,
    max_watermark: f64,
    origin: Option<f64>,
    last_emitted_end: Option<f64>,
    provenance: Provenance,
}

impl Default for StreamCursor {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION, DEFAULT_STRIDE)
    }
}

impl StreamCursor {
    pub fn new(retention: f64, stride: f64) -> Self {
        assert!(
            retention > 0.0 && stride > 0.0,
            "retention and stride must be positive"
        );
        Self {
            buffers: BTreeMap::new(),
            retention,
            stride,
            max_watermark: f64::NEG_INFINITY,
            origin: None,
            last_emitted_end: None,
            provenance: Provenance::Live,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn retention(&self) -> f64 {
        self.retention
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    /// Latest accepted timestamp on any channel.
    pub fn max_watermark(&self) -> Option<f64> {
        self.max_watermark.is_finite().then_some(self.max_watermark)
    }

    pub fn channel_watermark(&self, channel: &str) -> Option<f64> {
        self.buffers.get(channel).map(|b| b.watermark)
    }

    /// The time up to which every channel in `specs` has reported. Windows ending at or
    /// before it are complete.
    pub fn watermark(&self, specs: &[ChannelSpec]) -> Option<f64> {
        let mut wm = f64::INFINITY;
        for spec in specs {
            wm = wm.min(self.buffers.get(&spec.channel_id)?.watermark);
        }
        wm.is_finite().then_some(wm)
    }

    pub fn last_emitted_end(&self) -> Option<f64> {
        self.last_emitted_end
    }

    pub fn len(&self, channel: &str) -> usize {
        self.buffers.get(channel).map_or(0, |b| b.points.len())
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.values().all(|b| b.points.is_empty())
    }

    /// Retained readings of one channel, oldest first.
    pub fn readings(&self, channel: &str) -> Vec<(f64, f64)> {
        self.buffers
            .get(channel)
            .map(|b| b.points.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Earliest and latest retained timestamps over all channels.
    pub fn span(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for b in self.buffers.values() {
            if let (Some(first), Some(last)) = (b.points.front(), b.points.back()) {
                lo = lo.min(first.0);
                hi = hi.max(last.0);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Inserts a reading in timestamp order. Readings older than the retention horizon
    /// are rejected; a reading with the timestamp of an existing one replaces it.
    pub fn push_sample(&mut self, sample: Sample) -> PushOutcome {
        if !sample.is_valid() {
            return PushOutcome {
                accepted: false,
                evicted: 0,
            };
        }
        let t = sample.timestamp;
        if self.max_watermark.is_finite() && t < self.max_watermark - self.retention {
            return PushOutcome {
                accepted: false,
                evicted: 0,
            };
        }
        let buffer = self
            .buffers
            .entry(sample.channel_id)
            .or_insert_with(|| ChannelBuffer {
                points: VecDeque::new(),
                watermark: f64::NEG_INFINITY,
            });
        match buffer.points.back() {
            Some(&(last, _)) if last < t => buffer.points.push_back((t, sample.value)),
            None => buffer.points.push_back((t, sample.value)),
            Some(_) => {
                let idx = buffer.points.partition_point(|p| p.0 < t);
                match buffer.points.get_mut(idx) {
                    Some(p) if p.0 == t => p.1 = sample.value,
                    _ => buffer.points.insert(idx, (t, sample.value)),
                }
            }
        }
        buffer.watermark = buffer.watermark.max(t);
        self.max_watermark = self.max_watermark.max(t);
        self.origin = Some(self.origin.map_or(t, |o| o.min(t)));

        let horizon = self.max_watermark - self.retention;
        let mut evicted = 0;
        for b in self.buffers.values_mut() {
            while b.points.front().is_some_and(|p| p.0 < horizon) {
                b.points.pop_front();
                evicted += 1;
            }
        }
        PushOutcome {
            accepted: true,
            evicted,
        }
    }

    /// Builds a situation over `window` from the retained readings.
    pub fn build(
        &mut self,
        specs: &[ChannelSpec],
        window: &SituationWindow,
        gap_policy: GapPolicy,
    ) -> Result<Situation, SituationError> {
        for spec in specs {
            if let Some(b) = self.buffers.get_mut(&spec.channel_id) {
                b.points.make_contiguous();
            }
        }
        let buffers = &self.buffers;
        build_from_points(specs, window, gap_policy, self.provenance, |id| {
            buffers
                .get(id)
                .map(|b| {
                    let (points, _) = b.points.as_slices();
                    let lo = points.partition_point(|p| p.0 < window.t_start);
                    let hi = points.partition_point(|p| p.0 <= window.t_end);
                    &points[lo..hi]
                })
                .unwrap_or(&[])
        })
    }

    /// Snapshots a baseline from retained history.
    pub fn snapshot_baseline(
        &mut self,
        specs: &[ChannelSpec],
        baseline_id: &str,
        req: &SnapshotRequest,
        gap_policy: GapPolicy,
    ) -> Result<Baseline, SituationError> {
        let window = req.window()?;
        let (lo, hi) = self.span().unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
        check_span(&window, lo, hi)?;
        let situation = self.build(specs, &window, gap_policy)?;
        Baseline::new(
            baseline_id,
            &req.label,
            situation,
            req.lead_time,
            req.event_time,
        )
    }

    /// End times of windows due for emission up to `horizon`, in order.
    fn due_ends(&self, horizon: f64, duration: f64) -> Vec<f64> {
        let Some(origin) = self.origin else {
            return vec![];
        };
        let mut k = match self.last_emitted_end {
            Some(last) => (last / self.stride).round() + 1.0,
            None => ((origin + duration) / self.stride).ceil(),
        };
        let mut ends = vec![];
        loop {
            let t_end = k * self.stride;
            if t_end > horizon {
                break;
            }
            ends.push(t_end);
            k += 1.0;
        }
        ends
    }

    /// Emits every not-yet-emitted window `[t_end - duration, t_end]` with `t_end` a
    /// multiple of the stride, `t_end` no later than both `now` and the complete-data
    /// watermark, and the window start no earlier than the first reading ever seen.
    ///
    /// A window that fails to build is logged and skipped.
    pub fn emit_windows(
        &mut self,
        now: f64,
        duration: f64,
        n_samples: usize,
        specs: &[ChannelSpec],
        gap_policy: GapPolicy,
    ) -> Vec<Situation> {
        let Some(watermark) = self.watermark(specs) else {
            return vec![];
        };
        let horizon = watermark.min(now);
        let mut out = vec![];
        for t_end in self.due_ends(horizon, duration) {
            self.last_emitted_end = Some(t_end);
            let built = SituationWindow::ending_at(t_end, duration, n_samples)
                .and_then(|w| self.build(specs, &w, gap_policy));
            match built {
                Ok(s) => out.push(s),
                Err(e) => log::warn!("skipping window ending at {t_end}: {e}"),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Baseline store

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub fn baseline_path(dir: &Path, baseline_id: &str) -> Result<PathBuf> {
    if !valid_id(baseline_id) {
        return Err(IngestError::InvalidId(baseline_id.to_string()));
    }
    Ok(dir.join(format!("{baseline_id}.json")))
}

pub fn baseline_to_json(b: &Baseline) -> Value {
    let s = &b.situation;
    json!({
        "baseline_id": b.baseline_id,
        "label": b.label,
        "event_time": b.event_time,
        "lead_time": b.lead_time,
        "created_at": b.created_at,
        "window": {
            "t_start": s.window.t_start,
            "t_end": s.window.t_end,
            "n_samples": s.window.n_samples,
        },
        "channels": s.channels,
        "coverage": s.coverage,
        "provenance": s.provenance,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| IngestError::SchemaViolation(format!("{path}{name}")))
}

fn num(obj: &Map<String, Value>, name: &str, path: &str) -> Result<f64> {
    field(obj, name, path)?
        .as_f64()
        .ok_or_else(|| IngestError::SchemaViolation(format!("{path}{name}")))
}

fn text(obj: &Map<String, Value>, name: &str) -> Result<String> {
    field(obj, name, "")?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| IngestError::SchemaViolation(name.to_string()))
}

fn float_map(obj: &Map<String, Value>, name: &str) -> Result<BTreeMap<String, Value>> {
    Ok(field(obj, name, "")?
        .as_object()
        .ok_or_else(|| IngestError::SchemaViolation(name.to_string()))?
        .clone()
        .into_iter()
        .collect())
}

/// Parses and validates one stored baseline document.
pub fn baseline_from_json(value: &Value) -> Result<Baseline> {
    let obj = value
        .as_object()
        .ok_or_else(|| IngestError::SchemaViolation("<root>".into()))?;
    let baseline_id = text(obj, "baseline_id")?;
    let label = text(obj, "label")?;
    let event_time = num(obj, "event_time", "")?;
    let lead_time = num(obj, "lead_time", "")?;
    let created_at = num(obj, "created_at", "")?;
    let w = field(obj, "window", "")?
        .as_object()
        .ok_or_else(|| IngestError::SchemaViolation("window".into()))?;
    let n_samples = field(w, "n_samples", "window.")?
        .as_u64()
        .ok_or_else(|| IngestError::SchemaViolation("window.n_samples".into()))?
        as usize;
    let window = SituationWindow::new(
        num(w, "t_start", "window.")?,
        num(w, "t_end", "window.")?,
        n_samples,
    )
    .map_err(|_| IngestError::SchemaViolation("window".into()))?;

    let mut channels = BTreeMap::new();
    for (id, values) in float_map(obj, "channels")? {
        let arr = values
            .as_array()
            .ok_or_else(|| IngestError::SchemaViolation(format!("channels.{id}")))?;
        let v: Option<Vec<f64>> = arr.iter().map(Value::as_f64).collect();
        let v = v.ok_or_else(|| IngestError::SchemaViolation(format!("channels.{id}")))?;
        channels.insert(id, v);
    }
    let mut coverage = BTreeMap::new();
    for (id, c) in float_map(obj, "coverage")? {
        let c = c
            .as_f64()
            .ok_or_else(|| IngestError::SchemaViolation(format!("coverage.{id}")))?;
        coverage.insert(id, c);
    }
    let provenance = match obj.get("provenance") {
        None => Provenance::Live,
        Some(p) => serde_json::from_value(p.clone())
            .map_err(|_| IngestError::SchemaViolation("provenance".into()))?,
    };

    let situation = Situation {
        grid: window.grid(),
        window,
        channels,
        provenance,
        coverage,
    };
    if let Some(v) = validate_situation(&situation).into_iter().next() {
        return Err(IngestError::SchemaViolation(format!("situation ({v})")));
    }
    let baseline = Baseline {
        baseline_id,
        situation,
        event_time,
        lead_time,
        label,
        created_at,
    };
    baseline
        .check()
        .map_err(|e| IngestError::SchemaViolation(e.to_string()))?;
    Ok(baseline)
}

/// Writes `<dir>/<baseline_id>.json`, creating `dir` if needed.
pub fn save_baseline(b: &Baseline, dir: &Path) -> Result<PathBuf> {
    let path = baseline_path(dir, &b.baseline_id)?;
    let io_err = |source| IngestError::IoFailure {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let text = serde_json::to_string_pretty(&baseline_to_json(b)).expect("json values serialize");
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|source| IngestError::IoFailure {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, &path).map_err(io_err)?;
    Ok(path)
}

pub fn remove_baseline(dir: &Path, baseline_id: &str) -> Result<bool> {
    let path = baseline_path(dir, baseline_id)?;
    match fs::remove_file(&path) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(source) => Err(IngestError::IoFailure { path, source }),
    }
}

#[derive(Debug)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub error: IngestError,
}

#[derive(Debug, Default)]
pub struct LoadedBaselines {
    pub baselines: Vec<Baseline>,
    pub warnings: Vec<LoadWarning>,
}

fn load_one(path: &Path) -> Result<Baseline> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| IngestError::SchemaViolation(format!("<json: {e}>")))?;
    baseline_from_json(&value)
}

/// Loads every `*.json` in `dir`, sorted by file name. Unreadable or invalid files are
/// reported as warnings and skipped. A missing directory loads as empty.
pub fn load_baselines(dir: &Path) -> Result<LoadedBaselines> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LoadedBaselines::default()),
        Err(source) => {
            return Err(IngestError::IoFailure {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    let mut out = LoadedBaselines::default();
    for path in paths {
        match load_one(&path) {
            Ok(b) => out.baselines.push(b),
            Err(error) => {
                log::warn!("skipping {}: {error}", path.display());
                out.warnings.push(LoadWarning { path, error });
            }
        }
    }
    Ok(out)
}
