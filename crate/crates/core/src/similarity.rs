//! Distance kernels and the percent similarity rank between situations.
//!
//! Every channel is compared on its own (Euclidean RMS, banded DTW, or a summary
//! feature vector) and the per-channel distance `d` is mapped to a rank
//! `100 * exp(-d / tau)`. The situation-level rank is the weighted mean of the channel
//! ranks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::situation::{Baseline, ChannelSpec, Situation, SituationWindow};

/// Default Sakoe-Chiba half-width, in grid steps.
pub const DEFAULT_DTW_BAND: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series contains a non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("band {band} cannot connect series whose lengths differ by {diff}")]
    BandTooNarrow { band: usize, diff: usize },
    #[error("series of length {0} is too short for feature extraction")]
    SeriesTooShort(usize),
    #[error("situations share no channel")]
    NoCommonChannels,
    #[error("channel sets differ; only on one side: {0:?}")]
    ChannelMismatch(Vec<String>),
    #[error("compared channels carry zero total weight")]
    ZeroTotalWeight,
    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

pub type Result<T, E = SimilarityError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euclid,
    Dtw,
    Features,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euclid => "euclid",
            Method::Dtw => "dtw",
            Method::Features => "features",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclid" => Ok(Method::Euclid),
            "dtw" => Ok(Method::Dtw),
            "features" => Ok(Method::Features),
            other => Err(format!(
                "unknown method `{other}` (expected euclid, dtw or features)"
            )),
        }
    }
}

/// Sakoe-Chiba constraint: alignments are restricted to `|i - j| <= width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Full,
    Width(usize),
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::Full => f.write_str("full"),
            Band::Width(w) => write!(f, "{w}"),
        }
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Band::Full);
        }
        s.parse::<usize>()
            .map(Band::Width)
            .map_err(|_| format!("band must be a non-negative integer or `full`, got `{s}`"))
    }
}

impl Serialize for Band {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Band::Full => serializer.serialize_str("full"),
            Band::Width(w) => serializer.serialize_u64(*w as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Band {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Width(u64),
            Name(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Width(w) => Ok(Band::Width(w as usize)),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How situations with different channel sets are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Channel sets must be identical.
    #[default]
    Strict,
    /// Compare the intersection; the rest is listed in the report.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub method: Method,
    pub znormalize: bool,
    pub dtw_band: Band,
    pub tau: f64,
    /// Channels absent from the map weigh 1.0.
    pub channel_weights: BTreeMap<String, f64>,
    pub channel_mode: ChannelMode,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            method: Method::Dtw,
            znormalize: true,
            dtw_band: Band::Width(DEFAULT_DTW_BAND),
            tau: 1.0,
            channel_weights: BTreeMap::new(),
            channel_mode: ChannelMode::Strict,
        }
    }
}

impl SimilarityConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    /// Fills in weights for channels that do not have one yet.
    pub fn with_spec_weights(mut self, specs: &[ChannelSpec]) -> Self {
        for spec in specs {
            self.channel_weights
                .entry(spec.channel_id.clone())
                .or_insert(spec.weight);
        }
        self
    }

    pub fn weight(&self, channel: &str) -> f64 {
        self.channel_weights.get(channel).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(SimilarityError::InvalidConfig {
                field: "tau",
                reason: format!("must be finite and > 0, got {}", self.tau),
            });
        }
        if let Some((id, w)) = self
            .channel_weights
            .iter()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(SimilarityError::InvalidConfig {
                field: "channel_weights",
                reason: format!("weight of `{id}` must be finite and >= 0, got {w}"),
            });
        }
        if !self.channel_weights.is_empty() && !self.channel_weights.values().any(|w| *w > 0.0) {
            return Err(SimilarityError::InvalidConfig {
                field: "channel_weights",
                reason: "at least one weight must be > 0".into(),
            });
        }
        Ok(())
    }
}

fn check_finite(series: &[f64]) -> Result<()> {
    if series.is_empty() {
        return Err(SimilarityError::EmptySeries);
    }
    match series.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SimilarityError::NonFiniteValue(i)),
        None => Ok(()),
    }
}

/// Threshold below which a spread or residual counts as zero, scaled to the series.
fn negligible(series: &[f64]) -> f64 {
    let scale = series.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    1e-12 * scale
}

fn mean_std(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score with the population standard deviation. Constant series map to zeros.
pub fn znormalize(series: &[f64]) -> Result<Vec<f64>> {
    check_finite(series)?;
    let (mean, std) = mean_std(series);
    if std <= negligible(series) {
        return Ok(vec![0.0; series.len()]);
    }
    Ok(series.iter().map(|v| (v - mean) / std).collect())
}

/// Root-mean-square distance `sqrt(sum((a_i - b_i)^2) / n)`.
pub fn euclid_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(SimilarityError::EmptySeries);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Minimal cumulative `|a_i - b_j|` cost over monotone alignments (diagonal, up and right
/// steps, unweighted) restricted to the band.
pub fn dtw_distance(a: &[f64], b: &[f64], band: Band) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptySeries);
    }
    let (la, lb) = (a.len(), b.len());
    let diff = la.abs_diff(lb);
    let width = match band {
        Band::Full => la.max(lb),
        Band::Width(w) if w < diff => return Err(SimilarityError::BandTooNarrow { band: w, diff }),
        Band::Width(w) => w,
    };

    // Two rolling rows. Outside the live band range every entry is +inf.
    let mut prev = vec![f64::INFINITY; lb];
    let mut curr = vec![f64::INFINITY; lb];
    let mut prev_range = (0usize, 0usize);
    let mut stale_range: Option<(usize, usize)> = None;
    for (i, &ai) in a.iter().enumerate() {
        let lo = i.saturating_sub(width);
        let hi = (i + width).min(lb - 1);
        if let Some((slo, shi)) = stale_range {
            curr[slo..=shi].fill(f64::INFINITY);
        }
        for j in lo..=hi {
            let cost = (ai - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { curr[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 {
                    prev[j - 1]
                } else {
                    f64::INFINITY
                };
                up.min(left).min(diag)
            };
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
        stale_range = if i == 0 { None } else { Some(prev_range) };
        prev_range = (lo, hi);
    }
    let total = prev[lb - 1];
    if total.is_finite() {
        Ok(total)
    } else {
        Err(SimilarityError::BandTooNarrow { band: width, diff })
    }
}

/// Eight summary statistics of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Least-squares slope against the sample index.
    pub slope: f64,
    /// RMS of first differences.
    pub diff_rms: f64,
    /// Strict sign changes of the mean-centred series, zeros skipped.
    pub zero_crossings: usize,
    /// Mean of squares.
    pub energy: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.mean,
            self.std,
            self.min,
            self.max,
            self.slope,
            self.diff_rms,
            self.zero_crossings as f64,
            self.energy,
        ]
    }
}

pub fn extract_features(series: &[f64]) -> Result<FeatureVector> {
    if series.len() < 2 {
        return Err(SimilarityError::SeriesTooShort(series.len()));
    }
    check_finite(series)?;
    let n = series.len();
    let nf = n as f64;
    let (mean, std) = mean_std(series);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = mean.clamp(min, max);
    let eps = negligible(series);
    let std = if std <= eps { 0.0 } else { std };

    let x_mean = (nf - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in series.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (v - mean);
        sxx += dx * dx;
    }
    let slope = if std == 0.0 { 0.0 } else { sxy / sxx };

    let diff_sq: f64 = series
        .windows(2)
        .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
        .sum();
    let diff_rms = (diff_sq / (nf - 1.0)).sqrt();

    let mut zero_crossings = 0;
    let mut last_sign = 0.0;
    for v in series {
        let c = v - mean;
        if c.abs() <= eps {
            continue;
        }
        let sign = c.signum();
        if last_sign != 0.0 && sign != last_sign {
            zero_crossings += 1;
        }
        last_sign = sign;
    }

    let energy = series.iter().map(|v| v * v).sum::<f64>() / nf;
    Ok(FeatureVector {
        mean,
        std,
        min,
        max,
        slope,
        diff_rms,
        zero_crossings,
        energy,
    })
}

/// RMS distance between two feature vectors, each component scaled by the magnitude
/// of the reference (baseline) component, or by 1 where that magnitude is zero.
pub fn feature_distance(query: &FeatureVector, reference: &FeatureVector) -> f64 {
    let q = query.to_array();
    let r = reference.to_array();
    let sum: f64 = q
        .iter()
        .zip(&r)
        .map(|(qk, rk)| {
            let scale = if rk.abs() > 1e-12 { rk.abs() } else { 1.0 };
            let z = (qk - rk) / scale;
            z * z
        })
        .sum();
    (sum / q.len() as f64).sqrt()
}

/// Maps a distance onto `(0, 100]`; exactly 100 at distance 0.
pub fn percent_from_distance(distance: f64, tau: f64) -> f64 {
    100.0 * (-distance / tau).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub distance: f64,
    pub similarity_percent: f64,
}

/// Compares a live series `query` against a baseline series `reference`.
pub fn channel_similarity(
    query: &[f64],
    reference: &[f64],
    cfg: &SimilarityConfig,
) -> Result<ChannelScore> {
    let distance = match cfg.method {
        Method::Euclid | Method::Dtw => {
            let (q, r) = if cfg.znormalize {
                (znormalize(query)?, znormalize(reference)?)
            } else {
                check_finite(query)?;
                check_finite(reference)?;
                (query.to_vec(), reference.to_vec())
            };
            if cfg.method == Method::Euclid {
                euclid_distance(&q, &r)?
            } else {
                dtw_distance(&q, &r, cfg.dtw_band)? / (q.len() + r.len()) as f64
            }
        }
        Method::Features => {
            feature_distance(&extract_features(query)?, &extract_features(reference)?)
        }
    };
    Ok(ChannelScore {
        distance,
        similarity_percent: percent_from_distance(distance, cfg.tau).clamp(0.0, 100.0),
    })
}

/// Similarity of a live situation against one baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub baseline_id: String,
    pub bmsi_window: SituationWindow,
    pub per_channel: BTreeMap<String, ChannelScore>,
    pub aggregate_percent: f64,
    pub method: Method,
    /// Data time of the comparison (the live window's end).
    pub computed_at: f64,
    /// Channels present on only one side (lenient mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_channels: Vec<String>,
}

pub fn situation_similarity(
    bmsi: &Situation,
    bmbs: &Baseline,
    cfg: &SimilarityConfig,
) -> Result<SimilarityReport> {
    cfg.validate()?;
    let reference = &bmbs.situation;
    if cfg.method != Method::Dtw && bmsi.n_samples() != reference.n_samples() {
        return Err(SimilarityError::LengthMismatch(
            bmsi.n_samples(),
            reference.n_samples(),
        ));
    }

    let skipped: Vec<String> = bmsi
        .channels
        .keys()
        .filter(|id| !reference.channels.contains_key(*id))
        .chain(
            reference
                .channels
                .keys()
                .filter(|id| !bmsi.channels.contains_key(*id)),
        )
        .cloned()
        .collect();
    if !skipped.is_empty() && cfg.channel_mode == ChannelMode::Strict {
        return Err(SimilarityError::ChannelMismatch(skipped));
    }

    let mut per_channel = BTreeMap::new();
    let (mut weighted, mut total_weight) = (0.0, 0.0);
    for (id, query) in &bmsi.channels {
        let Some(base) = reference.channels.get(id) else {
            continue;
        };
        let score = channel_similarity(query, base, cfg)?;
        let w = cfg.weight(id);
        weighted += w * score.similarity_percent;
        total_weight += w;
        per_channel.insert(id.clone(), score);
    }
    if per_channel.is_empty() {
        return Err(SimilarityError::NoCommonChannels);
    }
    if total_weight <= 0.0 {
        return Err(SimilarityError::ZeroTotalWeight);
    }

    Ok(SimilarityReport {
        baseline_id: bmbs.baseline_id.clone(),
        bmsi_window: bmsi.window,
        per_channel,
        aggregate_percent: (weighted / total_weight).clamp(0.0, 100.0),
        method: cfg.method,
        computed_at: bmsi.window.t_end,
        skipped_channels: skipped,
    })
}

/// Compares one situation against every baseline, in registry order.
pub fn compare_registry(
    bmsi: &Situation,
    registry: &[Baseline],
    cfg: &SimilarityConfig,
) -> Vec<Result<SimilarityReport>> {
    exec::map_slice(registry, |b| situation_similarity(bmsi, b, cfg))
}
