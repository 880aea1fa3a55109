//! Offline commands behind the CLI.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Serialize;
use situwatch_core::ingest::{self, format_record, read_replay_file};
use situwatch_core::simulator::{generate, EventMarker, Scenario};
use situwatch_core::{
    build_situation, situation_similarity, Baseline, ChannelSpec, GapPolicy, Sample,
    SimilarityConfig, SimilarityReport, Situation, SituationWindow,
};

use crate::server::IngestSummary;

/// Builds one situation spanning every reading in `samples`, over the channels that
/// appear in it.
pub fn situation_of(samples: &[Sample], n_samples: usize) -> anyhow::Result<Situation> {
    if samples.is_empty() {
        bail!("no readings");
    }
    let channels: BTreeSet<&str> = samples.iter().map(|s| s.channel_id.as_str()).collect();
    let specs: Vec<ChannelSpec> = channels.into_iter().map(ChannelSpec::new).collect();
    let lo = samples
        .iter()
        .map(|s| s.timestamp)
        .fold(f64::INFINITY, f64::min);
    let hi = samples
        .iter()
        .map(|s| s.timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    let window = SituationWindow::new(lo, hi, n_samples)?;
    Ok(build_situation(
        samples,
        &specs,
        &window,
        GapPolicy::Strict,
    )?)
}

/// Compares the situation recorded in `query` against the one in `reference`.
pub fn compare_files(
    query: &Path,
    reference: &Path,
    n_samples: usize,
    cfg: &SimilarityConfig,
) -> anyhow::Result<SimilarityReport> {
    cfg.validate()?;
    let q = situation_of(&read_replay_file(query)?, n_samples)
        .with_context(|| format!("building situation from {}", query.display()))?;
    let r = situation_of(&read_replay_file(reference)?, n_samples)
        .with_context(|| format!("building situation from {}", reference.display()))?;
    let id = reference
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "reference".into());
    let baseline = Baseline::new(id, "reference", r, 0.0, 0.0)?;
    Ok(situation_similarity(&q, &baseline, cfg)?)
}

#[derive(Debug, Serialize)]
struct EventsFile<'a> {
    seed: u64,
    events: &'a [EventMarker],
}

/// Writes `stream.csv` and `events.json` for `scenario` into `out`.
pub fn simulate_to_dir(scenario: &Scenario, out: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let stream = generate(scenario)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = out.join("stream.csv");
    let mut text = String::with_capacity(stream.samples.len() * 24);
    text.push_str("# timestamp,channel_id,value\n");
    for s in &stream.samples {
        text.push_str(&format_record(s));
        text.push('\n');
    }
    std::fs::write(&csv, text).with_context(|| format!("writing {}", csv.display()))?;
    let events = out.join("events.json");
    let body = EventsFile {
        seed: scenario.seed,
        events: &stream.events,
    };
    std::fs::write(&events, serde_json::to_vec_pretty(&body)?)
        .with_context(|| format!("writing {}", events.display()))?;
    Ok((csv, events))
}

pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario: Scenario =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Splits a time-ordered replay into batches covering at most `span` seconds of data
/// time and at most `max_len` readings each.
pub fn batches(samples: &[Sample], span: f64, max_len: usize) -> Vec<&[Sample]> {
    let mut out = vec![];
    let mut start = 0;
    for i in 1..=samples.len() {
        let split = i == samples.len()
            || i - start >= max_len
            || samples[i].timestamp - samples[start].timestamp >= span;
        if split {
            out.push(&samples[start..i]);
            start = i;
        }
    }
    out
}

/// Posts a replay file to a running service. With `speed > 0` batches are paced so
/// that data time advances `speed` times faster than wall time; `speed == 0` sends as
/// fast as the service accepts.
pub async fn replay(path: &Path, speed: f64, target: &str) -> anyhow::Result<IngestSummary> {
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("speed must be a finite number >= 0");
    }
    let samples = read_replay_file(path)?;
    let url = format!("{}/api/samples", target.trim_end_matches('/'));
    let client = reqwest::Client::new();
    let mut total = IngestSummary::default();
    let started = tokio::time::Instant::now();
    let origin = samples.first().map_or(0.0, |s| s.timestamp);
    for batch in batches(&samples, 1.0, 10_000) {
        if speed > 0.0 {
            let due = (batch[0].timestamp - origin) / speed;
            tokio::time::sleep_until(started + Duration::from_secs_f64(due)).await;
        }
        let mut body = String::with_capacity(batch.len() * 24);
        for s in batch {
            body.push_str(&format_record(s));
            body.push('\n');
        }
        let resp = client
            .post(&url)
            .header("content-type", "text/plain")
            .body(body)
            .send()
            .await
            .with_context(|| format!("posting to {url}"))?;
        let status = resp.status();
        if !status.is_success() {
            bail!(
                "{url} answered {status}: {}",
                resp.text().await.unwrap_or_default()
            );
        }
        let summary: IngestSummary = serde_json::from_slice(&resp.bytes().await?)?;
        total.accepted += summary.accepted;
        total.rejected += summary.rejected;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub baseline_id: String,
    pub label: String,
    pub event_time: f64,
    pub lead_time: f64,
    pub channels: Vec<String>,
}

pub fn list_baselines(dir: &Path) -> anyhow::Result<Vec<BaselineSummary>> {
    let loaded = ingest::load_baselines(dir)?;
    for w in &loaded.warnings {
        log::warn!("skipping {}: {}", w.path.display(), w.error);
    }
    Ok(loaded
        .baselines
        .into_iter()
        .map(|b| BaselineSummary {
            channels: b.situation.channels.keys().cloned().collect(),
            baseline_id: b.baseline_id,
            label: b.label,
            event_time: b.event_time,
            lead_time: b.lead_time,
        })
        .collect())
}

pub fn remove_baseline(dir: &Path, id: &str) -> anyhow::Result<()> {
    if !ingest::remove_baseline(dir, id)? {
        bail!("no baseline `{id}` in {}", dir.display());
    }
    Ok(())
}
