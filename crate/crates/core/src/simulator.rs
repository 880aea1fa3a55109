//! Seeded synthetic bio-signal generator with injectable pre-event signatures.
//!
//! Each channel is `base + amplitude * sin(2*pi*t / period) + noise + signature(t)`,
//! sampled at `k / rate` for `k = 0..=floor(duration * rate)`. The signature of an
//! event ramps linearly from 0 at `event_time - signature_lead` to `ramp_to` at
//! `event_time` and is 0 elsewhere.
//!
//! Reproducibility: every channel draws from its own ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64(mix(seed, channel_index))`, where `mix(a, b)` is
//! `splitmix64(a ^ splitmix64(b))`. A uniform `u` in `[0, 1)` is the top 53 bits of one
//! `next_u64` scaled by `2^-53`. Noise uses the basic Box-Muller form on two consecutive
//! uniforms, keeping only the cosine branch: `sqrt(-2 ln(1 - u1)) * cos(2*pi*u2)`.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::situation::{ChannelSpec, Sample};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid scenario: {0}")]
pub struct InvalidScenario(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub channel_id: String,
    pub base: f64,
    pub amplitude: f64,
    /// Seconds.
    pub period: f64,
    pub noise_sigma: f64,
    /// Samples per second.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureDelta {
    /// Offset reached at the event time.
    pub ramp_to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub event_time: f64,
    pub signature_lead: f64,
    pub deltas: BTreeMap<String, SignatureDelta>,
}

impl EventSpec {
    pub fn signature_start(&self) -> f64 {
        self.event_time - self.signature_lead
    }

    /// Offset this event adds to `channel` at time `t`.
    pub fn signature(&self, channel: &str, t: f64) -> f64 {
        let Some(delta) = self.deltas.get(channel) else {
            return 0.0;
        };
        let start = self.signature_start();
        if t < start || t > self.event_time {
            0.0
        } else if self.signature_lead == 0.0 {
            delta.ramp_to
        } else {
            delta.ramp_to * (t - start) / self.signature_lead
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    /// Seconds of signal, starting at t = 0.
    pub duration: f64,
    pub channels: Vec<ChannelProfile>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

/// Ground truth attached to a generated stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMarker {
    pub event_time: f64,
    pub signature_start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStream {
    /// Ordered by timestamp, then by channel order in the scenario.
    pub samples: Vec<Sample>,
    pub events: Vec<EventMarker>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrial {
    /// Stream to snapshot a baseline from.
    pub baseline: GeneratedStream,
    /// Stream to monitor.
    pub live: GeneratedStream,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn mix_seed(seed: u64, material: u64) -> u64 {
    splitmix64(seed ^ splitmix64(material))
}

struct Gaussian {
    rng: ChaCha8Rng,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn standard(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }
}

impl Scenario {
    /// The shipped pain-precursor fixture: heart rate, skin conductance and respiration,
    /// with heart rate and skin conductance ramping up over the 300 s before each event.
    pub fn pain_precursor(seed: u64) -> Self {
        let profile = |id: &str, base, amplitude, period, noise_sigma, rate| ChannelProfile {
            channel_id: id.into(),
            base,
            amplitude,
            period,
            noise_sigma,
            rate,
        };
        let deltas = [("hr", 10.0), ("eda", 1.5)]
            .into_iter()
            .map(|(id, ramp_to)| (id.to_string(), SignatureDelta { ramp_to }))
            .collect();
        Self {
            seed,
            duration: 3600.0,
            channels: vec![
                profile("hr", 72.0, 2.0, 60.0, 0.8, 1.0),
                profile("eda", 2.0, 0.1, 120.0, 0.05, 4.0),
                profile("resp", 16.0, 1.0, 30.0, 0.3, 1.0),
            ],
            events: vec![EventSpec {
                event_time: 2700.0,
                signature_lead: 300.0,
                deltas,
            }],
        }
    }

    pub fn channel_specs(&self) -> Vec<ChannelSpec> {
        self.channels
            .iter()
            .map(|c| ChannelSpec::new(&c.channel_id))
            .collect()
    }

    pub fn without_events(&self) -> Self {
        Self {
            events: vec![],
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidScenario> {
        let bad = |msg: String| Err(InvalidScenario(msg));
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return bad(format!(
                "duration must be finite and >= 0, got {}",
                self.duration
            ));
        }
        if self.channels.is_empty() {
            return bad("no channels".into());
        }
        let mut seen = HashSet::new();
        for c in &self.channels {
            if c.channel_id.is_empty()
                || c.channel_id.starts_with('#')
                || c.channel_id
                    .chars()
                    .any(|ch| ch == ',' || ch.is_whitespace())
            {
                return bad(format!(
                    "channel id `{}` is not a valid token",
                    c.channel_id
                ));
            }
            if !seen.insert(c.channel_id.as_str()) {
                return bad(format!("duplicate channel `{}`", c.channel_id));
            }
            if !(c.rate.is_finite() && c.rate > 0.0) {
                return bad(format!("rate of `{}` must be > 0", c.channel_id));
            }
            if !(c.period.is_finite() && c.period > 0.0) {
                return bad(format!("period of `{}` must be > 0", c.channel_id));
            }
            if !(c.noise_sigma.is_finite() && c.noise_sigma >= 0.0) {
                return bad(format!("noise_sigma of `{}` must be >= 0", c.channel_id));
            }
            if !(c.base.is_finite() && c.amplitude.is_finite()) {
                return bad(format!(
                    "base and amplitude of `{}` must be finite",
                    c.channel_id
                ));
            }
        }
        for e in &self.events {
            if !(e.event_time.is_finite()
                && e.signature_lead.is_finite()
                && e.signature_lead >= 0.0)
            {
                return bad("event times must be finite with signature_lead >= 0".into());
            }
            if e.signature_start() < 0.0 {
                return bad(format!(
                    "signature of the event at {} starts before t = 0",
                    e.event_time
                ));
            }
            for (id, d) in &e.deltas {
                if !seen.contains(id.as_str()) {
                    return bad(format!("event delta references unknown channel `{id}`"));
                }
                if !d.ramp_to.is_finite() {
                    return bad(format!("ramp_to of `{id}` must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn samples_per_channel(&self, channel: &ChannelProfile) -> usize {
        (self.duration * channel.rate).floor() as usize + 1
    }

    /// Noise-free value of `channel` at `t`, events included.
    pub fn clean_value(&self, channel: &ChannelProfile, t: f64) -> f64 {
        let signature: f64 = self
            .events
            .iter()
            .map(|e| e.signature(&channel.channel_id, t))
            .sum();
        channel.base + channel.amplitude * (TAU * t / channel.period).sin() + signature
    }

    pub fn event_markers(&self) -> Vec<EventMarker> {
        self.events
            .iter()
            .map(|e| EventMarker {
                event_time: e.event_time,
                signature_start: e.signature_start(),
            })
            .collect()
    }
}

pub fn generate(scenario: &Scenario) -> Result<GeneratedStream, InvalidScenario> {
    scenario.validate()?;
    let mut keyed: Vec<(f64, usize, Sample)> = Vec::new();
    for (ci, channel) in scenario.channels.iter().enumerate() {
        let mut noise = Gaussian::new(mix_seed(scenario.seed, ci as u64));
        for k in 0..scenario.samples_per_channel(channel) {
            let t = k as f64 / channel.rate;
            let value = scenario.clean_value(channel, t) + channel.noise_sigma * noise.standard();
            keyed.push((t, ci, Sample::new(t, &channel.channel_id, value)));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(GeneratedStream {
        samples: keyed.into_iter().map(|(_, _, s)| s).collect(),
        events: scenario.event_markers(),
    })
}

/// Two streams of the same scenario with independent noise: one to capture a baseline
/// from, one to monitor. Seeds derive from the scenario seed and `trial_index`.
pub fn make_paired_trial(
    scenario: &Scenario,
    trial_index: u64,
) -> Result<PairedTrial, InvalidScenario> {
    if scenario.events.is_empty() {
        return Err(InvalidScenario(
            "paired trials need at least one event".into(),
        ));
    }
    let baseline_seed = mix_seed(scenario.seed, trial_index.wrapping_mul(2));
    let live_seed = mix_seed(scenario.seed, trial_index.wrapping_mul(2).wrapping_add(1));
    Ok(PairedTrial {
        baseline: generate(&scenario.with_seed(baseline_seed))?,
        live: generate(&scenario.with_seed(live_seed))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> Scenario {
        Scenario {
            seed: 1,
            duration: 100.0,
            channels: vec![ChannelProfile {
                channel_id: "hr".into(),
                base: 70.0,
                amplitude: 0.0,
                period: 60.0,
                noise_sigma: 0.0,
                rate: 1.0,
            }],
            events: vec![],
        }
    }

    #[test]
    fn degenerate_generator_is_constant() {
        let g = generate(&flat()).unwrap();
        assert_eq!(g.samples.len(), 101);
        assert!(g.samples.iter().all(|s| s.value == 70.0));
    }

    #[test]
    fn ramp_arithmetic() {
        let e = EventSpec {
            event_time: 900.0,
            signature_lead: 300.0,
            deltas: [("hr".to_string(), SignatureDelta { ramp_to: 10.0 })].into(),
        };
        assert_eq!(e.signature("hr", 600.0), 0.0);
        assert_eq!(e.signature("hr", 750.0), 5.0);
        assert_eq!(e.signature("hr", 900.0), 10.0);
        assert_eq!(e.signature("hr", 900.5), 0.0);
        assert_eq!(e.signature("eda", 750.0), 0.0);
    }

    #[test]
    fn deterministic_by_seed() {
        let s = Scenario::pain_precursor(42);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&s.with_seed(43)).unwrap());
    }

    #[test]
    fn ordered_output_and_counts() {
        let s = Scenario::pain_precursor(7);
        let g = generate(&s).unwrap();
        assert!(g
            .samples
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp));
        for c in &s.channels {
            let n = g
                .samples
                .iter()
                .filter(|x| x.channel_id == c.channel_id)
                .count();
            assert_eq!(n, (s.duration * c.rate).floor() as usize + 1);
        }
        assert_eq!(
            g.events,
            vec![EventMarker {
                event_time: 2700.0,
                signature_start: 2400.0
            }]
        );
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = flat();
        s.channels[0].rate = 0.0;
        assert!(generate(&s).is_err());
        let mut s = flat();
        s.events.push(EventSpec {
            event_time: 100.0,
            signature_lead: 200.0,
            deltas: BTreeMap::new(),
        });
        assert!(generate(&s).is_err());
        let mut s = flat();
        s.events.push(EventSpec {
            event_time: 50.0,
            signature_lead: 10.0,
            deltas: [("nope".to_string(), SignatureDelta { ramp_to: 1.0 })].into(),
        });
        assert!(generate(&s).is_err());
        assert!(make_paired_trial(&flat(), 0).is_err());
    }

    #[test]
    fn scenario_json_shape() {
        let s = Scenario::pain_precursor(3);
        let text = serde_json::to_string(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
