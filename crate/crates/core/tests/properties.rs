use std::collections::BTreeMap;

use proptest::prelude::*;

use situwatch_core::ingest::{
    baseline_from_json, baseline_to_json, format_record, load_baselines, parse_record,
    save_baseline, StreamCursor,
};
use situwatch_core::prediction::{
    knn_classify, resolve_baseline, step_alert, AlertPolicy, AlertState, AlertStatus,
    BaselineSelector, Emission,
};
use situwatch_core::similarity::{
    dtw_distance, euclid_distance, percent_from_distance, situation_similarity, Band, Method,
    SimilarityConfig, SimilarityReport,
};
use situwatch_core::simulator::{generate, ChannelProfile, Scenario};
use situwatch_core::situation::{
    build_situation, validate_situation, Baseline, ChannelSpec, GapPolicy, Sample, Situation,
    SituationWindow,
};

fn series(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, len)
}

fn situation_from(values: &BTreeMap<String, Vec<f64>>, t0: f64) -> Situation {
    let n = values.values().next().unwrap().len();
    let specs: Vec<ChannelSpec> = values.keys().map(ChannelSpec::new).collect();
    let samples: Vec<Sample> = values
        .iter()
        .flat_map(|(id, v)| {
            v.iter()
                .enumerate()
                .map(move |(i, x)| Sample::new(t0 + i as f64, id, *x))
        })
        .collect();
    let window = SituationWindow::new(t0, t0 + (n - 1) as f64, n).unwrap();
    build_situation(&samples, &specs, &window, GapPolicy::Strict).unwrap()
}

fn report_with(percent: f64, t: f64) -> SimilarityReport {
    SimilarityReport {
        baseline_id: "b".into(),
        bmsi_window: SituationWindow::new(t - 10.0, t, 2).unwrap(),
        per_channel: BTreeMap::new(),
        aggregate_percent: percent,
        method: Method::Dtw,
        computed_at: t,
        skipped_channels: vec![],
    }
}

fn dummy_baseline() -> Baseline {
    let mut v = BTreeMap::new();
    v.insert("hr".to_string(), vec![1.0, 2.0, 3.0]);
    Baseline::new("b", "pain", situation_from(&v, 0.0), 60.0, 0.0).unwrap()
}

fn drive(ranks: &[f64], policy: &AlertPolicy) -> Vec<(usize, Emission, AlertStatus)> {
    let b = dummy_baseline();
    let mut state = AlertState::default();
    let mut out = vec![];
    for (i, r) in ranks.iter().enumerate() {
        let (next, e) = step_alert(
            &state,
            &report_with(*r, 100.0 + i as f64),
            policy,
            100.0 + i as f64,
            &b,
        );
        if let Some(e) = e {
            out.push((i, e, next.status));
        }
        state = next;
    }
    out
}

fn policy(on: f64, off: f64, m: u32) -> AlertPolicy {
    AlertPolicy {
        theta_on: on,
        theta_off: off,
        min_consecutive: m,
        baseline_id: BaselineSelector::BestMatch,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // ---- situation_core

    #[test]
    fn grid_is_uniform(t0 in 0.0..2e9f64, dur in 1.0..1e5f64, n in 2usize..400) {
        let w = SituationWindow::new(t0, t0 + dur, n).unwrap();
        let s = build_situation(
            &[Sample::new(t0, "x", 1.0), Sample::new(t0 + dur, "x", 2.0)],
            &[ChannelSpec::new("x")],
            &w,
            GapPolicy::Strict,
        ).unwrap();
        prop_assert_eq!(s.grid.len(), n);
        prop_assert_eq!(s.grid[0], t0);
        prop_assert_eq!(s.grid[n - 1], t0 + dur);
        prop_assert!(validate_situation(&s).is_empty());
    }

    #[test]
    fn interpolation_exact_on_lines(a in -10.0..10.0f64, b in -100.0..100.0f64,
                                    ts in prop::collection::vec(0.0..900.0f64, 2..30)) {
        let samples: Vec<Sample> = ts.iter().map(|t| Sample::new(*t, "x", a * t + b)).collect();
        let w = SituationWindow::new(0.0, 900.0, 90).unwrap();
        let s = build_situation(&samples, &[ChannelSpec::new("x")], &w, GapPolicy::Strict).unwrap();
        let lo = ts.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (g, v) in s.grid.iter().zip(&s.channels["x"]) {
            let t = g.clamp(lo, hi);
            prop_assert!((v - (a * t + b)).abs() <= 1e-9 * (1.0 + (a * t + b).abs()));
        }
        let cov = s.coverage["x"];
        prop_assert!((0.0..=1.0).contains(&cov));
    }

    #[test]
    fn build_is_deterministic_under_reordering(
        pts in prop::collection::vec((0.0..900.0f64, -5.0..5.0f64), 2..40),
        seed in any::<u64>(),
    ) {
        let mut samples: Vec<Sample> = pts.iter().map(|(t, v)| Sample::new(*t, "x", *v)).collect();
        let mut dedup = std::collections::BTreeSet::new();
        samples.retain(|s| dedup.insert(s.timestamp.to_bits()));
        let w = SituationWindow::new(0.0, 900.0, 90).unwrap();
        let spec = [ChannelSpec::new("x")];
        let a = build_situation(&samples, &spec, &w, GapPolicy::Strict).unwrap();
        let mut k = seed;
        for i in (1..samples.len()).rev() {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            samples.swap(i, (k >> 33) as usize % (i + 1));
        }
        let b = build_situation(&samples, &spec, &w, GapPolicy::Strict).unwrap();
        prop_assert_eq!(a, b);
    }

    // ---- similarity_engine

    #[test]
    fn kernels_symmetric_and_nonnegative(a in series(2..=40), b in series(2..=40), w in 0usize..10) {
        let band = Band::Width(w.max(a.len().abs_diff(b.len())));
        let ab = dtw_distance(&a, &b, band).unwrap();
        let ba = dtw_distance(&b, &a, band).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(dtw_distance(&a, &a, Band::Width(w)).unwrap(), 0.0);
        let n = a.len().min(b.len());
        let e = euclid_distance(&a[..n], &b[..n]).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e, euclid_distance(&b[..n], &a[..n]).unwrap());
    }

    #[test]
    fn dtw_band_monotone(a in series(2..=30), b in series(2..=30)) {
        let min_w = a.len().abs_diff(b.len());
        let mut prev = f64::INFINITY;
        for w in min_w..=30 {
            let d = dtw_distance(&a, &b, Band::Width(w)).unwrap();
            prop_assert!(d <= prev + 1e-12);
            prev = d;
        }
        prop_assert!((dtw_distance(&a, &b, Band::Full).unwrap() - prev).abs() <= 1e-12);
    }

    #[test]
    fn znormalized_similarity_affine_invariant(
        q in series(8..=24), r in series(8..=24), scale in 0.1..20.0f64, shift in -100.0..100.0f64,
        method in prop_oneof![Just(Method::Euclid), Just(Method::Dtw)],
    ) {
        let n = q.len().min(r.len());
        let mut qm = BTreeMap::new();
        qm.insert("x".to_string(), q[..n].to_vec());
        let mut rm = BTreeMap::new();
        rm.insert("x".to_string(), r[..n].to_vec());
        let mut qa = BTreeMap::new();
        qa.insert("x".to_string(), q[..n].iter().map(|v| v * scale + shift).collect::<Vec<_>>());
        let base = Baseline::new("b", "p", situation_from(&rm, 0.0), 0.0, 0.0).unwrap();
        let cfg = SimilarityConfig { method, dtw_band: Band::Full, ..SimilarityConfig::default() };
        let p1 = situation_similarity(&situation_from(&qm, 0.0), &base, &cfg).unwrap().aggregate_percent;
        let p2 = situation_similarity(&situation_from(&qa, 0.0), &base, &cfg).unwrap().aggregate_percent;
        prop_assert!((p1 - p2).abs() <= 1e-6, "{} vs {}", p1, p2);
    }

    #[test]
    fn percent_strictly_decreasing(d1 in 0.0..50.0f64, gap in 1e-6..10.0f64, tau in 0.1..10.0f64) {
        let p1 = percent_from_distance(d1, tau);
        let p2 = percent_from_distance(d1 + gap, tau);
        prop_assert!(p1 > p2);
        prop_assert!(p1 <= 100.0 && p2 > 0.0);
        prop_assert_eq!(percent_from_distance(0.0, tau), 100.0);
    }

    #[test]
    fn identical_situations_rank_100(values in prop::collection::vec(series(6..=6), 1..4),
                                     method in prop_oneof![Just(Method::Euclid), Just(Method::Dtw), Just(Method::Features)]) {
        let m: BTreeMap<String, Vec<f64>> =
            values.into_iter().enumerate().map(|(i, v)| (format!("c{i}"), v)).collect();
        let s = situation_from(&m, 0.0);
        let b = Baseline::new("b", "p", s.clone(), 0.0, 0.0).unwrap();
        let cfg = SimilarityConfig::default().with_method(method);
        prop_assert_eq!(situation_similarity(&s, &b, &cfg).unwrap().aggregate_percent, 100.0);
    }

    // ---- prediction

    #[test]
    fn alerts_alternate_and_respect_hysteresis(
        ranks in prop::collection::vec(0.0..100.0f64, 0..200),
        on in 50.0..95.0f64, gap in 0.0..30.0f64, m in 1u32..5,
    ) {
        let p = policy(on, on - gap, m);
        let emissions = drive(&ranks, &p);
        let mut expect_alert = true;
        let mut fired_at = 0;
        for (i, e, _) in &emissions {
            match e {
                Emission::Alert(_) => {
                    prop_assert!(expect_alert);
                    let start = i + 1 - m as usize;
                    prop_assert!(ranks[start..=*i].iter().all(|r| *r >= p.theta_on));
                    fired_at = *i;
                }
                Emission::AlertCleared(_) => {
                    prop_assert!(!expect_alert);
                    prop_assert!(ranks[*i] < p.theta_off);
                    prop_assert!(ranks[fired_at + 1..*i].iter().all(|r| *r >= p.theta_off));
                }
            }
            expect_alert = !expect_alert;
        }
    }

    #[test]
    fn no_flapping_between_thresholds(ranks in prop::collection::vec(70.0..85.0f64, 1..100)) {
        // Ranks strictly between theta_off and theta_on never change the state.
        let p = policy(85.0, 70.0, 2);
        prop_assert!(drive(&ranks, &p).is_empty());
        let mut seq = vec![90.0, 90.0];
        seq.extend(ranks.iter().map(|r| r.max(70.0)));
        let e = drive(&seq, &p);
        prop_assert_eq!(e.len(), 1);
        prop_assert!(matches!(e[0].1, Emission::Alert(_)));
    }

    #[test]
    fn best_match_invariant_under_monotone_transform(
        percents in prop::collection::vec(prop_oneof![0.0..100.0f64, Just(50.0)], 1..8),
    ) {
        let base = dummy_baseline();
        let registry: Vec<Baseline> = (0..percents.len())
            .map(|i| Baseline { baseline_id: format!("b{i}"), ..base.clone() })
            .collect();
        let reports = |f: &dyn Fn(f64) -> f64| -> BTreeMap<String, SimilarityReport> {
            percents
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut r = report_with(f(*p), 100.0);
                    r.baseline_id = format!("b{i}");
                    (r.baseline_id.clone(), r)
                })
                .collect()
        };
        let p = policy(85.0, 70.0, 1);
        let want = resolve_baseline(&registry, &p, &reports(&|x| x)).unwrap();
        prop_assert_eq!(&resolve_baseline(&registry, &p, &reports(&|x| x / 2.0)).unwrap(), &want);
        prop_assert_eq!(&resolve_baseline(&registry, &p, &reports(&|x| x * x / 100.0)).unwrap(), &want);
        // Ties resolve to the smallest id.
        let top = percents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = percents.iter().position(|x| *x == top).unwrap();
        prop_assert_eq!(want, format!("b{first}"));
    }

    // ---- ingest_io

    #[test]
    fn record_round_trip(t in 0.0..4e9f64, v in -1e12..1e12f64, id in "[a-z][a-z0-9_]{0,8}") {
        let s = Sample::new(t, &id, v);
        let back = parse_record(&format_record(&s)).unwrap().unwrap();
        prop_assert_eq!(back.timestamp.to_bits(), t.to_bits());
        prop_assert_eq!(back.value.to_bits(), v.to_bits());
        prop_assert_eq!(back.channel_id, id);
    }

    #[test]
    fn buffer_sorted_after_shuffled_pushes(ts in prop::collection::vec(0u32..10_000, 1..200)) {
        let mut c = StreamCursor::new(7200.0, 60.0);
        for t in &ts {
            c.push_sample(Sample::new(*t as f64, "x", *t as f64));
        }
        let r = c.readings("x");
        prop_assert!(r.windows(2).all(|w| w[0].0 < w[1].0));
        let max = *ts.iter().max().unwrap() as f64;
        prop_assert!(r.iter().all(|p| p.0 >= max - 7200.0));
        prop_assert_eq!(c.max_watermark(), Some(max));
        // Every retained reading equals its own timestamp, and every distinct
        // in-horizon timestamp pushed while it was still admissible survives.
        prop_assert!(r.iter().all(|p| p.0 == p.1));
    }

    #[test]
    fn eviction_keeps_exact_horizon(n in 1u32..400, step in 1.0..100.0f64, retention in 10.0..5000.0f64) {
        let mut c = StreamCursor::new(retention, 60.0);
        for k in 0..n {
            c.push_sample(Sample::new(k as f64 * step, "x", 0.0));
        }
        let newest = (n - 1) as f64 * step;
        let want = (0..n).filter(|k| *k as f64 * step >= newest - retention).count();
        prop_assert_eq!(c.len("x"), want);
        prop_assert!(!c.push_sample(Sample::new(newest - retention - 1.0, "x", 0.0)).accepted);
    }

    #[test]
    fn baseline_json_round_trips_bits(vals in prop::collection::vec(-1e9..1e9f64, 3..20),
                                      lead in 0.0..1e4f64, t0 in 0.0..2e9f64) {
        let mut m = BTreeMap::new();
        m.insert("hr".to_string(), vals.clone());
        m.insert("eda".to_string(), vals.iter().map(|v| v / 7.0).collect());
        let b = Baseline::new("x-1", "pain", situation_from(&m, t0), lead, t0 + 0.1).unwrap();
        let back = baseline_from_json(&baseline_to_json(&b)).unwrap();
        prop_assert_eq!(&back, &b);
        for (id, v) in &b.situation.channels {
            for (x, y) in v.iter().zip(&back.situation.channels[id]) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    // ---- simulator

    #[test]
    fn generated_sample_counts(seed in any::<u64>(), dur in 10.0..600.0f64, rate in 0.1..5.0f64) {
        let sc = Scenario {
            seed,
            duration: dur,
            channels: vec![ChannelProfile {
                channel_id: "x".into(), base: 0.0, amplitude: 1.0, period: 60.0, noise_sigma: 1.0, rate,
            }],
            events: vec![],
        };
        let g = generate(&sc).unwrap();
        prop_assert_eq!(g.samples.len(), (dur * rate).floor() as usize + 1);
        prop_assert!(g.samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        prop_assert_eq!(g, generate(&sc).unwrap());
    }

    #[test]
    fn noiseless_stream_is_closed_form(seed in any::<u64>()) {
        let mut sc = Scenario::pain_precursor(seed);
        for c in &mut sc.channels {
            c.noise_sigma = 0.0;
        }
        let g = generate(&sc).unwrap();
        let ev = &sc.events[0];
        let start = ev.event_time - ev.signature_lead;
        for s in &g.samples {
            let ch = sc.channels.iter().find(|c| c.channel_id == s.channel_id).unwrap();
            let t = s.timestamp;
            let ramp = ev.deltas.get(&s.channel_id).map_or(0.0, |d| d.ramp_to);
            let sig = if t >= start && t <= ev.event_time { ramp * (t - start) / ev.signature_lead } else { 0.0 };
            let want = ch.base + ch.amplitude * (std::f64::consts::TAU * t / ch.period).sin() + sig;
            prop_assert!((s.value - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

#[test]
fn noise_std_within_five_percent() {
    let sigma = 2.5;
    let sc = Scenario {
        seed: 77,
        duration: 200_000.0,
        channels: vec![ChannelProfile {
            channel_id: "x".into(),
            base: 10.0,
            amplitude: 0.0,
            period: 60.0,
            noise_sigma: sigma,
            rate: 1.0,
        }],
        events: vec![],
    };
    let g = generate(&sc).unwrap();
    assert!(g.samples.len() >= 100_000);
    let n = g.samples.len() as f64;
    let mean = g.samples.iter().map(|s| s.value).sum::<f64>() / n;
    let sd = (g
        .samples
        .iter()
        .map(|s| (s.value - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!((sd - sigma).abs() / sigma < 0.05, "sd {sd}");
    assert!((mean - 10.0).abs() < 0.05);
}

#[test]
fn baselines_survive_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = BTreeMap::new();
    m.insert(
        "hr".to_string(),
        vec![0.1, 0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300],
    );
    let b = Baseline::new("a.b-c_1", "pain", situation_from(&m, 5.5), 300.0, 9.0).unwrap();
    save_baseline(&b, dir.path()).unwrap();
    std::fs::write(dir.path().join("broken.json"), "{not json").unwrap();
    let loaded = load_baselines(dir.path()).unwrap();
    assert_eq!(loaded.baselines, vec![b]);
    assert_eq!(loaded.warnings.len(), 1);
}

#[test]
fn knn_uses_every_baseline() {
    let mut m = BTreeMap::new();
    m.insert("hr".to_string(), vec![1.0, 3.0, 2.0, 5.0]);
    let q = situation_from(&m, 0.0);
    let reg: Vec<Baseline> = (0..4)
        .map(|i| {
            let mut v = m.clone();
            v.get_mut("hr").unwrap()[0] += i as f64;
            Baseline::new(format!("b{i}"), "x", situation_from(&v, 0.0), 0.0, 0.0).unwrap()
        })
        .collect();
    let c = knn_classify(&q, &reg, 4, &SimilarityConfig::default()).unwrap();
    assert_eq!(c.neighbors.len(), 4);
    assert_eq!(c.neighbors[0].baseline_id, "b0");
    assert_eq!(c.confidence, 1.0);
}
