use proptest::prelude::*;
use simdesk_bench::{compute_cdf, compute_cdf_with, LatencyReport, ResponseSample, DEFAULT_PERCENTILES};

/// Sort, then take the smallest rank k with k/n >= tenths/1000, compared in
/// integers.
fn brute_force_percentile(times: &[f64], tenths: u64) -> f64 {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as u64;
    let k = (1..=n).find(|k| k * 1000 >= tenths * n).unwrap();
    sorted[(k - 1) as usize]
}

fn brute_force_fraction(times: &[f64], t: f64) -> f64 {
    times.iter().filter(|&&x| x <= t).count() as f64 / times.len() as f64
}

fn samples() -> impl Strategy<Value = Vec<ResponseSample>> {
    prop::collection::vec(prop::option::weighted(0.85, 0.0f64..10_000.0), 1..200).prop_map(|v| {
        v.into_iter().enumerate().map(|(i, r)| ResponseSample { event_index: i, response_ms: r }).collect()
    })
}

fn measured(samples: &[ResponseSample]) -> Vec<f64> {
    samples.iter().filter_map(|s| s.response_ms).collect()
}

proptest! {
    #[test]
    fn cdf_is_monotone_and_ends_at_one(s in samples()) {
        let times = measured(&s);
        prop_assume!(!times.is_empty());
        let r = compute_cdf(s.clone()).unwrap();
        prop_assert_eq!(r.cdf.len(), times.len());
        prop_assert_eq!(r.skipped_count, s.len() - times.len());
        prop_assert!(r.cdf[0].fraction > 0.0);
        prop_assert_eq!(r.cdf.last().unwrap().fraction, 1.0);
        for w in r.cdf.windows(2) {
            prop_assert!(w[0].t_ms <= w[1].t_ms);
            prop_assert!(w[0].fraction <= w[1].fraction);
        }
    }

    #[test]
    fn percentiles_match_brute_force(s in samples(), extra in prop::collection::vec(0u64..=1000, 1..8)) {
        let times = measured(&s);
        prop_assume!(!times.is_empty());
        let ps: Vec<f64> = extra.iter().map(|&t| t as f64 / 10.0).collect();
        let r = compute_cdf_with(s, &ps).unwrap();
        for (pt, &tenths) in r.percentiles.iter().zip(&extra) {
            prop_assert_eq!(pt.t_ms, brute_force_percentile(&times, tenths), "p = {}", pt.p);
            prop_assert_eq!(r.percentile(pt.p), Some(pt.t_ms));
        }
    }

    #[test]
    fn fraction_matches_brute_force(s in samples(), q in 0.0f64..10_000.0) {
        let times = measured(&s);
        prop_assume!(!times.is_empty());
        let r = compute_cdf(s).unwrap();
        prop_assert_eq!(r.fraction_at(q), brute_force_fraction(&times, q));
        for &t in &times {
            prop_assert_eq!(r.fraction_at(t), brute_force_fraction(&times, t));
        }
    }

    #[test]
    fn report_file_roundtrips(s in samples(), label in prop::option::of("[a-z0-9 ]{0,12}")) {
        let mut r = LatencyReport::from_samples(s, &DEFAULT_PERCENTILES).unwrap();
        r.label = label;
        let text = r.to_toml().unwrap();
        prop_assert_eq!(LatencyReport::from_toml(&text).unwrap(), r.clone());
        prop_assert_eq!(r.to_toml().unwrap(), text, "serialization is deterministic");
    }
}

#[test]
fn seventy_percent_within_5224_ms() {
    let ms = [1200.0, 2300.0, 3100.0, 3900.0, 4400.0, 4800.0, 5224.0, 6100.0, 7000.0, 8800.0];
    let s = ms.iter().enumerate().map(|(i, &t)| ResponseSample::measured(i, t)).collect();
    let r = compute_cdf(s).unwrap();
    assert!(r.cdf.iter().any(|pt| pt.t_ms == 5224.0 && pt.fraction == 0.7));
    assert_eq!(r.percentile(70.0), Some(5224.0));
    assert_eq!(r.fraction_at(5224.0), 0.7);
}

#[test]
fn report_file_layout() {
    let s = vec![ResponseSample::measured(0, 12.5), ResponseSample::skipped(1)];
    let text = compute_cdf(s).unwrap().with_label("5 sessions").to_toml().unwrap();
    let order: Vec<usize> = ["label", "skipped_count", "[[percentiles]]", "[[cdf]]", "[[samples]]"]
        .iter()
        .map(|k| text.find(k).unwrap_or_else(|| panic!("{k} missing in\n{text}")))
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{text}");
    assert!(text.contains("event_index = 1\n"));
}
