mod common;

use std::collections::HashMap;

use hazardlab::cohort::{CohortCriteria, ExclusionReason};
use hazardlab::emr_store::{build_histories, read_events_csv, write_events_csv};
use hazardlab::synth::{generate, generate_with_truth, ground_truth, SynthConfig};

fn config(n: usize, seed: u64, beta: Vec<f64>) -> SynthConfig {
    let codes = (0..beta.len()).map(|j| format!("F{j}")).collect();
    SynthConfig::new(n, seed, codes, beta)
}

#[test]
fn null_beta_event_times_are_weibull() {
    let cfg = config(10_000, 11, vec![0.0, 0.0, 0.0]);
    let out = generate_with_truth(&cfg).unwrap();
    let times: Vec<f64> = out.truth.iter().map(|t| t.event_time).collect();
    let (k, scale) = (cfg.baseline_shape, cfg.baseline_scale);
    let d = common::ks_statistic(&times, |t| 1.0 - (-(t / scale).powf(k)).exp());
    assert!(d < 0.02, "KS statistic {d}");
}

#[test]
fn positive_beta_shortens_event_times() {
    let cfg = config(5_000, 12, vec![1.0]);
    let out = generate_with_truth(&cfg).unwrap();
    let level: Vec<f64> = out.truth.iter().map(|t| t.latent[0]).collect();
    let time: Vec<f64> = out.truth.iter().map(|t| t.event_time).collect();
    let tau = common::kendall_tau(&level, &time);
    assert!(tau < 0.0, "tau {tau}");
}

#[test]
fn larger_beta_raises_event_rate_among_high_levels() {
    let rate = |b: f64| {
        let out = generate_with_truth(&config(4_000, 13, vec![b, 0.0])).unwrap();
        let high: Vec<_> = out.truth.iter().filter(|t| t.latent[0] > 0.0).collect();
        high.iter().filter(|t| t.event_observed).count() as f64 / high.len() as f64
    };
    let rates: Vec<f64> = [0.0, 0.5, 1.0].into_iter().map(rate).collect();
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
}

#[test]
fn same_seed_gives_identical_latents_across_beta() {
    let a = generate_with_truth(&config(300, 14, vec![0.2, 0.0])).unwrap();
    let b = generate_with_truth(&config(300, 14, vec![0.9, 0.0])).unwrap();
    for (x, y) in a.truth.iter().zip(&b.truth) {
        assert_eq!(x.latent, y.latent);
        if x.latent[0] > 0.0 {
            assert!(y.event_time <= x.event_time);
        }
    }
}

#[test]
fn stream_is_canonical_and_reingests_cleanly() {
    let cfg = config(500, 15, vec![0.5, -0.3]);
    let events = generate(&cfg).unwrap();
    let mut buf = Vec::new();
    write_events_csv(&mut buf, &events).unwrap();
    let back = read_events_csv(buf.as_slice()).unwrap();
    assert!(back.malformed.is_empty());
    assert_eq!(back.events, events);
    let flattened: Vec<_> = build_histories(events.clone())
        .into_iter()
        .flat_map(|h| h.into_events())
        .collect();
    assert_eq!(flattened, events);
    assert_eq!(ground_truth(&cfg), vec![("F0".into(), 0.5), ("F1".into(), -0.3)]);
}

#[test]
fn ineligible_patients_fail_their_planted_criterion() {
    let cfg = config(1_000, 16, vec![0.4]);
    let out = generate_with_truth(&cfg).unwrap();
    let cohort = hazardlab::cohort::build_cohort(&build_histories(out.events), &CohortCriteria::default());
    let reasons: HashMap<&str, ExclusionReason> = cohort
        .exclusions
        .iter()
        .map(|x| (x.patient_id.as_str(), x.reason))
        .collect();
    let members: HashMap<&str, _> = cohort.members.iter().map(|m| (m.patient_id.as_str(), m)).collect();
    for t in &out.truth {
        match t.failed_criterion {
            Some(c) => assert_eq!(reasons.get(t.patient_id.as_str()), Some(&ExclusionReason::Unmet(c))),
            None => {
                let m = members[t.patient_id.as_str()];
                assert_eq!(m.first_diagnosis_date, t.first_diagnosis_date);
                assert_eq!(m.event_observed, t.event_observed);
            }
        }
    }
}
