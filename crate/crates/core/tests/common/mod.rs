//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! into the library's likelihood or solver code.
#![allow(dead_code)]

use std::path::PathBuf;

use hazardlab::cohort::{build_cohort, Cohort};
use hazardlab::emr_store::{build_histories, PatientHistory};
use hazardlab::pipeline::PipelineConfig;
use hazardlab::synth::{self, SynthConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn desk_config_path() -> PathBuf {
    workspace_root().join("configs/desk.json")
}

/// The desk config with its seed (and generator seed) replaced.
pub fn desk_config(seed: u64) -> PipelineConfig {
    let mut config = PipelineConfig::load(&desk_config_path()).expect("desk config loads");
    config.override_seed(seed);
    config
}

fn linear_predictors(x: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
}

fn distinct_event_times(t: &[f64], e: &[bool]) -> Vec<f64> {
    let mut times: Vec<f64> = (0..t.len()).filter(|&i| e[i]).map(|i| t[i]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Efron negative log partial likelihood summed term by term over distinct
/// event times.
pub fn efron_oracle(x: &[Vec<f64>], t: &[f64], e: &[bool], beta: &[f64]) -> f64 {
    let eta = linear_predictors(x, beta);
    let mut nll = 0.0;
    for tj in distinct_event_times(t, e) {
        let tied: Vec<usize> = (0..t.len()).filter(|&i| e[i] && t[i] == tj).collect();
        let risk: f64 = (0..t.len()).filter(|&i| t[i] >= tj).map(|i| eta[i].exp()).sum();
        let tied_sum: f64 = tied.iter().map(|&i| eta[i].exp()).sum();
        let m = tied.len() as f64;
        for &i in &tied {
            nll -= eta[i];
        }
        for l in 0..tied.len() {
            nll += (risk - l as f64 / m * tied_sum).ln();
        }
    }
    nll
}

/// Breslow form: every tied event sees the full risk set.
pub fn breslow_oracle(x: &[Vec<f64>], t: &[f64], e: &[bool], beta: &[f64]) -> f64 {
    let eta = linear_predictors(x, beta);
    (0..t.len())
        .filter(|&i| e[i])
        .map(|i| {
            let risk: f64 = (0..t.len()).filter(|&k| t[k] >= t[i]).map(|k| eta[k].exp()).sum();
            risk.ln() - eta[i]
        })
        .sum()
}

/// Unpenalized Cox MLE for untied data by Newton's method with step halving,
/// using the textbook score and information of the standard partial
/// likelihood.
pub fn newton_cox_oracle(x: &[Vec<f64>], t: &[f64], e: &[bool]) -> Vec<f64> {
    let n = t.len();
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let eta = linear_predictors(x, &beta);
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in (0..n).filter(|&i| e[i]) {
            let risk: Vec<usize> = (0..n).filter(|&k| t[k] >= t[i]).collect();
            let s0: f64 = risk.iter().map(|&k| eta[k].exp()).sum();
            let mut xbar = DVector::zeros(p);
            let mut s2 = DMatrix::zeros(p, p);
            for &k in &risk {
                let w = eta[k].exp() / s0;
                let xk = DVector::from_column_slice(&x[k]);
                xbar += &xk * w;
                s2 += &xk * xk.transpose() * w;
            }
            score += DVector::from_column_slice(&x[i]) - &xbar;
            info += s2 - &xbar * xbar.transpose();
        }
        let step = info.lu().solve(&score).expect("information matrix is invertible");
        let current = efron_oracle(x, t, e, &beta);
        let mut scale = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            if efron_oracle(x, t, e, &next) <= current || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        let moved = beta.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if moved < 1e-13 {
            break;
        }
    }
    beta
}

/// Central finite difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of |a - n| / max(|n|, 1).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Random survival data with `n` subjects, `p` standard normal covariates
/// and either distinct or heavily tied integer durations.
pub fn random_survival(rng: &mut ChaCha8Rng, n: usize, p: usize, tied: bool) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
    use rand_distr::{Distribution, StandardNormal};
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let t: Vec<f64> = (0..n)
        .map(|i| {
            if tied {
                f64::from(rng.random_range(1..=(n as u32 / 3).max(2)))
            } else {
                i as f64 + 1.0 + rng.random::<f64>() * 0.5
            }
        })
        .collect();
    let mut e: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    e[0] = true;
    (x, t, e)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kendall's tau-a between two samples.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let prod = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            s += prod as i64;
        }
    }
    s as f64 / (n * (n - 1) / 2) as f64
}

/// One-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// F1 of a recovered code set against the planted nonzero set.
pub fn support_f1(recovered: &[String], planted: &[String]) -> f64 {
    let tp = recovered.iter().filter(|c| planted.contains(c)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / recovered.len() as f64;
    let recall = tp / planted.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub struct SynthCohort {
    pub histories: Vec<PatientHistory>,
    pub cohort: Cohort,
}

pub fn synth_cohort(config: &SynthConfig, criteria: &hazardlab::cohort::CohortCriteria) -> SynthCohort {
    let events = synth::generate(config).expect("generator runs");
    let histories = build_histories(events);
    let cohort = build_cohort(&histories, criteria);
    SynthCohort { histories, cohort }
}

/// Recomputes every window row from raw history events dated strictly
/// before the row's prediction start and compares it with the stored
/// features, then checks labels and per-patient row shape.
pub fn verify_windows(
    members: &[hazardlab::cohort::CohortMember],
    histories: &[PatientHistory],
    data: &hazardlab::features::WindowDataset,
) -> Result<(), String> {
    use std::collections::HashMap;
    use hazardlab::emr_store::EventKind;

    let by_id: HashMap<&str, &PatientHistory> = histories.iter().map(|h| (h.patient_id.as_str(), h)).collect();
    let member: HashMap<&str, _> = members.iter().map(|m| (m.patient_id.as_str(), m)).collect();
    let obs = i64::from(data.params.observation_days());
    let pred = i64::from(data.params.prediction_days());
    let mut raw: Vec<Vec<Option<f64>>> = Vec::with_capacity(data.n_rows());
    for r in &data.rows {
        let m = member[r.patient_id.as_str()];
        let start = i64::from(r.start_day);
        let pred_start = start + obs;
        let end = i64::from(m.outcome_time_days);
        if pred_start >= end {
            return Err(format!("{}: window at day {start} reaches past the outcome", r.patient_id));
        }
        let positive = m.event_observed && end < pred_start + pred;
        if (r.label > 0.0) != positive {
            return Err(format!("{}: wrong label at day {start}", r.patient_id));
        }
        let h = by_id[r.patient_id.as_str()];
        raw.push(
            data.factor_codes
                .iter()
                .map(|code| {
                    let vals: Vec<f64> = h
                        .events()
                        .iter()
                        .filter(|e| e.kind == EventKind::Observation && &e.code == code)
                        .filter(|e| {
                            let d = (e.date() - m.first_diagnosis_date).num_days();
                            start <= d && d < pred_start
                        })
                        .map(|e| e.value.unwrap())
                        .collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect(),
        );
    }
    for (j, stats) in data.standardization.iter().enumerate() {
        let observed: Vec<f64> = raw.iter().filter_map(|r| r[j]).collect();
        let fill = if observed.is_empty() { 0.0 } else { observed.iter().sum::<f64>() / observed.len() as f64 };
        for (i, row) in data.rows.iter().enumerate() {
            let want = stats.apply(raw[i][j].unwrap_or(fill));
            if row.features[j] != want {
                return Err(format!("row {i} factor {j}: stored {} rebuilt {want}", row.features[j]));
            }
        }
    }
    let mut seen_positive: std::collections::HashSet<&str> = Default::default();
    for r in &data.rows {
        if seen_positive.contains(r.patient_id.as_str()) {
            return Err(format!("{}: rows after the positive window", r.patient_id));
        }
        if r.label > 0.0 {
            seen_positive.insert(r.patient_id.as_str());
        }
    }
    Ok(())
}
