//! Synthetic longitudinal event streams with a planted proportional-hazards
//! structure.
//!
//! Each patient gets latent factor levels `z`, an event time drawn from a
//! Weibull baseline under proportional hazards,
//! `T = scale * (-ln U / exp(z . beta))^(1 / shape)`, and an independent
//! uniform censoring time. Labs are emitted at routine visits as
//! `mean + sd * (z + noise)`.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{codes, Criterion};
use crate::emr_store::{ClinicalEvent, CodeSystem, EventKind, PatientHistory};
use crate::error::{HazardError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorProfile {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
    /// Binary factors take latent levels -1/+1 and are reported as 0/1
    /// without measurement noise.
    #[serde(default)]
    pub binary: bool,
}

impl Default for FactorProfile {
    fn default() -> Self {
        FactorProfile {
            mean: 0.0,
            sd: 1.0,
            binary: false,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCodes {
    pub t2dm_diagnosis: String,
    pub hba1c: String,
    pub rf_outcomes: Vec<String>,
    pub visit: String,
}

impl Default for SynthCodes {
    fn default() -> Self {
        SynthCodes {
            t2dm_diagnosis: codes::T2DM_SNOMED.into(),
            hba1c: codes::HBA1C_LOINC.into(),
            rf_outcomes: vec![codes::ACUTE_RF_SNOMED.into(), codes::CHRONIC_RF_SNOMED.into()],
            visit: codes::ROUTINE_VISIT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub factor_codes: Vec<String>,
    pub true_beta: Vec<f64>,
    #[serde(default)]
    pub expert_codes: Vec<String>,
    /// Weibull shape `k`.
    pub baseline_shape: f64,
    /// Weibull scale in days.
    pub baseline_scale: f64,
    pub censor_rate: f64,
    pub observation_noise_sd: f64,
    /// Fraction of patients generated to satisfy every cohort criterion.
    #[serde(default = "default_eligible_fraction")]
    pub eligible_fraction: f64,
    /// Administrative follow-up horizon after first diagnosis, in days.
    #[serde(default = "default_followup_days")]
    pub followup_days: f64,
    #[serde(default = "default_visit_gap")]
    pub visit_gap_days: (u32, u32),
    #[serde(default = "default_observation_probability")]
    pub observation_probability: f64,
    #[serde(default = "default_study_start")]
    pub study_start: NaiveDate,
    #[serde(default = "default_enrollment_span")]
    pub enrollment_span_days: u32,
    #[serde(default)]
    pub profiles: BTreeMap<String, FactorProfile>,
    #[serde(default)]
    pub codes: SynthCodes,
}

fn default_eligible_fraction() -> f64 {
    0.9
}
fn default_followup_days() -> f64 {
    3650.0
}
fn default_visit_gap() -> (u32, u32) {
    (20, 40)
}
fn default_observation_probability() -> f64 {
    0.6
}
fn default_study_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(1995, 1, 1).expect("valid date")
}
fn default_enrollment_span() -> u32 {
    8 * 365
}

impl SynthConfig {
    /// A config with default timing and profiles for the given factors.
    pub fn new(n_patients: usize, seed: u64, factor_codes: Vec<String>, true_beta: Vec<f64>) -> Self {
        SynthConfig {
            n_patients,
            seed,
            factor_codes,
            true_beta,
            expert_codes: Vec::new(),
            baseline_shape: 1.5,
            baseline_scale: 2000.0,
            censor_rate: 0.3,
            observation_noise_sd: 0.5,
            eligible_fraction: default_eligible_fraction(),
            followup_days: default_followup_days(),
            visit_gap_days: default_visit_gap(),
            observation_probability: default_observation_probability(),
            study_start: default_study_start(),
            enrollment_span_days: default_enrollment_span(),
            profiles: BTreeMap::new(),
            codes: SynthCodes::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HazardError::Config(format!("synth: {m}")));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.true_beta.len() != self.factor_codes.len() {
            return bad(format!(
                "true_beta has {} entries but factor_codes has {}",
                self.true_beta.len(),
                self.factor_codes.len()
            ));
        }
        if self.true_beta.iter().any(|b| !b.is_finite()) {
            return bad("true_beta must be finite".into());
        }
        if !(self.baseline_shape > 0.0) || !(self.baseline_scale > 0.0) {
            return bad("baseline shape and scale must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.censor_rate) {
            return bad("censor_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eligible_fraction) {
            return bad("eligible_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.observation_probability) {
            return bad("observation_probability must lie in [0, 1]".into());
        }
        if !(self.observation_noise_sd >= 0.0) {
            return bad("observation_noise_sd must be non-negative".into());
        }
        if !(self.followup_days > 0.0) {
            return bad("followup_days must be positive".into());
        }
        let (lo, hi) = self.visit_gap_days;
        if lo == 0 || lo > hi {
            return bad("visit_gap_days must satisfy 0 < min <= max".into());
        }
        if let Some(c) = self.expert_codes.iter().find(|c| !self.factor_codes.contains(c)) {
            return bad(format!("expert code {c} is not among factor_codes"));
        }
        if self.codes.rf_outcomes.is_empty() {
            return bad("at least one renal-failure outcome code is required".into());
        }
        Ok(())
    }

    fn profile(&self, code: &str) -> FactorProfile {
        self.profiles.get(code).cloned().unwrap_or_default()
    }
}

/// What the generator actually drew for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTruth {
    pub patient_id: String,
    /// Latent levels aligned with `factor_codes`.
    pub latent: Vec<f64>,
    /// Uncensored event time in days after first diagnosis.
    pub event_time: f64,
    /// Follow-up end in days after first diagnosis when no event occurs.
    pub censor_time: f64,
    pub event_observed: bool,
    /// `None` when the patient was generated to meet every cohort criterion.
    pub failed_criterion: Option<Criterion>,
    pub first_diagnosis_date: NaiveDate,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub events: Vec<ClinicalEvent>,
    pub truth: Vec<PatientTruth>,
}

/// Generates the canonical event stream (sorted by patient, then time).
pub fn generate(config: &SynthConfig) -> Result<Vec<ClinicalEvent>> {
    Ok(generate_with_truth(config)?.events)
}

/// Planted coefficients in `factor_codes` order.
pub fn ground_truth(config: &SynthConfig) -> Vec<(String, f64)> {
    config
        .factor_codes
        .iter()
        .cloned()
        .zip(config.true_beta.iter().copied())
        .collect()
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:07}")
}

pub fn generate_with_truth(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let profiles: Vec<FactorProfile> = config.factor_codes.iter().map(|c| config.profile(c)).collect();
    let per_patient: Vec<(Vec<ClinicalEvent>, PatientTruth)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, &profiles, i))
        .collect();
    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(per_patient.len());
    for (evs, t) in per_patient {
        events.extend(evs);
        truth.push(t);
    }
    Ok(SynthOutput { events, truth })
}

/// Inverse-transform draw from the proportional-hazards Weibull model.
pub fn weibull_ph_time(u: f64, linear_predictor: f64, shape: f64, scale: f64) -> f64 {
    scale * (-u.ln() / linear_predictor.exp()).powf(1.0 / shape)
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

struct Emitter<'a> {
    pid: &'a str,
    events: Vec<ClinicalEvent>,
}

impl Emitter<'_> {
    fn push(
        &mut self,
        date: NaiveDate,
        hour: u32,
        kind: EventKind,
        system: CodeSystem,
        code: &str,
        value: Option<f64>,
    ) {
        let ts = date
            .and_time(NaiveTime::from_hms_opt(hour, 0, 0).expect("valid hour"))
            .and_utc();
        self.events.push(ClinicalEvent {
            patient_id: self.pid.to_string(),
            timestamp: ts,
            kind,
            code_system: system,
            code: code.to_string(),
            value,
            unit: None,
        });
    }
}

fn factor_system(code: &str) -> CodeSystem {
    // LOINC-shaped codes are digits with a check digit, e.g. 8277-6.
    let loinc_like = code
        .split_once('-')
        .is_some_and(|(a, b)| !a.is_empty() && a.chars().all(|c| c.is_ascii_digit()) && b.len() == 1);
    if loinc_like {
        CodeSystem::Loinc
    } else {
        CodeSystem::Local
    }
}

fn generate_patient(
    config: &SynthConfig,
    profiles: &[FactorProfile],
    index: usize,
) -> (Vec<ClinicalEvent>, PatientTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let pid = patient_id(index);

    let latent: Vec<f64> = profiles
        .iter()
        .map(|p| {
            if p.binary {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            } else {
                StandardNormal.sample(&mut rng)
            }
        })
        .collect();
    let lp: f64 = latent.iter().zip(&config.true_beta).map(|(z, b)| z * b).sum();
    let u = open_unit(&mut rng);
    let event_time = weibull_ph_time(u, lp, config.baseline_shape, config.baseline_scale);
    let censor_draw: f64 = rng.random();
    let censor_time = if rng.random_bool(config.censor_rate) {
        censor_draw * config.followup_days
    } else {
        config.followup_days
    };
    let event_observed = event_time <= censor_time;

    let failed_criterion = if rng.random_bool(config.eligible_fraction) {
        None
    } else {
        Some(match rng.random_range(0..3) {
            0 => Criterion::Diagnosis,
            1 => Criterion::Hba1c,
            _ => Criterion::Encounters,
        })
    };

    let codes = &config.codes;
    let mut out = Emitter {
        pid: &pid,
        events: Vec::new(),
    };
    let enroll = config.study_start
        + Duration::days(i64::from(rng.random_range(0..=config.enrollment_span_days)));

    if failed_criterion != Some(Criterion::Diagnosis) {
        out.push(enroll, 9, EventKind::Diagnosis, CodeSystem::Snomed, &codes.t2dm_diagnosis, None);
    }
    let hba1c_value = if failed_criterion == Some(Criterion::Hba1c) {
        5.0 + 0.6 * rng.random::<f64>()
    } else {
        6.0 + 1.5 * rng.random::<f64>()
    };
    out.push(
        enroll + Duration::days(1),
        10,
        EventKind::Observation,
        CodeSystem::Loinc,
        &codes.hba1c,
        Some((hba1c_value * 10.0).round() / 10.0),
    );
    let n_dm_encounters = if failed_criterion == Some(Criterion::Encounters) { 2 } else { 3 };
    let mut fd = enroll;
    for k in 0..n_dm_encounters {
        if k > 0 {
            fd += Duration::days(i64::from(rng.random_range(10..=40)));
        }
        out.push(fd, 9, EventKind::Encounter, CodeSystem::Snomed, &codes.t2dm_diagnosis, None);
    }
    if failed_criterion == Some(Criterion::Encounters) {
        // The anchor the remaining timeline hangs off.
        fd += Duration::days(i64::from(rng.random_range(10..=40)));
    }

    let end_day = if event_observed {
        event_time.ceil().max(1.0) as i64
    } else {
        censor_time.ceil().max(1.0) as i64
    };
    let cap_hba1c = failed_criterion == Some(Criterion::Hba1c);
    let (gap_lo, gap_hi) = config.visit_gap_days;
    let mut day = 0i64;
    loop {
        let last = day >= end_day;
        let visit_day = day.min(end_day);
        let date = fd + Duration::days(visit_day);
        // The event day is recorded by the outcome itself, without labs.
        if !(last && event_observed) {
            out.push(date, 9, EventKind::Encounter, CodeSystem::Local, &codes.visit, None);
            for ((code, profile), z) in config.factor_codes.iter().zip(profiles).zip(&latent) {
                if !rng.random_bool(config.observation_probability) {
                    continue;
                }
                let value = if profile.binary {
                    (z + 1.0) / 2.0
                } else {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let mut v = profile.mean + profile.sd * (z + config.observation_noise_sd * noise);
                    if cap_hba1c && code == &codes.hba1c {
                        v = v.min(5.6);
                    }
                    v
                };
                out.push(date, 10, EventKind::Observation, factor_system(code), code, Some(value));
            }
        }
        if last {
            break;
        }
        day += i64::from(rng.random_range(gap_lo..=gap_hi));
    }
    if event_observed {
        let date = fd + Duration::days(end_day);
        let code = &codes.rf_outcomes[rng.random_range(0..codes.rf_outcomes.len())];
        out.push(date, 12, EventKind::Encounter, CodeSystem::Local, &codes.visit, None);
        out.push(date, 12, EventKind::Diagnosis, CodeSystem::Snomed, code, None);
    }

    let events = PatientHistory::new(pid.clone(), out.events).into_events();
    let truth = PatientTruth {
        patient_id: pid,
        latent,
        event_time,
        censor_time,
        event_observed,
        failed_criterion,
        first_diagnosis_date: fd,
    };
    (events, truth)
}
