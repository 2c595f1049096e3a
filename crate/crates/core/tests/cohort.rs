mod common;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use hazardlab::cohort::{admit, build_cohort, codes, CohortCriteria, CohortMember, ExclusionReason};
use hazardlab::emr_store::{ClinicalEvent, CodeSystem, EventKind, PatientHistory};
use hazardlab::synth::SynthConfig;
use proptest::prelude::*;

fn event(day: i64, kind: EventKind, code: &str, value: Option<f64>) -> ClinicalEvent {
    let base = Utc.with_ymd_and_hms(2005, 1, 1, 0, 0, 0).unwrap();
    ClinicalEvent {
        patient_id: "p".into(),
        timestamp: base + Duration::days(day),
        kind,
        code_system: if kind == EventKind::Observation { CodeSystem::Loinc } else { CodeSystem::Snomed },
        code: code.into(),
        value,
        unit: None,
    }
}

fn event_strategy() -> impl Strategy<Value = ClinicalEvent> {
    let dx = Just((EventKind::Diagnosis, codes::T2DM_SNOMED));
    let rf = Just((EventKind::Diagnosis, codes::CHRONIC_RF_SNOMED));
    let enc = Just((EventKind::Encounter, codes::T2DM_SNOMED));
    let visit = Just((EventKind::Encounter, codes::ROUTINE_VISIT));
    let lab = Just((EventKind::Observation, codes::HBA1C_LOINC));
    (prop_oneof![dx, rf, enc, visit, lab], -800i64..800, 4.0f64..9.0).prop_map(|((kind, code), day, v)| {
        event(day, kind, code, (kind == EventKind::Observation).then_some(v))
    })
}

proptest! {
    #[test]
    fn admission_is_monotone_in_events(
        base in prop::collection::vec(event_strategy(), 0..25),
        extra in prop::collection::vec(event_strategy(), 0..10),
    ) {
        let criteria = CohortCriteria::default();
        let before = PatientHistory::new("p", base.clone());
        if let Ok(a) = admit(&before, &criteria) {
            let after = PatientHistory::new("p", base.into_iter().chain(extra).collect());
            let b = admit(&after, &criteria);
            prop_assert!(b.is_ok());
            prop_assert!(b.unwrap().first_diagnosis_date() <= a.first_diagnosis_date());
        }
    }
}

/// Re-derives admission and outcome from the raw history with the criteria
/// written out directly.
fn audit(member: &CohortMember, h: &PatientHistory, c: &CohortCriteria) {
    let in_window = |e: &&ClinicalEvent| c.study_start <= e.date() && e.date() <= c.study_end;
    let fd = member.first_diagnosis_date;
    assert!(c.study_start <= fd && fd <= c.study_end);
    let evs: Vec<&ClinicalEvent> = h.events().iter().filter(in_window).filter(|e| e.date() <= fd).collect();
    let dx_days: Vec<NaiveDate> = evs
        .iter()
        .filter(|e| e.kind == EventKind::Diagnosis && c.t2dm_diagnosis_codes.contains(&e.code))
        .map(|e| e.date())
        .collect();
    assert!(!dx_days.is_empty(), "{}: no diagnosis by {fd}", member.patient_id);
    assert!(
        evs.iter().any(|e| e.kind == EventKind::Observation
            && c.hba1c_codes.contains(&e.code)
            && e.value.unwrap() >= c.hba1c_threshold),
        "{}: no abnormal HbA1c by {fd}",
        member.patient_id
    );
    let encounters = evs
        .iter()
        .filter(|e| {
            e.kind == EventKind::Encounter && (c.t2dm_diagnosis_codes.contains(&e.code) || dx_days.contains(&e.date()))
        })
        .count();
    assert!(encounters >= c.min_encounters, "{}: {encounters} encounters", member.patient_id);
    // One day earlier at least one criterion must still be unmet.
    let day_before: Vec<&&ClinicalEvent> = evs.iter().filter(|e| e.date() < fd).collect();
    let dx_before = day_before.iter().any(|e| e.kind == EventKind::Diagnosis && c.t2dm_diagnosis_codes.contains(&e.code));
    let lab_before = day_before.iter().any(|e| {
        e.kind == EventKind::Observation && c.hba1c_codes.contains(&e.code) && e.value.unwrap() >= c.hba1c_threshold
    });
    let enc_before = day_before
        .iter()
        .filter(|e| {
            e.kind == EventKind::Encounter && (c.t2dm_diagnosis_codes.contains(&e.code) || dx_days.contains(&e.date()))
        })
        .count()
        >= c.min_encounters;
    assert!(!(dx_before && lab_before && enc_before), "{}: admitted late", member.patient_id);

    let rf: Vec<i64> = h
        .events()
        .iter()
        .filter(|e| e.kind != EventKind::Observation && c.rf_outcome_codes.contains(&e.code))
        .map(|e| (e.date() - fd).num_days())
        .collect();
    assert!(rf.iter().all(|&d| d > 0), "{}: prevalent outcome admitted", member.patient_id);
    if member.event_observed {
        assert!(member.outcome_time_days > 0);
        assert_eq!(rf.iter().min().copied(), Some(i64::from(member.outcome_time_days)));
    } else {
        assert!(rf.is_empty());
        assert_eq!(i64::from(member.outcome_time_days), (h.last_seen().date_naive() - fd).num_days());
    }
}

#[test]
fn synthetic_members_are_auditable_and_exclusions_complete() {
    let codes: Vec<String> = (0..3).map(|j| format!("F{j}")).collect();
    let cfg = SynthConfig::new(1_500, 21, codes, vec![0.5, 0.0, -0.3]);
    let criteria = CohortCriteria::default();
    let s = common::synth_cohort(&cfg, &criteria);
    assert_eq!(s.cohort.members.len() + s.cohort.exclusions.len(), s.histories.len());
    assert!(!s.cohort.members.is_empty());
    let by_id: std::collections::HashMap<&str, &PatientHistory> =
        s.histories.iter().map(|h| (h.patient_id.as_str(), h)).collect();
    for m in &s.cohort.members {
        audit(m, by_id[m.patient_id.as_str()], &criteria);
    }
    for x in &s.cohort.exclusions {
        let h = by_id[x.patient_id.as_str()];
        let admitted = admit(h, &criteria);
        match x.reason {
            ExclusionReason::PriorOutcome => assert!(admitted.is_ok()),
            reason => assert_eq!(admitted.unwrap_err().reason, reason),
        }
    }
}

#[test]
fn outcome_on_diagnosis_day_is_prior() {
    let mut events = vec![
        event(0, EventKind::Diagnosis, codes::T2DM_SNOMED, None),
        event(0, EventKind::Observation, codes::HBA1C_LOINC, Some(6.1)),
    ];
    for d in [0, 10, 20] {
        events.push(event(d, EventKind::Encounter, codes::T2DM_SNOMED, None));
    }
    events.push(event(20, EventKind::Diagnosis, codes::ACUTE_RF_SNOMED, None));
    let cohort = build_cohort(&[PatientHistory::new("p", events)], &CohortCriteria::default());
    assert!(cohort.members.is_empty());
    assert_eq!(cohort.exclusions[0].reason, ExclusionReason::PriorOutcome);
}
