//! Three-criteria T2DM cohort definition and renal-failure outcome labelling.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::emr_store::{EventKind, PatientHistory};
use crate::error::{HazardError, Result};

/// Default code values used by the synthetic generator and default criteria.
pub mod codes {
    /// Diabetes mellitus type 2.
    pub const T2DM_SNOMED: &str = "44054006";
    /// Hemoglobin A1c/Hemoglobin.total in Blood.
    pub const HBA1C_LOINC: &str = "4548-4";
    pub const ACUTE_RF_SNOMED: &str = "14669001";
    pub const CHRONIC_RF_SNOMED: &str = "90688005";
    pub const ROUTINE_VISIT: &str = "VISIT";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortCriteria {
    pub t2dm_diagnosis_codes: BTreeSet<String>,
    pub hba1c_codes: BTreeSet<String>,
    #[serde(default = "default_threshold")]
    pub hba1c_threshold: f64,
    #[serde(default = "default_min_encounters")]
    pub min_encounters: usize,
    #[serde(default = "default_study_start")]
    pub study_start: NaiveDate,
    #[serde(default = "default_study_end")]
    pub study_end: NaiveDate,
    pub rf_outcome_codes: BTreeSet<String>,
}

fn default_threshold() -> f64 {
    5.7
}
fn default_min_encounters() -> usize {
    3
}
fn default_study_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date")
}
fn default_study_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 12, 31).expect("valid date")
}

impl Default for CohortCriteria {
    fn default() -> Self {
        CohortCriteria {
            t2dm_diagnosis_codes: [codes::T2DM_SNOMED.to_string()].into(),
            hba1c_codes: [codes::HBA1C_LOINC.to_string()].into(),
            hba1c_threshold: default_threshold(),
            min_encounters: default_min_encounters(),
            study_start: default_study_start(),
            study_end: default_study_end(),
            rf_outcome_codes: [
                codes::ACUTE_RF_SNOMED.to_string(),
                codes::CHRONIC_RF_SNOMED.to_string(),
            ]
            .into(),
        }
    }
}

impl CohortCriteria {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HazardError::Config(format!("cohort criteria: {m}")));
        if !(self.hba1c_threshold > 0.0) {
            return bad("hba1c_threshold must be positive");
        }
        if self.min_encounters < 1 {
            return bad("min_encounters must be at least 1");
        }
        if self.study_start >= self.study_end {
            return bad("study_start must precede study_end");
        }
        if self.t2dm_diagnosis_codes.is_empty()
            || self.hba1c_codes.is_empty()
            || self.rf_outcome_codes.is_empty()
        {
            return bad("code sets must be non-empty");
        }
        Ok(())
    }

    fn in_window(&self, date: NaiveDate) -> bool {
        self.study_start <= date && date <= self.study_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Diagnosis,
    Hba1c,
    Encounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExclusionReason {
    Unmet(Criterion),
    PriorOutcome,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::Unmet(Criterion::Diagnosis) => "diagnosis",
            ExclusionReason::Unmet(Criterion::Hba1c) => "hba1c",
            ExclusionReason::Unmet(Criterion::Encounters) => "encounters",
            ExclusionReason::PriorOutcome => "prior_outcome",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: ExclusionReason,
}

/// A patient meeting all three entry criteria, before outcome labelling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admitted {
    pub patient_id: String,
    pub diagnosis_date: NaiveDate,
    pub hba1c_date: NaiveDate,
    pub encounters_date: NaiveDate,
}

impl Admitted {
    /// The date the last outstanding criterion was met.
    pub fn first_diagnosis_date(&self) -> NaiveDate {
        self.diagnosis_date.max(self.hba1c_date).max(self.encounters_date)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortMember {
    pub patient_id: String,
    pub first_diagnosis_date: NaiveDate,
    pub outcome_time_days: u32,
    pub event_observed: bool,
}

/// Applies the entry criteria. Each criterion's date is the earliest date it
/// holds within the study window.
pub fn admit(history: &PatientHistory, criteria: &CohortCriteria) -> std::result::Result<Admitted, Exclusion> {
    let exclude = |c| Exclusion {
        patient_id: history.patient_id.clone(),
        reason: ExclusionReason::Unmet(c),
    };
    let in_window = history
        .events()
        .iter()
        .filter(|e| criteria.in_window(e.date()));

    let dx_days: BTreeSet<NaiveDate> = in_window
        .clone()
        .filter(|e| e.kind == EventKind::Diagnosis && criteria.t2dm_diagnosis_codes.contains(&e.code))
        .map(|e| e.date())
        .collect();
    let diagnosis_date = *dx_days.iter().next().ok_or_else(|| exclude(Criterion::Diagnosis))?;

    let hba1c_date = in_window
        .clone()
        .find(|e| {
            e.kind == EventKind::Observation
                && criteria.hba1c_codes.contains(&e.code)
                && e.value.is_some_and(|v| v >= criteria.hba1c_threshold)
        })
        .map(|e| e.date())
        .ok_or_else(|| exclude(Criterion::Hba1c))?;

    let encounters_date = in_window
        .filter(|e| {
            e.kind == EventKind::Encounter
                && (criteria.t2dm_diagnosis_codes.contains(&e.code) || dx_days.contains(&e.date()))
        })
        .nth(criteria.min_encounters - 1)
        .map(|e| e.date())
        .ok_or_else(|| exclude(Criterion::Encounters))?;

    Ok(Admitted {
        patient_id: history.patient_id.clone(),
        diagnosis_date,
        hba1c_date,
        encounters_date,
    })
}

/// Labels the renal-failure outcome. Outcomes on or before the first
/// diagnosis date exclude the patient as prevalent cases.
pub fn label_outcome(
    admitted: &Admitted,
    history: &PatientHistory,
    criteria: &CohortCriteria,
) -> std::result::Result<CohortMember, Exclusion> {
    let fd = admitted.first_diagnosis_date();
    let first_rf = history
        .events()
        .iter()
        .find(|e| e.kind != EventKind::Observation && criteria.rf_outcome_codes.contains(&e.code));
    let (days, event_observed) = match first_rf {
        Some(e) => {
            let days = (e.date() - fd).num_days();
            if days <= 0 {
                return Err(Exclusion {
                    patient_id: history.patient_id.clone(),
                    reason: ExclusionReason::PriorOutcome,
                });
            }
            (days, true)
        }
        None => ((history.last_seen().date_naive() - fd).num_days().max(0), false),
    };
    Ok(CohortMember {
        patient_id: history.patient_id.clone(),
        first_diagnosis_date: fd,
        outcome_time_days: u32::try_from(days).unwrap_or(u32::MAX),
        event_observed,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub members: Vec<CohortMember>,
    pub exclusions: Vec<Exclusion>,
}

pub fn build_cohort(histories: &[PatientHistory], criteria: &CohortCriteria) -> Cohort {
    use rayon::prelude::*;
    let results: Vec<_> = histories
        .par_iter()
        .map(|h| admit(h, criteria).and_then(|a| label_outcome(&a, h, criteria)))
        .collect();
    let mut cohort = Cohort::default();
    for r in results {
        match r {
            Ok(m) => cohort.members.push(m),
            Err(x) => cohort.exclusions.push(x),
        }
    }
    cohort
}

pub fn write_members_csv<W: Write>(writer: W, members: &[CohortMember]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["patient_id", "first_diagnosis_date", "outcome_time_days", "event_observed"])?;
    for m in members {
        wtr.write_record([
            m.patient_id.as_str(),
            &m.first_diagnosis_date.to_string(),
            &m.outcome_time_days.to_string(),
            if m.event_observed { "true" } else { "false" },
        ])?;
    }
    wtr.flush().map_err(|e| HazardError::io("<members csv>", e))?;
    Ok(())
}

pub fn read_members_csv<R: Read>(reader: R) -> Result<Vec<CohortMember>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(HazardError::from)).collect()
}

pub fn write_exclusions_csv<W: Write>(writer: W, exclusions: &[Exclusion]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["patient_id", "reason"])?;
    for x in exclusions {
        wtr.write_record([x.patient_id.as_str(), x.reason.as_str()])?;
    }
    wtr.flush().map_err(|e| HazardError::io("<exclusions csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emr_store::{parse_timestamp, ClinicalEvent, CodeSystem};

    fn ev(day: &str, kind: EventKind, code: &str, value: Option<f64>) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: "p1".into(),
            timestamp: parse_timestamp(&format!("{day}T09:00:00Z")).unwrap(),
            kind,
            code_system: CodeSystem::Snomed,
            code: code.into(),
            value,
            unit: None,
        }
    }

    fn base() -> Vec<ClinicalEvent> {
        vec![
            ev("2005-01-01", EventKind::Diagnosis, codes::T2DM_SNOMED, None),
            ev("2005-01-02", EventKind::Observation, codes::HBA1C_LOINC, Some(6.1)),
            ev("2005-01-01", EventKind::Encounter, codes::T2DM_SNOMED, None),
            ev("2005-02-01", EventKind::Encounter, codes::T2DM_SNOMED, None),
            ev("2005-03-01", EventKind::Encounter, codes::T2DM_SNOMED, None),
        ]
    }

    fn history(evs: Vec<ClinicalEvent>) -> PatientHistory {
        PatientHistory::new("p1", evs)
    }

    #[test]
    fn admits_when_all_three_hold() {
        let crit = CohortCriteria::default();
        let a = admit(&history(base()), &crit).unwrap();
        assert_eq!(a.first_diagnosis_date(), NaiveDate::from_ymd_opt(2005, 3, 1).unwrap());
    }

    #[test]
    fn low_hba1c_excluded() {
        let mut evs = base();
        evs[1].value = Some(5.5);
        let x = admit(&history(evs), &CohortCriteria::default()).unwrap_err();
        assert_eq!(x.reason, ExclusionReason::Unmet(Criterion::Hba1c));
        let mut evs = base();
        evs[1].value = Some(5.7);
        assert!(admit(&history(evs), &CohortCriteria::default()).is_ok());
    }

    #[test]
    fn two_encounters_excluded() {
        let mut evs = base();
        evs.pop();
        let x = admit(&history(evs), &CohortCriteria::default()).unwrap_err();
        assert_eq!(x.reason.as_str(), "encounters");
    }

    #[test]
    fn same_day_encounter_counts_as_diabetes_related() {
        let mut evs = base();
        evs.pop();
        evs.push(ev("2005-01-01", EventKind::Encounter, "VISIT", None));
        let a = admit(&history(evs), &CohortCriteria::default()).unwrap();
        assert_eq!(a.first_diagnosis_date(), NaiveDate::from_ymd_opt(2005, 2, 1).unwrap());
    }

    #[test]
    fn out_of_window_diagnosis_ignored() {
        let mut evs = base();
        evs[0] = ev("1985-01-01", EventKind::Diagnosis, codes::T2DM_SNOMED, None);
        let x = admit(&history(evs), &CohortCriteria::default()).unwrap_err();
        assert_eq!(x.reason, ExclusionReason::Unmet(Criterion::Diagnosis));
    }

    #[test]
    fn outcome_labelling() {
        let crit = CohortCriteria::default();
        let fd = NaiveDate::from_ymd_opt(2005, 3, 1).unwrap();
        let day = |d: i64| (fd + chrono::Duration::days(d)).to_string();

        let mut evs = base();
        evs.push(ev(&day(400), EventKind::Diagnosis, codes::CHRONIC_RF_SNOMED, None));
        let h = history(evs);
        let m = label_outcome(&admit(&h, &crit).unwrap(), &h, &crit).unwrap();
        assert_eq!((m.outcome_time_days, m.event_observed), (400, true));

        let mut evs = base();
        evs.push(ev(&day(900), EventKind::Encounter, "VISIT", None));
        let h = history(evs);
        let m = label_outcome(&admit(&h, &crit).unwrap(), &h, &crit).unwrap();
        assert_eq!((m.outcome_time_days, m.event_observed), (900, false));

        let mut evs = base();
        evs.push(ev(&day(-10), EventKind::Diagnosis, codes::ACUTE_RF_SNOMED, None));
        let h = history(evs);
        let x = label_outcome(&admit(&h, &crit).unwrap(), &h, &crit).unwrap_err();
        assert_eq!(x.reason, ExclusionReason::PriorOutcome);
    }

    #[test]
    fn criteria_validation() {
        let mut c = CohortCriteria::default();
        c.min_encounters = 0;
        assert!(c.validate().is_err());
        let mut c = CohortCriteria::default();
        c.study_end = c.study_start;
        assert!(c.validate().is_err());
        assert!(CohortCriteria::default().validate().is_ok());
    }
}
