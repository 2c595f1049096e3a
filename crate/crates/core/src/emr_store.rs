//! Clinical event model, event-file ingestion and per-patient histories.
//!
//! Event files are CSV (header required) or newline-delimited JSON with the
//! columns `patient_id,timestamp,kind,code_system,code,value,unit`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{HazardError, Result};

/// Fraction of malformed rows above which ingestion fails outright.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

pub const CSV_HEADER: [&str; 7] = [
    "patient_id",
    "timestamp",
    "kind",
    "code_system",
    "code",
    "value",
    "unit",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    Observation,
    Encounter,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Diagnosis => "Diagnosis",
            EventKind::Observation => "Observation",
            EventKind::Encounter => "Encounter",
        })
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "Diagnosis" => Ok(EventKind::Diagnosis),
            "Observation" => Ok(EventKind::Observation),
            "Encounter" => Ok(EventKind::Encounter),
            other => Err(format!("unknown event kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeSystem {
    #[serde(rename = "SNOMED")]
    Snomed,
    #[serde(rename = "LOINC")]
    Loinc,
    #[serde(rename = "LOCAL")]
    Local,
}

impl CodeSystem {
    /// Parses a code-system name. Unknown names map to `LOCAL`; the second
    /// element reports whether that fallback happened.
    pub fn parse_lenient(s: &str) -> (CodeSystem, bool) {
        match s.trim().to_ascii_uppercase().as_str() {
            "SNOMED" => (CodeSystem::Snomed, false),
            "LOINC" => (CodeSystem::Loinc, false),
            "LOCAL" => (CodeSystem::Local, false),
            _ => (CodeSystem::Local, true),
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeSystem::Snomed => "SNOMED",
            CodeSystem::Loinc => "LOINC",
            CodeSystem::Local => "LOCAL",
        })
    }
}

/// One timestamped coded fact about a patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: String,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub code_system: CodeSystem,
    pub code: String,
    pub value: Option<f64>,
    pub unit: Option<String>,
}

impl ClinicalEvent {
    /// Checks the kind/value pairing and non-empty identifiers.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.patient_id.trim().is_empty() {
            return Err("empty patient_id".into());
        }
        if self.code.trim().is_empty() {
            return Err("empty code".into());
        }
        match (self.kind, self.value) {
            (EventKind::Observation, None) => Err("observation without value".into()),
            (EventKind::Observation, Some(v)) if !v.is_finite() => {
                Err("observation value is not finite".into())
            }
            (EventKind::Diagnosis | EventKind::Encounter, Some(_)) => {
                Err(format!("{} must not carry a value", self.kind))
            }
            _ => Ok(()),
        }
    }

    pub fn date(&self) -> NaiveDate {
        self.timestamp.date_naive()
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.timestamp
            .cmp(&other.timestamp)
            .then(self.kind.cmp(&other.kind))
            .then_with(|| self.code.cmp(&other.code))
            .then(self.code_system.cmp(&other.code_system))
            .then_with(|| match (self.value, other.value) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                (a, b) => a.is_some().cmp(&b.is_some()),
            })
            .then_with(|| self.unit.cmp(&other.unit))
            .then_with(|| self.patient_id.cmp(&other.patient_id))
    }
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Parses an ISO-8601 instant. Offsets are converted to UTC; naive
/// date-times and bare dates are taken as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let s = s.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f") {
        return Ok(naive.and_utc());
    }
    if let Ok(date) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(date.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    Err(format!("unparseable timestamp {s:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Ndjson,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> EventFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("ndjson") | Some("jsonl") => EventFormat::Ndjson,
            _ => EventFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRow {
    /// 1-based data row number (the CSV header is not counted).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub events: Vec<ClinicalEvent>,
    pub malformed: Vec<MalformedRow>,
    /// Rows whose code system was unknown and mapped to LOCAL.
    pub local_fallbacks: usize,
}

impl Ingested {
    pub fn total_rows(&self) -> usize {
        self.events.len() + self.malformed.len()
    }
}

fn parse_fields(fields: [&str; 7]) -> std::result::Result<(ClinicalEvent, bool), String> {
    let [patient_id, timestamp, kind, code_system, code, value, unit] = fields;
    let timestamp = parse_timestamp(timestamp)?;
    let kind: EventKind = kind.parse()?;
    let (code_system, fallback) = CodeSystem::parse_lenient(code_system);
    let value = match value.trim() {
        "" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| format!("unparseable value {v:?}"))?,
        ),
    };
    let unit = match unit.trim() {
        "" => None,
        u => Some(u.to_string()),
    };
    let event = ClinicalEvent {
        patient_id: patient_id.trim().to_string(),
        timestamp,
        kind,
        code_system,
        code: code.trim().to_string(),
        value,
        unit,
    };
    event.validate()?;
    Ok((event, fallback))
}

fn finish(out: Ingested) -> Result<Ingested> {
    if out.local_fallbacks > 0 {
        log::warn!(
            "{} events had an unknown code system and were mapped to LOCAL",
            out.local_fallbacks
        );
    }
    if !out.malformed.is_empty() {
        log::warn!("{} malformed event rows skipped", out.malformed.len());
    }
    let total = out.total_rows();
    if total > 0 && out.malformed.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(HazardError::Ingest {
            malformed: out.malformed.len(),
            total,
            rows: out.malformed.iter().map(|m| m.row).collect(),
        });
    }
    Ok(out)
}

fn push_row(out: &mut Ingested, row: usize, parsed: std::result::Result<(ClinicalEvent, bool), String>) {
    match parsed {
        Ok((event, fallback)) => {
            out.local_fallbacks += usize::from(fallback);
            out.events.push(event);
        }
        Err(reason) => out.malformed.push(MalformedRow { row, reason }),
    }
}

pub fn read_events_csv<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(Ingested::default());
    }
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HazardError::Config(format!("event CSV header lacks column {name}")))?;
    }
    let mut out = Ingested::default();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let parsed = match record {
            Ok(rec) => {
                let get = |j: usize| rec.get(index[j]);
                match (0..7).map(get).collect::<Option<Vec<&str>>>() {
                    Some(f) => parse_fields([f[0], f[1], f[2], f[3], f[4], f[5], f[6]]),
                    None => Err(format!("row has {} fields, expected 7", rec.len())),
                }
            }
            Err(e) => Err(e.to_string()),
        };
        push_row(&mut out, row, parsed);
    }
    finish(out)
}

#[derive(Deserialize)]
struct JsonRow {
    patient_id: String,
    timestamp: String,
    kind: String,
    code_system: String,
    code: String,
    #[serde(default)]
    value: Option<serde_json::Value>,
    #[serde(default)]
    unit: Option<String>,
}

fn parse_json_line(line: &str) -> std::result::Result<(ClinicalEvent, bool), String> {
    let row: JsonRow = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let value = match &row.value {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => return Err(format!("value has wrong type: {other}")),
    };
    let unit = row.unit.unwrap_or_default();
    parse_fields([
        &row.patient_id,
        &row.timestamp,
        &row.kind,
        &row.code_system,
        &row.code,
        &value,
        &unit,
    ])
}

pub fn read_events_ndjson<R: Read>(reader: R) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut row = 0;
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| HazardError::io("<ndjson stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        push_row(&mut out, row, parse_json_line(&line));
    }
    finish(out)
}

/// Reads every well-formed event from `path`.
pub fn ingest_events(path: &Path, format: EventFormat) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| HazardError::io(path, e))?;
    match format {
        EventFormat::Csv => read_events_csv(file),
        EventFormat::Ndjson => read_events_ndjson(file),
    }
}

pub fn write_events_csv<W: Write>(writer: W, events: &[ClinicalEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_HEADER)?;
    for e in events {
        let value = e.value.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([
            e.patient_id.as_str(),
            &format_timestamp(&e.timestamp),
            &e.kind.to_string(),
            &e.code_system.to_string(),
            e.code.as_str(),
            &value,
            e.unit.as_deref().unwrap_or(""),
        ])?;
    }
    wtr.flush().map_err(|e| HazardError::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_events_ndjson<W: Write>(writer: W, events: &[ClinicalEvent]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for e in events {
        let obj = serde_json::json!({
            "patient_id": e.patient_id,
            "timestamp": format_timestamp(&e.timestamp),
            "kind": e.kind.to_string(),
            "code_system": e.code_system.to_string(),
            "code": e.code,
            "value": e.value,
            "unit": e.unit,
        });
        serde_json::to_writer(&mut w, &obj)?;
        w.write_all(b"\n").map_err(|e| HazardError::io("<ndjson writer>", e))?;
    }
    w.flush().map_err(|e| HazardError::io("<ndjson writer>", e))?;
    Ok(())
}

/// Normalized medical history of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientHistory {
    pub patient_id: String,
    events: Vec<ClinicalEvent>,
}

impl PatientHistory {
    /// Sorts and deduplicates `events`, which must all belong to one patient
    /// and be non-empty.
    pub fn new(patient_id: impl Into<String>, mut events: Vec<ClinicalEvent>) -> PatientHistory {
        events.sort_by(ClinicalEvent::canonical_cmp);
        events.dedup();
        PatientHistory {
            patient_id: patient_id.into(),
            events,
        }
    }

    pub fn events(&self) -> &[ClinicalEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<ClinicalEvent> {
        self.events
    }

    pub fn first_seen(&self) -> DateTime<Utc> {
        self.events[0].timestamp
    }

    pub fn last_seen(&self) -> DateTime<Utc> {
        self.events[self.events.len() - 1].timestamp
    }
}

/// Groups events by patient, sorting each history and dropping exact
/// duplicates. Output is ordered by patient id.
pub fn build_histories(events: impl IntoIterator<Item = ClinicalEvent>) -> Vec<PatientHistory> {
    let mut by_patient: BTreeMap<String, Vec<ClinicalEvent>> = BTreeMap::new();
    for e in events {
        by_patient.entry(e.patient_id.clone()).or_default().push(e);
    }
    by_patient
        .into_iter()
        .map(|(id, evs)| PatientHistory::new(id, evs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(pid: &str, ts: &str, kind: EventKind, code: &str, value: Option<f64>) -> ClinicalEvent {
        ClinicalEvent {
            patient_id: pid.into(),
            timestamp: parse_timestamp(ts).unwrap(),
            kind,
            code_system: CodeSystem::Loinc,
            code: code.into(),
            value,
            unit: None,
        }
    }

    #[test]
    fn parses_observation_row() {
        let csv = "patient_id,timestamp,kind,code_system,code,value,unit\n\
                   p1,2010-01-05T00:00:00Z,Observation,LOINC,4548-4,6.1,%\n";
        let got = read_events_csv(csv.as_bytes()).unwrap();
        assert!(got.malformed.is_empty());
        let e = &got.events[0];
        assert_eq!(e.patient_id, "p1");
        assert_eq!(e.kind, EventKind::Observation);
        assert_eq!(e.code_system, CodeSystem::Loinc);
        assert_eq!(e.code, "4548-4");
        assert_eq!(e.value, Some(6.1));
        assert_eq!(e.unit.as_deref(), Some("%"));
        assert_eq!(format_timestamp(&e.timestamp), "2010-01-05T00:00:00Z");
    }

    #[test]
    fn diagnosis_with_value_is_malformed() {
        let mut csv = String::from("patient_id,timestamp,kind,code_system,code,value,unit\n");
        for i in 0..20 {
            csv.push_str(&format!("p{i},2010-01-05T00:00:00Z,Diagnosis,SNOMED,44054006,,\n"));
        }
        csv.push_str("px,2010-01-05T00:00:00Z,Diagnosis,SNOMED,44054006,3.0,\n");
        let got = read_events_csv(csv.as_bytes()).unwrap();
        assert_eq!(got.events.len(), 20);
        assert_eq!(got.malformed.len(), 1);
        assert_eq!(got.malformed[0].row, 21);
    }

    #[test]
    fn empty_file_is_empty_collection() {
        let got = read_events_csv("".as_bytes()).unwrap();
        assert!(got.events.is_empty() && got.malformed.is_empty());
        let got = read_events_csv("patient_id,timestamp,kind,code_system,code,value,unit\n".as_bytes())
            .unwrap();
        assert!(got.events.is_empty() && got.malformed.is_empty());
        let got = read_events_ndjson("".as_bytes()).unwrap();
        assert!(got.events.is_empty());
    }

    #[test]
    fn too_many_malformed_rows_is_hard_error() {
        let csv = "patient_id,timestamp,kind,code_system,code,value,unit\n\
                   p1,2010-01-05T00:00:00Z,Observation,LOINC,4548-4,6.1,%\n\
                   p1,not-a-date,Observation,LOINC,4548-4,6.1,%\n";
        match read_events_csv(csv.as_bytes()) {
            Err(HazardError::Ingest { malformed, total, rows }) => {
                assert_eq!((malformed, total), (1, 2));
                assert_eq!(rows, vec![2]);
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_code_system_maps_to_local() {
        let csv = "patient_id,timestamp,kind,code_system,code,value,unit\n\
                   p1,2010-01-05T00:00:00Z,Encounter,ICD9,250.00,,\n";
        let got = read_events_csv(csv.as_bytes()).unwrap();
        assert_eq!(got.events[0].code_system, CodeSystem::Local);
        assert_eq!(got.local_fallbacks, 1);
    }

    #[test]
    fn ndjson_matches_csv() {
        let line = r#"{"patient_id":"p1","timestamp":"2010-01-05T00:00:00Z","kind":"Observation","code_system":"LOINC","code":"4548-4","value":6.1,"unit":"%"}"#;
        let got = read_events_ndjson(line.as_bytes()).unwrap();
        assert_eq!(got.events[0].value, Some(6.1));
        let mut buf = Vec::new();
        write_events_ndjson(&mut buf, &got.events).unwrap();
        let back = read_events_ndjson(buf.as_slice()).unwrap();
        assert_eq!(back.events, got.events);
    }

    #[test]
    fn unreadable_source_is_io_error() {
        let err = ingest_events(Path::new("/nonexistent/events.csv"), EventFormat::Csv).unwrap_err();
        assert!(matches!(err, HazardError::Io { .. }));
    }

    #[test]
    fn dedupe_and_sort() {
        let a = ev("p1", "2010-02-01T00:00:00Z", EventKind::Observation, "x", Some(1.0));
        let b = ev("p1", "2010-01-01T00:00:00Z", EventKind::Observation, "x", Some(2.0));
        let hist = build_histories(vec![a.clone(), b.clone(), a.clone()]);
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].events(), &[b.clone(), a.clone()]);
        assert_eq!(hist[0].first_seen(), b.timestamp);
        assert_eq!(hist[0].last_seen(), a.timestamp);
    }

    #[test]
    fn interleaved_patients_split() {
        let evs = vec![
            ev("p2", "2010-03-01T00:00:00Z", EventKind::Encounter, "v", None),
            ev("p1", "2010-02-01T00:00:00Z", EventKind::Encounter, "v", None),
            ev("p2", "2010-01-01T00:00:00Z", EventKind::Encounter, "v", None),
            ev("p1", "2010-01-01T00:00:00Z", EventKind::Encounter, "v", None),
        ];
        let hist = build_histories(evs);
        assert_eq!(hist.len(), 2);
        for h in &hist {
            assert!(h.events().windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    #[test]
    fn near_duplicates_are_kept() {
        let a = ev("p1", "2010-01-01T00:00:00Z", EventKind::Observation, "x", Some(1.0));
        let b = ev("p1", "2010-01-01T00:00:00Z", EventKind::Observation, "x", Some(1.5));
        assert_eq!(build_histories(vec![a, b])[0].events().len(), 2);
    }
}
