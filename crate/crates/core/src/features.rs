//! Covariate matrices for the survival fit and rolling observation /
//! prediction windows for the outcome classifier.
//!
//! All day arithmetic is relative to the member's first diagnosis date, and
//! a month is always 30 days.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{Duration, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortMember;
use crate::emr_store::{EventKind, PatientHistory};
use crate::error::{HazardError, Result};

pub const MONTH_DAYS: u32 = 30;
pub const ALLOWED_OBSERVATION_MONTHS: [u32; 3] = [6, 9, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, sd: 1.0 };

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.sd
    }
}

/// Fills missing (NaN) cells by column mean, or column mode for categorical
/// columns, then z-standardizes every column in place. Constant columns and
/// single-row inputs use `sd = 1`.
pub fn impute_and_standardize(raw: &mut DMatrix<f64>, categorical: &[bool]) -> Vec<ColumnStats> {
    let n = raw.nrows();
    (0..raw.ncols())
        .map(|j| {
            let observed: Vec<f64> = raw.column(j).iter().copied().filter(|v| !v.is_nan()).collect();
            let fill = if observed.is_empty() {
                0.0
            } else if categorical[j] {
                mode(&observed)
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            };
            let mut col = raw.column_mut(j);
            for v in col.iter_mut() {
                if v.is_nan() {
                    *v = fill;
                }
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let stats = ColumnStats {
                mean,
                sd: if sd > 1e-12 { sd } else { 1.0 },
            };
            for v in col.iter_mut() {
                *v = stats.apply(*v);
            }
            stats
        })
        .collect()
}

fn mode(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut k = i;
        while k < sorted.len() && sorted[k] == sorted[i] {
            k += 1;
        }
        if k - i > best.1 {
            best = (sorted[i], k - i);
        }
        i = k;
    }
    best.0
}

/// Per-factor observation series of one patient, as (day offset, value),
/// sorted by day.
struct FactorSeries {
    series: Vec<Vec<(i64, f64)>>,
}

impl FactorSeries {
    fn new(history: &PatientHistory, fd: NaiveDate, codes: &HashMap<&str, usize>) -> Self {
        let mut series = vec![Vec::new(); codes.len()];
        for e in history.events() {
            if e.kind != EventKind::Observation {
                continue;
            }
            if let (Some(&j), Some(v)) = (codes.get(e.code.as_str()), e.value) {
                series[j].push(((e.date() - fd).num_days(), v));
            }
        }
        FactorSeries { series }
    }

    /// Mean over days in `[from, to)`, NaN if no observation falls inside.
    fn mean(&self, j: usize, from: i64, to: i64) -> f64 {
        let s = &self.series[j];
        let lo = s.partition_point(|(d, _)| *d < from);
        let hi = s.partition_point(|(d, _)| *d < to);
        if lo == hi {
            f64::NAN
        } else {
            s[lo..hi].iter().map(|(_, v)| v).sum::<f64>() / (hi - lo) as f64
        }
    }
}

/// Mean of all observations of `code` whose day offset from `fd` lies in
/// `[from_day, to_day)`.
pub fn window_mean(history: &PatientHistory, fd: NaiveDate, code: &str, from_day: i64, to_day: i64) -> Option<f64> {
    let index: HashMap<&str, usize> = [(code, 0)].into();
    let m = FactorSeries::new(history, fd, &index).mean(0, from_day, to_day);
    (!m.is_nan()).then_some(m)
}

fn history_index(histories: &[PatientHistory]) -> HashMap<&str, &PatientHistory> {
    histories.iter().map(|h| (h.patient_id.as_str(), h)).collect()
}

fn code_index(codes: &[String]) -> HashMap<&str, usize> {
    codes.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect()
}

fn dedup_codes(codes: &[String]) -> Result<Vec<String>> {
    if codes.is_empty() {
        return Err(HazardError::Config("factor_codes must be non-empty".into()));
    }
    let mut seen = BTreeSet::new();
    Ok(codes.iter().filter(|c| seen.insert(c.as_str())).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalOptions {
    /// Covariate aggregation window after first diagnosis, in days.
    #[serde(default = "default_baseline_days")]
    pub baseline_days: u32,
    #[serde(default)]
    pub categorical_codes: BTreeSet<String>,
}

fn default_baseline_days() -> u32 {
    180
}

impl Default for SurvivalOptions {
    fn default() -> Self {
        SurvivalOptions {
            baseline_days: default_baseline_days(),
            categorical_codes: BTreeSet::new(),
        }
    }
}

/// Standardized covariates, durations and event flags for the Cox fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub factor_codes: Vec<String>,
    pub patient_ids: Vec<String>,
    /// `n x p`, one row per subject.
    pub covariates: DMatrix<f64>,
    pub durations: Vec<f64>,
    pub events: Vec<bool>,
    pub standardization: Vec<ColumnStats>,
    pub categorical: Vec<bool>,
}

impl SurvivalDataset {
    /// Wraps already-prepared covariates; the standardization is recorded
    /// as the identity.
    pub fn new(
        factor_codes: Vec<String>,
        covariates: DMatrix<f64>,
        durations: Vec<f64>,
        events: Vec<bool>,
    ) -> Result<SurvivalDataset> {
        let n = covariates.nrows();
        let p = covariates.ncols();
        if factor_codes.len() != p {
            return Err(HazardError::Dimension {
                expected: p,
                got: factor_codes.len(),
            });
        }
        for len in [durations.len(), events.len()] {
            if len != n {
                return Err(HazardError::Dimension { expected: n, got: len });
            }
        }
        if let Some(d) = durations.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(HazardError::Config(format!("durations must be positive, found {d}")));
        }
        Ok(SurvivalDataset {
            factor_codes,
            patient_ids: (0..n).map(|i| format!("S{i}")).collect(),
            covariates,
            durations,
            events,
            standardization: vec![ColumnStats::IDENTITY; p],
            categorical: vec![false; p],
        })
    }

    /// Builds a dataset from row-major covariates, for small hand-built cases.
    pub fn from_rows(rows: &[Vec<f64>], durations: Vec<f64>, events: Vec<bool>) -> Result<SurvivalDataset> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(HazardError::Dimension { expected: p, got: r.len() });
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        SurvivalDataset::new((0..p).map(|j| format!("x{j}")).collect(), x, durations, events)
    }

    pub fn n_subjects(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|e| **e).count()
    }

    pub fn column(&self, code: &str) -> Option<usize> {
        self.factor_codes.iter().position(|c| c == code)
    }

    /// Rows `idx` in the given order, sharing standardization metadata.
    pub fn subset(&self, idx: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            factor_codes: self.factor_codes.clone(),
            patient_ids: idx.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            covariates: self.covariates.select_rows(idx.iter()),
            durations: idx.iter().map(|&i| self.durations[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            standardization: self.standardization.clone(),
            categorical: self.categorical.clone(),
        }
    }

    /// Most frequent standardized value of column `j`.
    pub fn column_mode(&self, j: usize) -> f64 {
        mode(self.covariates.column(j).as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct SurvivalBuild {
    pub dataset: SurvivalDataset,
    /// Factors with no observation in any member's baseline window.
    pub dropped_codes: Vec<String>,
    /// Censored members with zero follow-up, which carry no information.
    pub skipped_members: Vec<String>,
}

/// Covariate `j` of member `i` is the mean of the member's `j` observations
/// within the baseline window (and before an observed outcome). Missing
/// values are imputed before standardization.
pub fn build_survival_matrix(
    members: &[CohortMember],
    histories: &[PatientHistory],
    factor_codes: &[String],
    options: &SurvivalOptions,
) -> Result<SurvivalBuild> {
    let codes = dedup_codes(factor_codes)?;
    let index = code_index(&codes);
    let by_id = history_index(histories);

    let mut skipped = Vec::new();
    let mut kept: Vec<(&CohortMember, FactorSeries)> = Vec::new();
    for m in members {
        if m.outcome_time_days == 0 {
            skipped.push(m.patient_id.clone());
            continue;
        }
        let h = by_id
            .get(m.patient_id.as_str())
            .ok_or_else(|| HazardError::Config(format!("no history for member {}", m.patient_id)))?;
        kept.push((m, FactorSeries::new(h, m.first_diagnosis_date, &index)));
    }
    if !skipped.is_empty() {
        log::warn!("{} censored members with zero follow-up skipped", skipped.len());
    }
    if kept.is_empty() {
        return Err(HazardError::Config("no cohort members with positive follow-up".into()));
    }

    let baseline = i64::from(options.baseline_days);
    let mut raw = DMatrix::from_fn(kept.len(), codes.len(), |i, j| {
        let (m, series) = &kept[i];
        let end = if m.event_observed {
            baseline.min(i64::from(m.outcome_time_days))
        } else {
            baseline
        };
        series.mean(j, 0, end)
    });

    let observed: Vec<usize> = (0..codes.len())
        .filter(|&j| raw.column(j).iter().any(|v| !v.is_nan()))
        .collect();
    let dropped_codes: Vec<String> = (0..codes.len())
        .filter(|j| !observed.contains(j))
        .map(|j| codes[j].clone())
        .collect();
    for c in &dropped_codes {
        log::warn!("factor {c} has no observations in any baseline window; dropped");
    }
    if observed.is_empty() {
        return Err(HazardError::Config("no factor has any observation".into()));
    }
    if !dropped_codes.is_empty() {
        raw = raw.select_columns(observed.iter());
    }
    let kept_codes: Vec<String> = observed.iter().map(|&j| codes[j].clone()).collect();
    let categorical: Vec<bool> = kept_codes
        .iter()
        .map(|c| options.categorical_codes.contains(c))
        .collect();
    let standardization = impute_and_standardize(&mut raw, &categorical);

    Ok(SurvivalBuild {
        dataset: SurvivalDataset {
            factor_codes: kept_codes,
            patient_ids: kept.iter().map(|(m, _)| m.patient_id.clone()).collect(),
            covariates: raw,
            durations: kept.iter().map(|(m, _)| f64::from(m.outcome_time_days)).collect(),
            events: kept.iter().map(|(m, _)| m.event_observed).collect(),
            standardization,
            categorical,
        },
        dropped_codes,
        skipped_members: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    pub observation_months: u32,
    #[serde(default = "default_prediction_months")]
    pub prediction_months: u32,
    /// Months between successive window starts; `None` emits only the
    /// first window per patient.
    #[serde(default = "default_stride")]
    pub stride_months: Option<u32>,
}

fn default_prediction_months() -> u32 {
    3
}
fn default_stride() -> Option<u32> {
    Some(3)
}

impl WindowParams {
    pub fn rolling(observation_months: u32) -> Self {
        WindowParams {
            observation_months,
            prediction_months: default_prediction_months(),
            stride_months: default_stride(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_OBSERVATION_MONTHS.contains(&self.observation_months) {
            return Err(HazardError::Config(format!(
                "observation_months must be one of {ALLOWED_OBSERVATION_MONTHS:?}, got {}",
                self.observation_months
            )));
        }
        if self.prediction_months == 0 || self.stride_months == Some(0) {
            return Err(HazardError::Config(
                "prediction_months and stride_months must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn observation_days(&self) -> u32 {
        MONTH_DAYS * self.observation_months
    }

    pub fn prediction_days(&self) -> u32 {
        MONTH_DAYS * self.prediction_months
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRow {
    pub patient_id: String,
    pub window_start: NaiveDate,
    /// Window start in days after first diagnosis.
    pub start_day: u32,
    pub features: Vec<f64>,
    /// +1 when the outcome falls inside the prediction window, else -1.
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub factor_codes: Vec<String>,
    pub rows: Vec<WindowRow>,
    pub standardization: Vec<ColumnStats>,
    pub params: WindowParams,
}

impl WindowDataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn prevalence(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.label > 0.0).count() as f64 / self.rows.len() as f64
    }

    pub fn columns_for(&self, codes: &[String]) -> Result<Vec<usize>> {
        codes
            .iter()
            .map(|c| {
                self.factor_codes
                    .iter()
                    .position(|f| f == c)
                    .ok_or_else(|| HazardError::UnknownFactor(c.clone()))
            })
            .collect()
    }
}

/// Rolling windows per member: observation `[s, s + 30n)`, prediction
/// `[s + 30n, s + 30(n + m))`. A window is emitted only while its prediction
/// span starts before the member's outcome or censoring time.
pub fn build_windows(
    members: &[CohortMember],
    histories: &[PatientHistory],
    factor_codes: &[String],
    params: WindowParams,
    categorical_codes: &BTreeSet<String>,
) -> Result<WindowDataset> {
    params.validate()?;
    let codes = dedup_codes(factor_codes)?;
    let index = code_index(&codes);
    let by_id = history_index(histories);
    let obs_days = i64::from(params.observation_days());
    let pred_days = i64::from(params.prediction_days());

    let mut rows = Vec::new();
    let mut raw_rows: Vec<Vec<f64>> = Vec::new();
    for m in members {
        let h = by_id
            .get(m.patient_id.as_str())
            .ok_or_else(|| HazardError::Config(format!("no history for member {}", m.patient_id)))?;
        let series = FactorSeries::new(h, m.first_diagnosis_date, &index);
        let end = i64::from(m.outcome_time_days);
        let mut start = 0i64;
        loop {
            let pred_start = start + obs_days;
            if pred_start >= end {
                break;
            }
            let positive = m.event_observed && end < pred_start + pred_days;
            raw_rows.push((0..codes.len()).map(|j| series.mean(j, start, pred_start)).collect());
            rows.push(WindowRow {
                patient_id: m.patient_id.clone(),
                window_start: m.first_diagnosis_date + Duration::days(start),
                start_day: start as u32,
                features: Vec::new(),
                label: if positive { 1.0 } else { -1.0 },
            });
            match params.stride_months {
                Some(stride) => start += i64::from(stride * MONTH_DAYS),
                None => break,
            }
        }
    }

    let categorical: Vec<bool> = codes.iter().map(|c| categorical_codes.contains(c)).collect();
    let mut raw = DMatrix::from_fn(raw_rows.len(), codes.len(), |i, j| raw_rows[i][j]);
    let standardization = impute_and_standardize(&mut raw, &categorical);
    for (i, row) in rows.iter_mut().enumerate() {
        row.features = raw.row(i).iter().copied().collect();
    }
    Ok(WindowDataset {
        factor_codes: codes,
        rows,
        standardization,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub code: String,
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub categorical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMeta {
    pub columns: Vec<ColumnMeta>,
    pub dropped_codes: Vec<String>,
    pub baseline_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub columns: Vec<ColumnMeta>,
    pub params: WindowParams,
}

fn column_meta(codes: &[String], stats: &[ColumnStats], categorical: &[bool]) -> Vec<ColumnMeta> {
    codes
        .iter()
        .zip(stats)
        .zip(categorical)
        .map(|((code, s), &categorical)| ColumnMeta {
            code: code.clone(),
            mean: s.mean,
            sd: s.sd,
            categorical,
        })
        .collect()
}

pub fn survival_meta(build: &SurvivalBuild, options: &SurvivalOptions) -> SurvivalMeta {
    let d = &build.dataset;
    SurvivalMeta {
        columns: column_meta(&d.factor_codes, &d.standardization, &d.categorical),
        dropped_codes: build.dropped_codes.clone(),
        baseline_days: options.baseline_days,
    }
}

pub fn window_meta(data: &WindowDataset, categorical_codes: &BTreeSet<String>) -> WindowMeta {
    let categorical: Vec<bool> = data.factor_codes.iter().map(|c| categorical_codes.contains(c)).collect();
    WindowMeta {
        columns: column_meta(&data.factor_codes, &data.standardization, &categorical),
        params: data.params,
    }
}

fn flush<W: Write>(mut wtr: csv::Writer<W>) -> Result<()> {
    wtr.flush().map_err(|e| HazardError::io("<csv writer>", e))
}

pub fn write_survival_csv<W: Write>(writer: W, data: &SurvivalDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "duration".into(), "event".into()];
    header.extend(data.factor_codes.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..data.n_subjects() {
        let mut rec = vec![
            data.patient_ids[i].clone(),
            data.durations[i].to_string(),
            u8::from(data.events[i]).to_string(),
        ];
        rec.extend(data.covariates.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    flush(wtr)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| HazardError::Config(format!("unparseable {what} {s:?}")))
}

fn check_header(headers: &csv::StringRecord, fixed: &[&str], codes: &[String]) -> Result<()> {
    let expected: Vec<&str> = fixed.iter().copied().chain(codes.iter().map(String::as_str)).collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(HazardError::Artifact(format!(
            "CSV header {got:?} does not match sidecar columns {expected:?}"
        )));
    }
    Ok(())
}

pub fn read_survival_csv<R: Read>(reader: R, meta: &SurvivalMeta) -> Result<SurvivalDataset> {
    let codes: Vec<String> = meta.columns.iter().map(|c| c.code.clone()).collect();
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["patient_id", "duration", "event"], &codes)?;
    let mut ids = Vec::new();
    let mut durations = Vec::new();
    let mut events = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        durations.push(parse_f64(&rec[1], "duration")?);
        events.push(match rec[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(HazardError::Config(format!("bad event flag {other:?}"))),
        });
        for j in 0..codes.len() {
            values.push(parse_f64(&rec[3 + j], "covariate")?);
        }
    }
    let x = DMatrix::from_row_slice(ids.len(), codes.len(), &values);
    let mut data = SurvivalDataset::new(codes, x, durations, events)?;
    data.patient_ids = ids;
    data.standardization = meta.columns.iter().map(|c| ColumnStats { mean: c.mean, sd: c.sd }).collect();
    data.categorical = meta.columns.iter().map(|c| c.categorical).collect();
    Ok(data)
}

pub fn write_windows_csv<W: Write>(writer: W, data: &WindowDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "window_start".into(), "start_day".into(), "label".into()];
    header.extend(data.factor_codes.iter().cloned());
    wtr.write_record(&header)?;
    for r in &data.rows {
        let mut rec = vec![
            r.patient_id.clone(),
            r.window_start.to_string(),
            r.start_day.to_string(),
            (r.label as i32).to_string(),
        ];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    flush(wtr)
}

pub fn read_windows_csv<R: Read>(reader: R, meta: &WindowMeta) -> Result<WindowDataset> {
    let codes: Vec<String> = meta.columns.iter().map(|c| c.code.clone()).collect();
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["patient_id", "window_start", "start_day", "label"], &codes)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let window_start = rec[1]
            .parse::<NaiveDate>()
            .map_err(|_| HazardError::Config(format!("bad window_start {:?}", &rec[1])))?;
        let start_day = rec[2]
            .parse::<u32>()
            .map_err(|_| HazardError::Config(format!("bad start_day {:?}", &rec[2])))?;
        let label = parse_f64(&rec[3], "label")?;
        if label != 1.0 && label != -1.0 {
            return Err(HazardError::InvalidLabel(label));
        }
        let features = (0..codes.len())
            .map(|j| parse_f64(&rec[4 + j], "feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push(WindowRow {
            patient_id: rec[0].to_string(),
            window_start,
            start_day,
            features,
            label,
        });
    }
    Ok(WindowDataset {
        factor_codes: codes,
        rows,
        standardization: meta.columns.iter().map(|c| ColumnStats { mean: c.mean, sd: c.sd }).collect(),
        params: meta.params,
    })
}
