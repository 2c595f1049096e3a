//! Cross-validated outcome-prediction metrics: per feature set, per
//! observation period.
//!
//! Folds are grouped by patient and stratified on whether a patient has any
//! positive window. Confusion counts are pooled across folds before ratios
//! are taken.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortMember;
use crate::emr_store::PatientHistory;
use crate::error::{HazardError, Result};
use crate::features::{build_windows, WindowDataset, WindowParams};
use crate::folds::{grouped_stratified_folds, split};
use crate::logit::{self, LogitData, LogitFitConfig, LossWeightCv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted_positive: bool, actual_positive: bool) {
        match (predicted_positive, actual_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: Confusion,
    pub n_folds: usize,
    pub seed: u64,
    /// Always "pooled": counts are summed over folds before ratios.
    pub averaging: String,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion, n_folds: usize, seed: u64) -> MetricsReport {
        let c = confusion;
        MetricsReport {
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            confusion,
            n_folds,
            seed,
            averaging: "pooled".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSetName {
    ExpertOnly,
    DataDriven,
    Combined,
}

impl FeatureSetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSetName::ExpertOnly => "expert_only",
            FeatureSetName::DataDriven => "data_driven",
            FeatureSetName::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetSpec {
    pub name: FeatureSetName,
    pub codes: Vec<String>,
}

impl FeatureSetSpec {
    /// The expert, data-driven and combined (deduplicated union) sets.
    pub fn standard_three(expert: &[String], data_driven: &[String]) -> [FeatureSetSpec; 3] {
        let mut seen = BTreeSet::new();
        let combined: Vec<String> = expert
            .iter()
            .chain(data_driven)
            .filter(|c| seen.insert(c.as_str()))
            .cloned()
            .collect();
        [
            FeatureSetSpec {
                name: FeatureSetName::ExpertOnly,
                codes: expert.to_vec(),
            },
            FeatureSetSpec {
                name: FeatureSetName::DataDriven,
                codes: data_driven.to_vec(),
            },
            FeatureSetSpec {
                name: FeatureSetName::Combined,
                codes: combined,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub logit: LogitFitConfig,
    #[serde(default)]
    pub loss_weight_cv: LossWeightCv,
}

fn default_k() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: default_k(),
            logit: LogitFitConfig::default(),
            loss_weight_cv: LossWeightCv::default(),
        }
    }
}

/// Fold index per row: patient-grouped, stratified on patient outcome.
pub fn window_folds(data: &WindowDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let groups: Vec<&str> = data.rows.iter().map(|r| r.patient_id.as_str()).collect();
    let strata: Vec<bool> = data.rows.iter().map(|r| r.label > 0.0).collect();
    grouped_stratified_folds(&groups, &strata, k, seed)
}

fn inner_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Fits on `train` rows (choosing `D` by inner CV) and counts outcomes on
/// `test` rows.
fn evaluate_split(
    data: &WindowDataset,
    columns: &[usize],
    train: &[usize],
    test: &[usize],
    config: &EvalConfig,
    seed: u64,
) -> Result<Confusion> {
    let train_data = LogitData::from_windows(data, columns, train);
    let groups: Vec<&str> = train.iter().map(|&i| data.rows[i].patient_id.as_str()).collect();
    let selection = logit::select_loss_weight(&train_data, &groups, &config.logit, &config.loss_weight_cv, seed)?;
    let cfg = LogitFitConfig {
        loss_weight: selection.best,
        ..config.logit.clone()
    };
    let fit = logit::fit(&train_data, &cfg)?;
    let mut c = Confusion::default();
    for &i in test {
        let row = &data.rows[i];
        let features: Vec<f64> = columns.iter().map(|&j| row.features[j]).collect();
        let p = logit::predict_proba(&fit, &features)?;
        c.record(p >= cfg.threshold, row.label > 0.0);
    }
    Ok(c)
}

pub fn kfold_metrics(
    data: &WindowDataset,
    features: &FeatureSetSpec,
    seed: u64,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let folds = window_folds(data, config.k, seed)?;
    kfold_metrics_with_folds(data, features, &folds, seed, config)
}

fn kfold_metrics_with_folds(
    data: &WindowDataset,
    features: &FeatureSetSpec,
    folds: &[usize],
    seed: u64,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let k = config.k;
    if features.codes.is_empty() {
        return Err(HazardError::Config(format!("feature set {} is empty", features.name.as_str())));
    }
    let pos = data.rows.iter().filter(|r| r.label > 0.0).count();
    if pos == 0 || pos == data.n_rows() {
        return Err(HazardError::SingleClass);
    }
    let columns = data.columns_for(&features.codes)?;
    let per_fold: Vec<Confusion> = (0..k)
        .into_par_iter()
        .map(|f| {
            let (train, test) = split(folds, f);
            evaluate_split(data, &columns, &train, &test, config, inner_seed(seed, f))
        })
        .collect::<Result<_>>()?;
    let pooled = per_fold.into_iter().fold(Confusion::default(), Confusion::add);
    Ok(MetricsReport::from_confusion(pooled, k, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetReport {
    pub feature_set: FeatureSetName,
    pub codes: Vec<String>,
    pub report: MetricsReport,
}

/// Metrics for the expert, data-driven and combined sets on one shared
/// fold assignment.
pub fn compare_feature_sets(
    data: &WindowDataset,
    expert_codes: &[String],
    data_driven_codes: &[String],
    seed: u64,
    config: &EvalConfig,
) -> Result<Vec<FeatureSetReport>> {
    if expert_codes.is_empty() || data_driven_codes.is_empty() {
        return Err(HazardError::Config("expert and data-driven code lists must be non-empty".into()));
    }
    let folds = window_folds(data, config.k, seed)?;
    FeatureSetSpec::standard_three(expert_codes, data_driven_codes)
        .into_iter()
        .map(|spec| {
            let report = kfold_metrics_with_folds(data, &spec, &folds, seed, config)?;
            Ok(FeatureSetReport {
                feature_set: spec.name,
                codes: spec.codes,
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub observation_months: u32,
    pub n_rows: usize,
    pub prevalence: f64,
    pub report: MetricsReport,
}

/// One report per prebuilt window dataset.
pub fn trace_from_datasets(
    datasets: &[WindowDataset],
    codes: &[String],
    seed: u64,
    config: &EvalConfig,
) -> Result<Vec<PeriodReport>> {
    if datasets.is_empty() {
        return Err(HazardError::Config("no observation periods given".into()));
    }
    let spec = FeatureSetSpec {
        name: FeatureSetName::Combined,
        codes: codes.to_vec(),
    };
    datasets
        .iter()
        .map(|data| {
            Ok(PeriodReport {
                observation_months: data.params.observation_months,
                n_rows: data.n_rows(),
                prevalence: data.prevalence(),
                report: kfold_metrics(data, &spec, seed, config)?,
            })
        })
        .collect()
}

/// Rebuilds the window dataset for each observation period and reports
/// metrics and positive-label prevalence per period.
#[allow(clippy::too_many_arguments)]
pub fn observation_period_trace(
    members: &[CohortMember],
    histories: &[PatientHistory],
    codes: &[String],
    periods: &[u32],
    template: WindowParams,
    categorical_codes: &BTreeSet<String>,
    seed: u64,
    config: &EvalConfig,
) -> Result<Vec<PeriodReport>> {
    let datasets = periods
        .iter()
        .map(|&n| {
            let params = WindowParams {
                observation_months: n,
                ..template
            };
            build_windows(members, histories, codes, params, categorical_codes)
        })
        .collect::<Result<Vec<_>>>()?;
    trace_from_datasets(&datasets, codes, seed, config)
}
