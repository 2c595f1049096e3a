use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::artifacts::{self, Inputs, Provenance};
use super::config::PipelineConfig;
use crate::cohort::{self, build_cohort, CohortMember};
use crate::cox::{self, adjusted_survival, cv_select_gamma, rank_factors, CoxFit, GammaSelection};
use crate::emr_store::{self, build_histories, EventFormat, PatientHistory};
use crate::error::{HazardError, Result};
use crate::eval::{self, FeatureSetReport, PeriodReport};
use crate::features::{self, SurvivalDataset, SurvivalMeta, WindowDataset, WindowMeta};
use crate::logit::{self, LogitData};
use crate::synth;

pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const MEMBERS: &str = "members.csv";
pub const EXCLUSIONS: &str = "exclusions.csv";
pub const SURVIVAL: &str = "survival.csv";
pub const COEFFICIENTS: &str = "coefficients.csv";
pub const BASELINE_HAZARD: &str = "baseline_hazard.csv";
pub const CONVERGENCE: &str = "convergence.json";
pub const COX_FIT: &str = "cox_fit.json";
pub const GLM_MODEL: &str = "glm_model.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const METRICS: &str = "metrics.csv";
pub const TRACE: &str = "trace.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";
const EVENTS_LABEL: &str = "events";

pub fn windows_file(observation_months: u32) -> String {
    format!("windows_n{observation_months}.csv")
}

/// File name for the adjusted curves of one factor; characters outside
/// `[A-Za-z0-9._-]` become `_`.
pub fn curves_file(code: &str) -> String {
    let safe: String = code
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    format!("survival_curves_{safe}.csv")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Synth,
    Cohort,
    Featurize,
    FitCox,
    AdjustSurvival { factor: String, levels: Vec<f64> },
    FitGlm,
    Evaluate,
    Report,
    All,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cohort => "cohort",
            Stage::Featurize => "featurize",
            Stage::FitCox => "fit-cox",
            Stage::AdjustSurvival { .. } => "adjust-survival",
            Stage::FitGlm => "fit-glm",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub code: String,
    pub coefficient: f64,
    /// Absent for factors outside the penalized support.
    pub p_value: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub feature_set: String,
    pub period: u32,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub observation_months: u32,
    pub n_rows: usize,
    pub prevalence: f64,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub codes: Vec<String>,
    pub w: Vec<f64>,
    pub d: f64,
    #[serde(rename = "D")]
    pub loss_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub gamma: f64,
    pub gamma_max: f64,
    /// `cv` or `fixed`.
    pub gamma_source: String,
    pub gamma_grid: Vec<f64>,
    pub mean_heldout_log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub refit_converged: bool,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub rank: usize,
    pub code: String,
    pub coefficient: f64,
    pub p_value: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub members: usize,
    pub events: usize,
    pub exclusions: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub cohort: CohortSummary,
    pub gamma: f64,
    pub cox_converged: bool,
    pub ranked_factors: Vec<RankedRow>,
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<TraceRow>,
    pub survival_curves: Vec<String>,
    /// Planted coefficients when the events were generated.
    pub ground_truth: Option<BTreeMap<String, f64>>,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.into_inner().map_err(|e| HazardError::io("<csv buffer>", e.into_error()))
}

/// Header-only output when there are no rows to serialize.
fn csv_bytes_with_header<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    if rows.is_empty() {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(header)?;
        return wtr.into_inner().map_err(|e| HazardError::io("<csv buffer>", e.into_error()));
    }
    csv_bytes(rows)
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| HazardError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(HazardError::from))
        .collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| HazardError::io(path, e))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// One configured run: the config, where its paths resolve, and the run
/// identity stamped on every artifact.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub events_path: PathBuf,
    pub workdir: PathBuf,
    provenance: Provenance,
}

impl Pipeline {
    /// Validates `config`; relative paths resolve against `root`.
    pub fn new(config: PipelineConfig, root: &Path) -> Result<Pipeline> {
        config.validate()?;
        let events_path = resolve(root, &config.paths.events);
        let workdir = resolve(root, &config.paths.workdir);
        let provenance = Provenance {
            config_hash: config.hash(),
            seed: config.seed,
        };
        Ok(Pipeline {
            config,
            events_path,
            workdir,
            provenance,
        })
    }

    /// Loads a config file, applies a seed override and validates.
    pub fn from_file(path: &Path, seed: Option<u64>) -> Result<Pipeline> {
        let mut config = PipelineConfig::load(path)?;
        if let Some(s) = seed {
            config.override_seed(s);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Pipeline::new(config, &root)
    }

    pub fn config_hash(&self) -> &str {
        &self.provenance.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn input_path(&self, label: &str) -> PathBuf {
        if label == EVENTS_LABEL {
            self.events_path.clone()
        } else {
            self.path(label)
        }
    }

    fn inputs(&self, labels: &[&str]) -> Result<Inputs> {
        let mut inputs = Inputs::default();
        for label in labels {
            inputs.add(label, &self.input_path(label))?;
        }
        Ok(inputs)
    }

    fn write(&self, stage: &str, name: &str, bytes: &[u8], inputs: &Inputs, details: serde_json::Value) -> Result<()> {
        self.provenance.write(stage, &self.path(name), bytes, inputs, details)
    }

    fn check_paths(&self, stage: &Stage) -> Result<()> {
        let generates = matches!(stage, Stage::Synth) || (matches!(stage, Stage::All) && self.config.synth.is_some());
        if matches!(stage, Stage::Synth) && self.config.synth.is_none() {
            return Err(HazardError::Config("the synth stage needs a synth section".into()));
        }
        let reads_events = matches!(stage, Stage::Cohort | Stage::Featurize | Stage::All);
        if reads_events && !generates && !self.events_path.is_file() {
            return Err(HazardError::io(
                &self.events_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "events file not found"),
            ));
        }
        Ok(())
    }

    pub fn run(&self, stage: &Stage) -> Result<()> {
        self.check_paths(stage)?;
        log::info!("stage {} (config {})", stage.name(), self.config_hash());
        match stage {
            Stage::Synth => self.synth(),
            Stage::Cohort => self.cohort(),
            Stage::Featurize => self.featurize(),
            Stage::FitCox => self.fit_cox(),
            Stage::AdjustSurvival { factor, levels } => self.adjust_survival(factor, Some(levels)).map(|_| ()),
            Stage::FitGlm => self.fit_glm(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
            Stage::All => self.all(),
        }
    }

    /// Every stage in order, stopping at the first failure.
    pub fn all(&self) -> Result<()> {
        if self.config.synth.is_some() {
            self.synth()?;
        }
        self.cohort()?;
        self.featurize()?;
        self.fit_cox()?;
        for row in self.selected_rows()? {
            self.adjust_survival(&row.code, None)?;
        }
        self.fit_glm()?;
        self.evaluate()?;
        self.report()
    }

    pub fn synth(&self) -> Result<()> {
        let cfg = self
            .config
            .synth
            .as_ref()
            .ok_or_else(|| HazardError::Config("the synth stage needs a synth section".into()))?;
        let events = synth::generate(cfg)?;
        let mut bytes = Vec::new();
        match EventFormat::from_path(&self.events_path) {
            EventFormat::Csv => emr_store::write_events_csv(&mut bytes, &events)?,
            EventFormat::Ndjson => emr_store::write_events_ndjson(&mut bytes, &events)?,
        }
        let none = Inputs::default();
        let details = serde_json::json!({"n_patients": cfg.n_patients, "n_events": events.len()});
        self.provenance.write("synth", &self.events_path, &bytes, &none, details)?;
        let truth: BTreeMap<String, f64> = synth::ground_truth(cfg).into_iter().collect();
        self.write("synth", GROUND_TRUTH, &artifacts::to_json_bytes(&truth)?, &none, serde_json::Value::Null)
    }

    fn load_histories(&self) -> Result<Vec<PatientHistory>> {
        let ingested = emr_store::ingest_events(&self.events_path, EventFormat::from_path(&self.events_path))?;
        if !ingested.malformed.is_empty() {
            log::warn!(
                "{} of {} event rows malformed and skipped",
                ingested.malformed.len(),
                ingested.total_rows()
            );
        }
        Ok(build_histories(ingested.events))
    }

    pub fn cohort(&self) -> Result<()> {
        let ingested = emr_store::ingest_events(&self.events_path, EventFormat::from_path(&self.events_path))?;
        let ingest = serde_json::json!({
            "total_rows": ingested.total_rows(),
            "malformed_rows": ingested.malformed.iter().map(|m| serde_json::json!({"row": m.row, "reason": m.reason})).collect::<Vec<_>>(),
            "local_code_system_fallbacks": ingested.local_fallbacks,
        });
        let histories = build_histories(ingested.events);
        let result = build_cohort(&histories, &self.config.cohort);
        let mut by_reason: BTreeMap<&str, usize> = BTreeMap::new();
        for x in &result.exclusions {
            *by_reason.entry(x.reason.as_str()).or_default() += 1;
        }
        log::info!(
            "cohort: {} members, {} excluded",
            result.members.len(),
            result.exclusions.len()
        );
        let inputs = self.inputs(&[EVENTS_LABEL])?;
        let mut members = Vec::new();
        cohort::write_members_csv(&mut members, &result.members)?;
        let details = serde_json::json!({
            "patients": histories.len(),
            "members": result.members.len(),
            "events_observed": result.members.iter().filter(|m| m.event_observed).count(),
            "ingest": ingest,
        });
        self.write("cohort", MEMBERS, &members, &inputs, details)?;
        let mut exclusions = Vec::new();
        cohort::write_exclusions_csv(&mut exclusions, &result.exclusions)?;
        self.write("cohort", EXCLUSIONS, &exclusions, &inputs, serde_json::json!({ "by_reason": by_reason }))
    }

    fn members(&self) -> Result<Vec<CohortMember>> {
        cohort::read_members_csv(open(&self.path(MEMBERS))?)
    }

    pub fn featurize(&self) -> Result<()> {
        let histories = self.load_histories()?;
        let members = self.members()?;
        let inputs = self.inputs(&[EVENTS_LABEL, MEMBERS])?;
        let codes = &self.config.factors.candidate;
        let options = self.config.survival_options();

        let build = features::build_survival_matrix(&members, &histories, codes, &options)?;
        let mut bytes = Vec::new();
        features::write_survival_csv(&mut bytes, &build.dataset)?;
        let mut details = serde_json::to_value(features::survival_meta(&build, &options))?;
        details["skipped_members"] = serde_json::to_value(&build.skipped_members)?;
        self.write("featurize", SURVIVAL, &bytes, &inputs, details)?;

        for &n in &self.config.windows.observation_months {
            let params = self.config.windows.params(n);
            let data = features::build_windows(&members, &histories, codes, params, &self.config.factors.categorical)?;
            log::info!("windows n={n}: {} rows, prevalence {:.4}", data.n_rows(), data.prevalence());
            let mut bytes = Vec::new();
            features::write_windows_csv(&mut bytes, &data)?;
            let mut details = serde_json::to_value(features::window_meta(&data, &self.config.factors.categorical))?;
            details["n_rows"] = data.n_rows().into();
            details["prevalence"] = data.prevalence().into();
            self.write("featurize", &windows_file(n), &bytes, &inputs, details)?;
        }
        Ok(())
    }

    pub fn survival_dataset(&self) -> Result<SurvivalDataset> {
        let path = self.path(SURVIVAL);
        let meta: SurvivalMeta = artifacts::details(&path)?;
        features::read_survival_csv(open(&path)?, &meta)
    }

    pub fn window_dataset(&self, observation_months: u32) -> Result<WindowDataset> {
        let path = self.path(&windows_file(observation_months));
        let meta: WindowMeta = artifacts::details(&path)?;
        features::read_windows_csv(open(&path)?, &meta)
    }

    pub fn fit_cox(&self) -> Result<()> {
        let data = self.survival_dataset()?;
        let inputs = self.inputs(&[SURVIVAL])?;
        let section = &self.config.cox;
        let gmax = cox::gamma_max(&data)?;
        let (gamma, selection) = match section.gamma {
            Some(g) => (g, None),
            None => {
                let sel: GammaSelection = cv_select_gamma(&data, &section.fit_config(0.0), &section.cv_config(self.config.seed))?;
                (sel.best_gamma, Some(sel))
            }
        };
        let fit = cox::fit(&data, &section.fit_config(gamma))?;
        if !fit.converged {
            return Err(HazardError::Convergence(format!(
                "cox fit at gamma={gamma} after {} iterations",
                fit.iterations
            )));
        }
        let ranked = rank_factors(&fit, section.alpha);
        let selected: BTreeSet<&str> = ranked.iter().map(|r| r.code.as_str()).collect();
        log::info!(
            "cox: gamma={gamma:.6e}, support {}, selected {}",
            fit.support.len(),
            selected.len()
        );

        let rows: Vec<CoefficientRow> = fit
            .factor_codes
            .iter()
            .enumerate()
            .map(|(j, code)| CoefficientRow {
                code: code.clone(),
                coefficient: fit.beta[j],
                p_value: fit.wald_for(j).map(|w| w.p_value).filter(|p| p.is_finite()),
                selected: selected.contains(code.as_str()),
            })
            .collect();
        let details = serde_json::json!({"gamma": gamma, "alpha": section.alpha});
        self.write("fit-cox", COEFFICIENTS, &csv_bytes(&rows)?, &inputs, details)?;

        let hazard: Vec<(f64, f64)> = fit.baseline.points.clone();
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["time", "cum_hazard"])?;
        for (t, h) in &hazard {
            wtr.write_record([t.to_string(), h.to_string()])?;
        }
        let bytes = wtr.into_inner().map_err(|e| HazardError::io("<csv buffer>", e.into_error()))?;
        self.write("fit-cox", BASELINE_HAZARD, &bytes, &inputs, serde_json::Value::Null)?;

        let report = ConvergenceReport {
            gamma,
            gamma_max: gmax,
            gamma_source: if selection.is_some() { "cv" } else { "fixed" }.into(),
            gamma_grid: selection.as_ref().map(|s| s.grid.clone()).unwrap_or_default(),
            mean_heldout_log_likelihood: selection.as_ref().map(|s| s.mean_heldout.clone()).unwrap_or_default(),
            iterations: fit.iterations,
            converged: fit.converged,
            refit_converged: fit.refit_converged,
            objective_trace: fit.objective_trace.clone(),
        };
        self.write("fit-cox", CONVERGENCE, &artifacts::to_json_bytes(&report)?, &inputs, serde_json::Value::Null)?;
        self.write("fit-cox", COX_FIT, &artifacts::to_json_bytes(&fit)?, &inputs, serde_json::Value::Null)
    }

    pub fn cox_fit(&self) -> Result<CoxFit> {
        artifacts::read_json(&self.path(COX_FIT))
    }

    pub fn coefficient_rows(&self) -> Result<Vec<CoefficientRow>> {
        read_csv_rows(&self.path(COEFFICIENTS))
    }

    /// Selected factors by descending penalized coefficient.
    pub fn selected_rows(&self) -> Result<Vec<CoefficientRow>> {
        let mut rows: Vec<CoefficientRow> = self.coefficient_rows()?.into_iter().filter(|r| r.selected).collect();
        rows.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient).then_with(|| a.code.cmp(&b.code)));
        Ok(rows)
    }

    fn data_driven_codes(&self) -> Result<Vec<String>> {
        Ok(self.selected_rows()?.into_iter().map(|r| r.code).collect())
    }

    /// Writes curves for `factor` at `levels`, or at default levels: the
    /// observed values of a categorical factor (at most five), else the
    /// mean and one standard deviation either side.
    pub fn adjust_survival(&self, factor: &str, levels: Option<&[f64]>) -> Result<PathBuf> {
        let fit = self.cox_fit()?;
        let data = self.survival_dataset()?;
        let j = data
            .column(factor)
            .ok_or_else(|| HazardError::UnknownFactor(factor.to_string()))?;
        let levels = match levels {
            Some(l) if l.is_empty() => return Err(HazardError::Config("--levels needs at least one value".into())),
            Some(l) => l.to_vec(),
            None => default_levels(&data, j),
        };
        let curves = adjusted_survival(&fit, &data, factor, &levels)?;
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["time", "level", "survival"])?;
        for c in &curves {
            for (t, s) in &c.points {
                wtr.write_record([t.to_string(), c.level.to_string(), s.to_string()])?;
            }
        }
        let bytes = wtr.into_inner().map_err(|e| HazardError::io("<csv buffer>", e.into_error()))?;
        let name = curves_file(factor);
        let inputs = self.inputs(&[SURVIVAL, COX_FIT])?;
        let details = serde_json::json!({"factor": factor, "levels": levels, "coefficient": fit.beta[j]});
        self.write("adjust-survival", &name, &bytes, &inputs, details)?;
        Ok(self.path(&name))
    }

    fn combined_codes(&self) -> Result<Vec<String>> {
        let dd = self.data_driven_codes()?;
        let [_, _, combined] = eval::FeatureSetSpec::standard_three(&self.config.factors.expert, &dd);
        Ok(combined.codes)
    }

    pub fn fit_glm(&self) -> Result<()> {
        let n = self.config.windows.primary_months;
        let data = self.window_dataset(n)?;
        let inputs = self.inputs(&[&windows_file(n), COEFFICIENTS])?;
        let codes = self.combined_codes()?;
        let columns = data.columns_for(&codes)?;
        let all: Vec<usize> = (0..data.n_rows()).collect();
        let train = LogitData::from_windows(&data, &columns, &all);
        let section = &self.config.logit;
        let (loss_weight, selection) = match section.loss_weight {
            Some(d) => (d, None),
            None => {
                let groups: Vec<&str> = data.rows.iter().map(|r| r.patient_id.as_str()).collect();
                let sel = logit::select_loss_weight(
                    &train,
                    &groups,
                    &section.fit_config(),
                    &section.loss_weight_cv(),
                    self.config.seed,
                )?;
                (sel.best, Some(sel))
            }
        };
        let cfg = logit::LogitFitConfig {
            loss_weight,
            ..section.fit_config()
        };
        let fit = logit::fit(&train, &cfg)?;
        if !fit.converged {
            return Err(HazardError::Convergence(format!(
                "logistic fit at D={loss_weight} after {} iterations",
                fit.iterations
            )));
        }
        let model = GlmModel {
            codes: codes.clone(),
            w: fit.w.clone(),
            d: fit.d,
            loss_weight,
        };
        let details = serde_json::json!({
            "observation_months": n,
            "iterations": fit.iterations,
            "loss_weight_source": if selection.is_some() { "cv" } else { "fixed" },
            "loss_weight_grid": selection.as_ref().map(|s| s.grid.clone()),
            "mean_log_loss": selection.as_ref().map(|s| s.mean_log_loss.clone()),
        });
        self.write("fit-glm", GLM_MODEL, &artifacts::to_json_bytes(&model)?, &inputs, details)?;

        #[derive(Serialize)]
        struct Prediction<'a> {
            patient_id: &'a str,
            window_start: NaiveDate,
            probability: f64,
            label: i32,
        }
        let predictions = data
            .rows
            .iter()
            .map(|r| {
                let x: Vec<f64> = columns.iter().map(|&j| r.features[j]).collect();
                Ok(Prediction {
                    patient_id: &r.patient_id,
                    window_start: r.window_start,
                    probability: logit::predict_proba(&fit, &x)?,
                    label: r.label as i32,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = csv_bytes_with_header(&predictions, &["patient_id", "window_start", "probability", "label"])?;
        self.write("fit-glm", PREDICTIONS, &bytes, &inputs, serde_json::Value::Null)
    }

    pub fn evaluate(&self) -> Result<()> {
        let cfg = self.config.logit.eval_config();
        let seed = self.config.seed;
        let primary = self.config.windows.primary_months;
        let dd = self.data_driven_codes()?;
        if dd.is_empty() {
            return Err(HazardError::EmptySelection(
                "the Cox stage selected no data-driven factors to compare".into(),
            ));
        }
        let mut labels = vec![COEFFICIENTS.to_string()];
        labels.extend(self.config.windows.observation_months.iter().map(|&n| windows_file(n)));
        let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let inputs = self.inputs(&label_refs)?;

        let primary_data = self.window_dataset(primary)?;
        let reports: Vec<FeatureSetReport> =
            eval::compare_feature_sets(&primary_data, &self.config.factors.expert, &dd, seed, &cfg)?;
        let prevalence = primary_data.prevalence();
        let metrics: Vec<MetricsRow> = reports
            .iter()
            .map(|r| {
                let c = r.report.confusion;
                MetricsRow {
                    feature_set: r.feature_set.as_str().into(),
                    period: primary,
                    accuracy: r.report.accuracy,
                    sensitivity: r.report.sensitivity,
                    specificity: r.report.specificity,
                    tp: c.tp,
                    fp: c.fp,
                    tn: c.tn,
                    fn_: c.fn_,
                    prevalence,
                }
            })
            .collect();
        let details = serde_json::json!({"folds": cfg.k, "averaging": "pooled", "threshold": cfg.logit.threshold});
        self.write("evaluate", METRICS, &csv_bytes(&metrics)?, &inputs, details.clone())?;

        // On the primary period the combined-set report is the trace point;
        // it shares folds and seed, so it is reused rather than refitted.
        let combined = reports
            .iter()
            .find(|r| r.feature_set == eval::FeatureSetName::Combined)
            .ok_or_else(|| HazardError::Config("no combined feature set".into()))?;
        let mut trace = Vec::new();
        for &n in &self.config.windows.observation_months {
            let point = if n == primary {
                PeriodReport {
                    observation_months: n,
                    n_rows: primary_data.n_rows(),
                    prevalence,
                    report: combined.report.clone(),
                }
            } else {
                let data = self.window_dataset(n)?;
                eval::trace_from_datasets(std::slice::from_ref(&data), &combined.codes, seed, &cfg)?.remove(0)
            };
            log::info!(
                "trace n={n}: accuracy {:?}, prevalence {:.4}",
                point.report.accuracy,
                point.prevalence
            );
            let c = point.report.confusion;
            trace.push(TraceRow {
                observation_months: n,
                n_rows: point.n_rows,
                prevalence: point.prevalence,
                accuracy: point.report.accuracy,
                sensitivity: point.report.sensitivity,
                specificity: point.report.specificity,
                tp: c.tp,
                fp: c.fp,
                tn: c.tn,
                fn_: c.fn_,
            });
        }
        self.write("evaluate", TRACE, &csv_bytes(&trace)?, &inputs, details)
    }

    /// Checks an artifact's sidecar against this run and that each input it
    /// records is unchanged on disk.
    fn verify(&self, name: &str) -> Result<artifacts::Sidecar> {
        let sidecar = artifacts::verify(&self.path(name), self.config_hash())?;
        for (label, hash) in &sidecar.inputs {
            let path = self.input_path(label);
            if artifacts::file_sha256(&path)? != *hash {
                return Err(HazardError::Artifact(format!(
                    "{name} is stale: its input {} changed after it was written",
                    path.display()
                )));
            }
        }
        Ok(sidecar)
    }

    pub fn report(&self) -> Result<()> {
        let mut names: Vec<String> = [MEMBERS, EXCLUSIONS, SURVIVAL, COEFFICIENTS, CONVERGENCE, COX_FIT, METRICS, TRACE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(self.config.windows.observation_months.iter().map(|&n| windows_file(n)));
        let selected = self.selected_rows()?;
        let curves: Vec<String> = selected
            .iter()
            .map(|r| curves_file(&r.code))
            .filter(|n| self.path(n).is_file())
            .collect();
        names.extend(curves.iter().cloned());
        if self.path(GLM_MODEL).is_file() {
            names.push(GLM_MODEL.into());
        }
        for name in &names {
            self.verify(name)?;
        }
        let members_sidecar = artifacts::read_sidecar(&self.path(MEMBERS))?;
        let exclusions_sidecar = artifacts::read_sidecar(&self.path(EXCLUSIONS))?;

        let ground_truth = if self.path(GROUND_TRUTH).is_file() {
            self.verify(GROUND_TRUTH)?;
            Some(artifacts::read_json::<BTreeMap<String, f64>>(&self.path(GROUND_TRUTH))?)
        } else {
            None
        };
        let exclusions: BTreeMap<String, usize> = serde_json::from_value(exclusions_sidecar.details["by_reason"].clone())
            .map_err(|e| HazardError::Artifact(format!("exclusions sidecar: {e}")))?;
        let cohort = CohortSummary {
            members: members_sidecar.details["members"].as_u64().unwrap_or(0) as usize,
            events: members_sidecar.details["events_observed"].as_u64().unwrap_or(0) as usize,
            exclusions,
        };
        let convergence: ConvergenceReport = artifacts::read_json(&self.path(CONVERGENCE))?;
        let ranked: Vec<RankedRow> = selected
            .iter()
            .enumerate()
            .map(|(i, r)| RankedRow {
                rank: i + 1,
                code: r.code.clone(),
                coefficient: r.coefficient,
                p_value: r.p_value.unwrap_or(f64::NAN),
                positive: r.coefficient > 0.0,
            })
            .collect();
        let summary = Summary {
            config_hash: self.config_hash().to_string(),
            seed: self.config.seed,
            cohort,
            gamma: convergence.gamma,
            cox_converged: convergence.converged,
            ranked_factors: ranked,
            metrics: read_csv_rows(&self.path(METRICS))?,
            trace: read_csv_rows(&self.path(TRACE))?,
            survival_curves: curves,
            ground_truth,
        };
        let mut inputs = Inputs::default();
        for name in &names {
            inputs.add(name, &self.path(name))?;
        }
        self.write("report", SUMMARY_JSON, &artifacts::to_json_bytes(&summary)?, &inputs, serde_json::Value::Null)?;
        self.write("report", SUMMARY_TXT, render_summary(&summary).as_bytes(), &inputs, serde_json::Value::Null)
    }
}

fn default_levels(data: &SurvivalDataset, j: usize) -> Vec<f64> {
    let stats = data.standardization[j];
    if data.categorical[j] {
        let mut values: Vec<f64> = data
            .covariates
            .column(j)
            .iter()
            .map(|z| ((stats.mean + stats.sd * z) * 1e6).round() / 1e6)
            .collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        values.truncate(5);
        values
    } else {
        vec![stats.mean - stats.sd, stats.mean, stats.mean + stats.sd]
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}  seed {}", s.config_hash, s.seed);
    let _ = writeln!(
        out,
        "cohort: {} members, {} with renal failure",
        s.cohort.members, s.cohort.events
    );
    for (reason, n) in &s.cohort.exclusions {
        let _ = writeln!(out, "  excluded ({reason}): {n}");
    }
    let _ = writeln!(out, "\nrisk factors (gamma = {:.6e}):", s.gamma);
    let _ = writeln!(out, "{:>4}  {:<16} {:>12} {:>12}  {}", "rank", "code", "coefficient", "p_value", "direction");
    for r in &s.ranked_factors {
        let truth = s
            .ground_truth
            .as_ref()
            .and_then(|g| g.get(&r.code))
            .map(|b| format!("  (planted {b})"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:>4}  {:<16} {:>12.5} {:>12.3e}  {}{}",
            r.rank,
            r.code,
            r.coefficient,
            r.p_value,
            if r.positive { "risk" } else { "protective" },
            truth
        );
    }
    let _ = writeln!(out, "\nprediction metrics:");
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>9} {:>11} {:>11} {:>10}",
        "feature_set", "period", "accuracy", "sensitivity", "specificity", "prevalence"
    );
    for m in &s.metrics {
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>9} {:>11} {:>11} {:>10.4}",
            m.feature_set,
            m.period,
            fmt_opt(m.accuracy),
            fmt_opt(m.sensitivity),
            fmt_opt(m.specificity),
            m.prevalence
        );
    }
    let _ = writeln!(out, "\nobservation period trace:");
    let _ = writeln!(out, "{:>6} {:>8} {:>10} {:>9}", "months", "rows", "prevalence", "accuracy");
    for t in &s.trace {
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>10.4} {:>9}",
            t.observation_months,
            t.n_rows,
            t.prevalence,
            fmt_opt(t.accuracy)
        );
    }
    out
}
