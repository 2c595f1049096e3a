use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::CohortCriteria;
use crate::cox::{CoxFitConfig, CvConfig, TieMethod};
use crate::error::{HazardError, Result};
use crate::eval::EvalConfig;
use crate::features::{SurvivalOptions, WindowParams, ALLOWED_OBSERVATION_MONTHS};
use crate::logit::{LogitFitConfig, LossWeightCv};
use crate::prox::StepRule;
use crate::synth::SynthConfig;

/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub events: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorCodes {
    pub candidate: Vec<String>,
    pub expert: Vec<String>,
    /// Codes imputed by mode rather than mean.
    #[serde(default)]
    pub categorical: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalSection {
    #[serde(default = "default_baseline_days")]
    pub baseline_days: u32,
}

fn default_baseline_days() -> u32 {
    SurvivalOptions::default().baseline_days
}

impl Default for SurvivalSection {
    fn default() -> Self {
        SurvivalSection {
            baseline_days: default_baseline_days(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    /// Observation lengths to featurize and trace, in months.
    #[serde(default = "default_periods")]
    pub observation_months: Vec<u32>,
    /// The period used for `fit-glm` and the feature-set comparison.
    #[serde(default = "default_primary")]
    pub primary_months: u32,
    #[serde(default = "default_prediction_months")]
    pub prediction_months: u32,
    /// `null` emits one window per patient.
    #[serde(default = "default_stride")]
    pub stride_months: Option<u32>,
}

fn default_periods() -> Vec<u32> {
    ALLOWED_OBSERVATION_MONTHS.to_vec()
}
fn default_primary() -> u32 {
    12
}
fn default_prediction_months() -> u32 {
    WindowParams::rolling(12).prediction_months
}
fn default_stride() -> Option<u32> {
    WindowParams::rolling(12).stride_months
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            observation_months: default_periods(),
            primary_months: default_primary(),
            prediction_months: default_prediction_months(),
            stride_months: default_stride(),
        }
    }
}

impl WindowSection {
    pub fn params(&self, observation_months: u32) -> WindowParams {
        WindowParams {
            observation_months,
            prediction_months: self.prediction_months,
            stride_months: self.stride_months,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoxSection {
    /// Fixed penalty; when absent it is chosen by cross-validation.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_cox_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_cox_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub ties: TieMethod,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub gamma_grid: Option<Vec<f64>>,
    #[serde(default = "default_gamma_grid_size")]
    pub gamma_grid_size: usize,
    #[serde(default = "default_gamma_grid_ratio")]
    pub gamma_grid_ratio: f64,
    /// Wald significance level for the ranked factor list.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_cox_iterations() -> usize {
    CoxFitConfig::default().max_iterations
}
fn default_cox_tolerance() -> f64 {
    CoxFitConfig::default().tolerance
}
fn default_cv_folds() -> usize {
    CvConfig::default().k
}
fn default_gamma_grid_size() -> usize {
    CvConfig::default().grid_size
}
fn default_gamma_grid_ratio() -> f64 {
    CvConfig::default().grid_ratio
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for CoxSection {
    fn default() -> Self {
        CoxSection {
            gamma: None,
            max_iterations: default_cox_iterations(),
            tolerance: default_cox_tolerance(),
            step_rule: StepRule::default(),
            ties: TieMethod::default(),
            cv_folds: default_cv_folds(),
            gamma_grid: None,
            gamma_grid_size: default_gamma_grid_size(),
            gamma_grid_ratio: default_gamma_grid_ratio(),
            alpha: default_alpha(),
        }
    }
}

impl CoxSection {
    pub fn fit_config(&self, gamma: f64) -> CoxFitConfig {
        CoxFitConfig {
            gamma,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            step_rule: self.step_rule,
            ties: self.ties,
        }
    }

    pub fn cv_config(&self, seed: u64) -> CvConfig {
        CvConfig {
            k: self.cv_folds,
            seed,
            grid: self.gamma_grid.clone(),
            grid_size: self.gamma_grid_size,
            grid_ratio: self.gamma_grid_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitSection {
    /// Fixed loss weight `D` for `fit-glm`; when absent it is chosen by
    /// grouped cross-validation.
    #[serde(default)]
    pub loss_weight: Option<f64>,
    #[serde(default = "default_logit_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_logit_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default = "default_outer_folds")]
    pub outer_folds: usize,
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
    #[serde(default)]
    pub loss_weight_grid: Option<Vec<f64>>,
    #[serde(default = "default_loss_weight_grid_size")]
    pub loss_weight_grid_size: usize,
}

fn default_logit_iterations() -> usize {
    LogitFitConfig::default().max_iterations
}
fn default_logit_tolerance() -> f64 {
    LogitFitConfig::default().tolerance
}
fn default_threshold() -> f64 {
    LogitFitConfig::default().threshold
}
fn default_outer_folds() -> usize {
    EvalConfig::default().k
}
fn default_inner_folds() -> usize {
    LossWeightCv::default().k
}
fn default_loss_weight_grid_size() -> usize {
    LossWeightCv::default().grid_size
}

impl Default for LogitSection {
    fn default() -> Self {
        LogitSection {
            loss_weight: None,
            max_iterations: default_logit_iterations(),
            tolerance: default_logit_tolerance(),
            threshold: default_threshold(),
            step_rule: StepRule::default(),
            outer_folds: default_outer_folds(),
            inner_folds: default_inner_folds(),
            loss_weight_grid: None,
            loss_weight_grid_size: default_loss_weight_grid_size(),
        }
    }
}

impl LogitSection {
    /// `loss_weight` here is a placeholder replaced by every fit.
    pub fn fit_config(&self) -> LogitFitConfig {
        LogitFitConfig {
            loss_weight: self.loss_weight.unwrap_or(1.0),
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            threshold: self.threshold,
            step_rule: self.step_rule,
        }
    }

    pub fn loss_weight_cv(&self) -> LossWeightCv {
        LossWeightCv {
            k: self.inner_folds,
            grid: self.loss_weight_grid.clone(),
            grid_size: self.loss_weight_grid_size,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k: self.outer_folds,
            logit: self.fit_config(),
            loss_weight_cv: self.loss_weight_cv(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Drives every randomized stage: fold assignment and, when `synth`
    /// is present, the generator.
    pub seed: u64,
    #[serde(default)]
    pub cohort: CohortCriteria,
    pub factors: FactorCodes,
    #[serde(default)]
    pub survival: SurvivalSection,
    #[serde(default)]
    pub windows: WindowSection,
    #[serde(default)]
    pub cox: CoxSection,
    #[serde(default)]
    pub logit: LogitSection,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn non_empty_unique(codes: &[String], what: &str) -> Result<()> {
    if codes.is_empty() {
        return Err(HazardError::Config(format!("factors.{what} must be non-empty")));
    }
    let mut seen = BTreeSet::new();
    if let Some(c) = codes.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(HazardError::Config(format!("factors.{what} lists {c} twice")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| HazardError::io(path, e))?;
        PipelineConfig::from_json(&text)
    }

    /// Sets the master seed, and the generator seed when one is configured.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
    }

    /// Checks every section. Paths are checked separately, per stage.
    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        let f = &self.factors;
        non_empty_unique(&f.candidate, "candidate")?;
        non_empty_unique(&f.expert, "expert")?;
        if let Some(c) = f.expert.iter().find(|c| !f.candidate.contains(c)) {
            return Err(HazardError::Config(format!("expert code {c} is not a candidate code")));
        }
        if let Some(c) = f.categorical.iter().find(|c| !f.candidate.contains(c)) {
            return Err(HazardError::Config(format!("categorical code {c} is not a candidate code")));
        }
        if self.survival.baseline_days == 0 {
            return Err(HazardError::Config("survival.baseline_days must be positive".into()));
        }

        let w = &self.windows;
        if w.observation_months.is_empty() {
            return Err(HazardError::Config("windows.observation_months must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for &n in &w.observation_months {
            if !seen.insert(n) {
                return Err(HazardError::Config(format!("windows.observation_months lists {n} twice")));
            }
            w.params(n).validate()?;
        }
        if !w.observation_months.contains(&w.primary_months) {
            return Err(HazardError::Config(format!(
                "windows.primary_months {} is not among observation_months",
                w.primary_months
            )));
        }

        let c = &self.cox;
        c.fit_config(c.gamma.unwrap_or(0.0)).validate()?;
        if c.cv_folds < 2 {
            return Err(HazardError::Config("cox.cv_folds must be at least 2".into()));
        }
        if c.gamma.is_none() && c.gamma_grid.is_none() && (c.gamma_grid_size == 0 || !(c.gamma_grid_ratio > 0.0 && c.gamma_grid_ratio < 1.0)) {
            return Err(HazardError::Config(
                "cox.gamma_grid_size must be positive and gamma_grid_ratio in (0, 1)".into(),
            ));
        }
        if !(c.alpha > 0.0 && c.alpha < 1.0) {
            return Err(HazardError::Config("cox.alpha must lie in (0, 1)".into()));
        }

        let l = &self.logit;
        l.fit_config().validate()?;
        if l.outer_folds < 2 || l.inner_folds < 2 {
            return Err(HazardError::Config("logit fold counts must be at least 2".into()));
        }
        if l.loss_weight_grid.is_none() && l.loss_weight_grid_size == 0 {
            return Err(HazardError::Config("logit.loss_weight_grid_size must be positive".into()));
        }

        if let Some(s) = &self.synth {
            s.validate()?;
            if s.seed != self.seed {
                return Err(HazardError::Config(format!(
                    "synth.seed {} differs from seed {}",
                    s.seed, self.seed
                )));
            }
        }
        Ok(())
    }

    pub fn survival_options(&self) -> SurvivalOptions {
        SurvivalOptions {
            baseline_days: self.survival.baseline_days,
            categorical_codes: self.factors.categorical.clone(),
        }
    }

    /// SHA-256 of the canonical (field-ordered, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
