//! L1-regularized logistic classifier
//! `min_{w,d} ||w||_1 + D * sum_i log(1 + exp(-y_i (x_i . w + d)))`
//! with labels in {-1, +1} and an unpenalized intercept.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HazardError, Result};
use crate::features::WindowDataset;
use crate::folds::{grouped_stratified_folds, split};
use crate::prox::{self, SmoothObjective, StepRule};

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Design matrix and ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl LogitData {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<LogitData> {
        if x.nrows() != y.len() {
            return Err(HazardError::Dimension {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(HazardError::InvalidLabel(bad));
        }
        Ok(LogitData { x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<LogitData> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(HazardError::Dimension { expected: p, got: r.len() });
        }
        LogitData::new(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]), y)
    }

    /// Selected rows and columns of a window dataset.
    pub fn from_windows(data: &WindowDataset, columns: &[usize], rows: &[usize]) -> LogitData {
        LogitData {
            x: DMatrix::from_fn(rows.len(), columns.len(), |i, j| data.rows[rows[i]].features[columns[j]]),
            y: rows.iter().map(|&i| data.rows[i].label).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.y.iter().filter(|&&v| v > 0.0).count();
        (pos, self.y.len() - pos)
    }

    fn margins(&self, w: &[f64], d: f64) -> DVector<f64> {
        let mut m = &self.x * DVector::from_column_slice(w);
        m.add_scalar_mut(d);
        m
    }

    pub fn with_columns(&self, columns: &[usize]) -> LogitData {
        LogitData {
            x: self.x.select_columns(columns.iter()),
            y: self.y.clone(),
        }
    }
}

/// The penalized objective value.
pub fn objective(w: &[f64], d: f64, data: &LogitData, loss_weight: f64) -> Result<f64> {
    if w.len() != data.n_features() {
        return Err(HazardError::Dimension {
            expected: data.n_features(),
            got: w.len(),
        });
    }
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    if data.n_rows() == 0 {
        return Ok(l1);
    }
    let m = data.margins(w, d);
    let loss: f64 = m.iter().zip(&data.y).map(|(m, y)| softplus(-y * m)).sum();
    Ok(l1 + loss_weight * loss)
}

/// Gradient of the smooth (loss) part with respect to `(w, d)`; the last
/// entry is the intercept derivative.
pub fn loss_gradient(w: &[f64], d: f64, data: &LogitData, loss_weight: f64) -> DVector<f64> {
    let m = data.margins(w, d);
    let r = DVector::from_fn(data.n_rows(), |i, _| {
        -data.y[i] * sigmoid(-data.y[i] * m[i]) * loss_weight
    });
    let gw = data.x.tr_mul(&r);
    let mut g = DVector::zeros(w.len() + 1);
    g.rows_mut(0, w.len()).copy_from(&gw);
    g[w.len()] = r.sum();
    g
}

struct Smooth<'a> {
    data: &'a LogitData,
    loss_weight: f64,
}

impl SmoothObjective for Smooth<'_> {
    fn dim(&self) -> usize {
        self.data.n_features() + 1
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let p = self.data.n_features();
        let w = &z.as_slice()[..p];
        let d = z[p];
        let m = self.data.margins(w, d);
        let mut loss = 0.0;
        let r = DVector::from_fn(self.data.n_rows(), |i, _| {
            let ym = self.data.y[i] * m[i];
            loss += softplus(-ym);
            -self.data.y[i] * sigmoid(-ym) * self.loss_weight
        });
        let gw = self.data.x.tr_mul(&r);
        let mut g = DVector::zeros(p + 1);
        g.rows_mut(0, p).copy_from(&gw);
        g[p] = r.sum();
        let value = self.loss_weight * loss;
        if !value.is_finite() {
            return Err(HazardError::NonFinite { what: "logistic loss" });
        }
        Ok((value, g))
    }

    fn initial_step(&self, _z: &DVector<f64>) -> Result<f64> {
        // Hessian of the loss <= D/4 * [X 1]^T [X 1]; its trace bounds the largest eigenvalue.
        let trace = self.data.x.norm_squared() + self.data.n_rows() as f64;
        Ok(4.0 / (self.loss_weight * trace.max(1.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitFitConfig {
    /// Loss weight `D`.
    pub loss_weight: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub step_rule: StepRule,
}

fn default_max_iterations() -> usize {
    10_000
}
fn default_tolerance() -> f64 {
    1e-8
}
fn default_threshold() -> f64 {
    0.5
}

impl LogitFitConfig {
    pub fn with_loss_weight(loss_weight: f64) -> Self {
        LogitFitConfig {
            loss_weight,
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
            threshold: default_threshold(),
            step_rule: StepRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight > 0.0) || !self.loss_weight.is_finite() {
            return Err(HazardError::Config("logit: loss weight D must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(HazardError::Config("logit: tolerance must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(HazardError::Config("logit: threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for LogitFitConfig {
    fn default() -> Self {
        LogitFitConfig::with_loss_weight(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub w: Vec<f64>,
    pub d: f64,
    pub loss_weight: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LogitFit {
    pub fn margin(&self, features: &[f64]) -> f64 {
        features.iter().zip(&self.w).map(|(x, w)| x * w).sum::<f64>() + self.d
    }
}

pub fn fit(data: &LogitData, config: &LogitFitConfig) -> Result<LogitFit> {
    fit_from(data, config, None)
}

/// Fits from a previous solution (warm start) or from zero.
pub fn fit_from(data: &LogitData, config: &LogitFitConfig, init: Option<&LogitFit>) -> Result<LogitFit> {
    config.validate()?;
    let (pos, neg) = data.counts();
    if pos == 0 || neg == 0 {
        return Err(HazardError::SingleClass);
    }
    let p = data.n_features();
    let mut x0 = DVector::zeros(p + 1);
    if let Some(prev) = init {
        if prev.w.len() != p {
            return Err(HazardError::Dimension { expected: p, got: prev.w.len() });
        }
        x0.rows_mut(0, p).copy_from_slice(&prev.w);
        x0[p] = prev.d;
    }
    let mut weights = vec![1.0; p + 1];
    weights[p] = 0.0;
    let out = prox::minimize(
        &Smooth {
            data,
            loss_weight: config.loss_weight,
        },
        x0,
        &weights,
        config.max_iterations,
        config.tolerance,
        config.step_rule,
    )?;
    if !out.converged {
        log::warn!(
            "logistic fit at D={} did not converge in {} iterations",
            config.loss_weight,
            out.iterations
        );
    }
    Ok(LogitFit {
        w: out.x.as_slice()[..p].to_vec(),
        d: out.x[p],
        loss_weight: config.loss_weight,
        objective_trace: out.objective_trace,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Probability of label +1.
pub fn predict_proba(fit: &LogitFit, features: &[f64]) -> Result<f64> {
    if features.len() != fit.w.len() {
        return Err(HazardError::Dimension {
            expected: fit.w.len(),
            got: features.len(),
        });
    }
    Ok(sigmoid(fit.margin(features)))
}

/// Mean `log(1 + exp(-y m))` over the rows.
pub fn log_loss(fit: &LogitFit, data: &LogitData) -> f64 {
    if data.n_rows() == 0 {
        return 0.0;
    }
    let m = data.margins(&fit.w, fit.d);
    m.iter().zip(&data.y).map(|(m, y)| softplus(-y * m)).sum::<f64>() / data.n_rows() as f64
}

/// Smallest loss weight with a nonzero optimal `w`; below it only the
/// intercept is fitted.
pub fn loss_weight_min(data: &LogitData) -> Result<f64> {
    let (pos, neg) = data.counts();
    if pos == 0 || neg == 0 {
        return Err(HazardError::SingleClass);
    }
    let d0 = (pos as f64 / neg as f64).ln();
    let g = loss_gradient(&vec![0.0; data.n_features()], d0, data, 1.0);
    let gmax = g.rows(0, data.n_features()).amax();
    Ok(if gmax > 0.0 { 1.0 / gmax } else { f64::INFINITY })
}

/// `size` loss weights, log-spaced from `d_min * 10^0.25` to `d_min * 10^3`.
pub fn default_loss_weight_grid(d_min: f64, size: usize) -> Vec<f64> {
    let lo = 0.25f64;
    let hi = 3.0f64;
    if size <= 1 {
        return vec![d_min * 10f64.powf(hi)];
    }
    (0..size)
        .map(|i| d_min * 10f64.powf(lo + (hi - lo) * i as f64 / (size - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightCv {
    #[serde(default = "default_inner_k")]
    pub k: usize,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

fn default_inner_k() -> usize {
    5
}
fn default_grid_size() -> usize {
    6
}

impl Default for LossWeightCv {
    fn default() -> Self {
        LossWeightCv {
            k: default_inner_k(),
            grid: None,
            grid_size: default_grid_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSelection {
    pub best: f64,
    /// Ascending.
    pub grid: Vec<f64>,
    pub mean_log_loss: Vec<f64>,
}

/// Selects `D` by patient-grouped k-fold CV on held-out log-loss. Each fold
/// walks the grid in ascending `D`, warm-starting from the previous fit.
pub fn select_loss_weight(
    data: &LogitData,
    groups: &[&str],
    base: &LogitFitConfig,
    cv: &LossWeightCv,
    seed: u64,
) -> Result<LossWeightSelection> {
    let mut grid = match &cv.grid {
        Some(g) if g.is_empty() => return Err(HazardError::Config("loss-weight grid is empty".into())),
        Some(g) => g.clone(),
        None => {
            let d_min = loss_weight_min(data)?;
            if !d_min.is_finite() {
                return Err(HazardError::Config("features carry no signal for the grid".into()));
            }
            default_loss_weight_grid(d_min, cv.grid_size)
        }
    };
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(LossWeightSelection {
            best: grid[0],
            grid,
            mean_log_loss: vec![f64::NAN],
        });
    }
    let strata: Vec<bool> = data.y.iter().map(|&y| y > 0.0).collect();
    let folds = grouped_stratified_folds(groups, &strata, cv.k, seed)?;
    let per_fold: Vec<Vec<f64>> = (0..cv.k)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (train_idx, test_idx) = split(&folds, f);
            let train = select_rows(data, &train_idx);
            let test = select_rows(data, &test_idx);
            let mut prev: Option<LogitFit> = None;
            grid.iter()
                .map(|&dw| {
                    let cfg = LogitFitConfig {
                        loss_weight: dw,
                        ..base.clone()
                    };
                    let fit = fit_from(&train, &cfg, prev.as_ref())?;
                    let loss = log_loss(&fit, &test);
                    prev = Some(fit);
                    Ok(loss)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mean_log_loss: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / cv.k as f64)
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if mean_log_loss[g] < mean_log_loss[best] {
            best = g;
        }
    }
    Ok(LossWeightSelection {
        best: grid[best],
        grid,
        mean_log_loss,
    })
}

pub fn select_rows(data: &LogitData, rows: &[usize]) -> LogitData {
    LogitData {
        x: data.x.select_rows(rows.iter()),
        y: rows.iter().map(|&i| data.y[i]).collect(),
    }
}
