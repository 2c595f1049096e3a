use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gamma_max, penalized_solve, CoxFitConfig, CoxProblem};
use crate::error::{HazardError, Result};
use crate::features::SurvivalDataset;
use crate::folds::{split, stratified_folds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit penalty grid; when absent a log-spaced grid below
    /// `gamma_max` is used.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_grid_ratio")]
    pub grid_ratio: f64,
}

fn default_k() -> usize {
    5
}
fn default_grid_size() -> usize {
    30
}
fn default_grid_ratio() -> f64 {
    1e-3
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: default_k(),
            seed: 0,
            grid: None,
            grid_size: default_grid_size(),
            grid_ratio: default_grid_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSelection {
    pub best_gamma: f64,
    /// Penalties in descending order.
    pub grid: Vec<f64>,
    /// Mean held-out log partial likelihood per grid value.
    pub mean_heldout: Vec<f64>,
    pub folds: Vec<usize>,
}

/// `size` log-spaced values from `gamma_max` down to `gamma_max * ratio`.
pub fn default_gamma_grid(gamma_max: f64, size: usize, ratio: f64) -> Vec<f64> {
    if size <= 1 {
        return vec![gamma_max];
    }
    let step = ratio.ln() / (size - 1) as f64;
    (0..size).map(|i| gamma_max * (step * i as f64).exp()).collect()
}

/// Event-stratified folds in which every held-out fold has an event and
/// every training split keeps one. Redraws once with the next seed.
pub fn survival_folds(events: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let usable = |f: &[usize]| {
        (0..k).all(|fold| {
            let held = (0..f.len()).filter(|&i| f[i] == fold && events[i]).count();
            let total = events.iter().filter(|e| **e).count();
            held > 0 && held < total
        })
    };
    for attempt in 0..2u64 {
        let f = stratified_folds(events, k, seed.wrapping_add(attempt))?;
        if usable(&f) {
            return Ok(f);
        }
    }
    Err(HazardError::Folds(format!(
        "a fold has no events; {} events across {k} folds",
        events.iter().filter(|e| **e).count()
    )))
}

/// Picks the penalty maximizing mean held-out log partial likelihood.
///
/// Each fold walks the grid from the largest penalty down, warm-starting
/// every fit from the previous one. Penalties are rescaled by the training
/// fraction of the fold so that they act on the same per-subject scale as
/// the full-data fit.
pub fn cv_select_gamma(data: &SurvivalDataset, fit: &CoxFitConfig, cv: &CvConfig) -> Result<GammaSelection> {
    fit.validate()?;
    if data.n_events() == 0 {
        return Err(HazardError::NoEvents);
    }
    let mut grid = match &cv.grid {
        Some(g) if g.is_empty() => return Err(HazardError::Config("gamma grid is empty".into())),
        Some(g) => g.clone(),
        None => default_gamma_grid(gamma_max(data)?, cv.grid_size, cv.grid_ratio),
    };
    if let Some(g) = grid.iter().find(|g| !(**g >= 0.0)) {
        return Err(HazardError::Config(format!("gamma grid value {g} is negative")));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let folds = survival_folds(&data.events, cv.k, cv.seed)?;
    let n = data.n_subjects() as f64;
    let per_fold: Vec<Vec<f64>> = (0..cv.k)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (train_idx, test_idx) = split(&folds, f);
            let train = CoxProblem::new(&data.subset(&train_idx), fit.ties);
            let test = CoxProblem::new(&data.subset(&test_idx), fit.ties);
            let scale = train_idx.len() as f64 / n;
            let mut beta: Option<Vec<f64>> = None;
            grid.iter()
                .map(|&gamma| {
                    let cfg = CoxFitConfig {
                        gamma: gamma * scale,
                        ..fit.clone()
                    };
                    let sol = penalized_solve(&train, &cfg, beta.as_deref())?;
                    let ll = -test.neg_log_likelihood(&sol.beta)?;
                    beta = Some(sol.beta);
                    Ok(ll)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mean_heldout: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / cv.k as f64)
        .collect();
    // Strict comparison keeps the larger penalty on ties.
    let mut best = 0;
    for g in 1..grid.len() {
        if mean_heldout[g] > mean_heldout[best] {
            best = g;
        }
    }
    Ok(GammaSelection {
        best_gamma: grid[best],
        grid,
        mean_heldout,
        folds,
    })
}
