//! L1-penalized Cox proportional hazards: fitting, factor ranking, baseline
//! hazard and adjusted survival curves.
//!
//! The penalized problem is `min_beta -l(beta) + gamma * ||beta||_1`, where
//! `l` is the log partial likelihood with Efron's correction for ties.

mod cv;
mod likelihood;
mod survival;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HazardError, Result};
use crate::features::SurvivalDataset;
use crate::prox::{self, SmoothObjective, StepRule};

pub use cv::{cv_select_gamma, default_gamma_grid, survival_folds, CvConfig, GammaSelection};
pub use likelihood::{gradient_neg_log_partial_likelihood, neg_log_partial_likelihood, CoxProblem, TieMethod};
pub use survival::{adjusted_survival, BaselineHazard, SurvivalCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoxFitConfig {
    pub gamma: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Relative objective change at which iteration stops.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub ties: TieMethod,
}

fn default_max_iterations() -> usize {
    10_000
}
fn default_tolerance() -> f64 {
    1e-7
}

impl Default for CoxFitConfig {
    fn default() -> Self {
        CoxFitConfig::with_gamma(0.0)
    }
}

impl CoxFitConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        CoxFitConfig {
            gamma,
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
            step_rule: StepRule::default(),
            ties: TieMethod::Efron,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(HazardError::Config("cox: gamma must be a non-negative number".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(HazardError::Config("cox: tolerance must be positive".into()));
        }
        if !(self.step_rule.shrink > 0.0 && self.step_rule.shrink < 1.0) || !(self.step_rule.grow >= 1.0) {
            return Err(HazardError::Config("cox: step rule needs 0 < shrink < 1 <= grow".into()));
        }
        Ok(())
    }
}

/// Unpenalized Wald statistics for one support factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldStat {
    pub index: usize,
    pub coefficient: f64,
    pub std_error: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub factor_codes: Vec<String>,
    pub gamma: f64,
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub baseline: BaselineHazard,
    pub wald: Vec<WaldStat>,
    pub refit_converged: bool,
}

impl CoxFit {
    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    pub fn wald_for(&self, index: usize) -> Option<&WaldStat> {
        self.wald.iter().find(|w| w.index == index)
    }
}

struct CoxSmooth<'a>(&'a CoxProblem);

impl SmoothObjective for CoxSmooth<'_> {
    fn dim(&self) -> usize {
        self.0.n_factors()
    }

    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.0.value_and_gradient(x.as_slice())
    }

    fn initial_step(&self, x: &DVector<f64>) -> Result<f64> {
        // The Hessian trace bounds its largest eigenvalue.
        let (_, _, h) = self.0.value_gradient_hessian(x.as_slice())?;
        let trace = h.trace();
        Ok(if trace > 0.0 { 1.0 / trace } else { 1.0 })
    }
}

/// Smallest penalty with an all-zero solution: `max_j |grad_j(0)|`.
pub fn gamma_max(data: &SurvivalDataset) -> Result<f64> {
    let g = gradient_neg_log_partial_likelihood(&vec![0.0; data.n_factors()], data)?;
    Ok(g.amax())
}

pub fn fit(data: &SurvivalDataset, config: &CoxFitConfig) -> Result<CoxFit> {
    fit_from(data, config, None)
}

/// Fits from `init` (warm start) or from zero.
pub fn fit_from(data: &SurvivalDataset, config: &CoxFitConfig, init: Option<&[f64]>) -> Result<CoxFit> {
    config.validate()?;
    if data.n_events() == 0 {
        return Err(HazardError::NoEvents);
    }
    let problem = CoxProblem::new(data, config.ties);
    let beta = penalized_solve(&problem, config, init)?;
    let support: Vec<usize> = (0..beta.beta.len()).filter(|&j| beta.beta[j] != 0.0).collect();
    let (wald, refit_converged) = wald_refit(data, &support, config.ties)?;
    let baseline = BaselineHazard::from_increments(&problem.baseline_increments(&beta.beta)?);
    Ok(CoxFit {
        factor_codes: data.factor_codes.clone(),
        gamma: config.gamma,
        beta: beta.beta,
        support,
        objective_trace: beta.trace,
        iterations: beta.iterations,
        converged: beta.converged,
        baseline,
        wald,
        refit_converged,
    })
}

pub(crate) struct PenalizedSolution {
    pub beta: Vec<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn penalized_solve(
    problem: &CoxProblem,
    config: &CoxFitConfig,
    init: Option<&[f64]>,
) -> Result<PenalizedSolution> {
    let p = problem.n_factors();
    let x0 = match init {
        Some(b) if b.len() == p => DVector::from_column_slice(b),
        Some(b) => return Err(HazardError::Dimension { expected: p, got: b.len() }),
        None => DVector::zeros(p),
    };
    let out = prox::minimize(
        &CoxSmooth(problem),
        x0,
        &vec![config.gamma; p],
        config.max_iterations,
        config.tolerance,
        config.step_rule,
    )?;
    if !out.converged {
        log::warn!(
            "cox fit at gamma={} did not converge in {} iterations",
            config.gamma,
            out.iterations
        );
    }
    Ok(PenalizedSolution {
        beta: out.x.iter().copied().collect(),
        trace: out.objective_trace,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Two-sided normal p-value of a Wald z statistic.
pub fn wald_p_value(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Damped Newton iteration for the unpenalized likelihood restricted to
/// the columns in `support`. Returns the estimate, its Hessian and whether
/// the gradient criterion was met.
pub fn newton_refit(
    data: &SurvivalDataset,
    support: &[usize],
    ties: TieMethod,
) -> Result<(Vec<f64>, DMatrix<f64>, bool)> {
    let sub = SurvivalDataset::new(
        support.iter().map(|&j| data.factor_codes[j].clone()).collect(),
        data.covariates.select_columns(support.iter()),
        data.durations.clone(),
        data.events.clone(),
    )?;
    let problem = CoxProblem::new(&sub, ties);
    let mut beta = vec![0.0; support.len()];
    let (mut value, mut grad, mut hess) = problem.value_gradient_hessian(&beta)?;
    let mut converged = false;
    for _ in 0..100 {
        if grad.amax() <= 1e-9 * value.abs().max(1.0) {
            converged = true;
            break;
        }
        let Some(chol) = hess.clone().cholesky() else {
            break;
        };
        let delta = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-10 {
            let trial: Vec<f64> = beta.iter().zip(delta.iter()).map(|(b, d)| b - t * d).collect();
            if let Ok(v) = problem.neg_log_likelihood(&trial) {
                if v <= value {
                    beta = trial;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        (value, grad, hess) = problem.value_gradient_hessian(&beta)?;
    }
    Ok((beta, hess, converged))
}

fn wald_refit(data: &SurvivalDataset, support: &[usize], ties: TieMethod) -> Result<(Vec<WaldStat>, bool)> {
    if support.is_empty() {
        return Ok((Vec::new(), true));
    }
    let (beta, hess, converged) = newton_refit(data, support, ties)?;
    let inverse = hess.try_inverse();
    let stats = support
        .iter()
        .enumerate()
        .map(|(k, &index)| {
            let var = inverse.as_ref().map_or(f64::NAN, |inv| inv[(k, k)]);
            let std_error = if var > 0.0 { var.sqrt() } else { f64::NAN };
            let p_value = if std_error.is_finite() {
                wald_p_value(beta[k] / std_error)
            } else {
                f64::NAN
            };
            WaldStat {
                index,
                coefficient: beta[k],
                std_error,
                p_value,
            }
        })
        .collect();
    Ok((stats, converged && inverse.is_some()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFactor {
    pub code: String,
    /// Penalized coefficient.
    pub coefficient: f64,
    pub p_value: f64,
    pub positive: bool,
}

/// Support factors significant at `alpha`, by descending penalized
/// coefficient.
pub fn rank_factors(fit: &CoxFit, alpha: f64) -> Vec<RankedFactor> {
    let mut ranked: Vec<RankedFactor> = fit
        .support
        .iter()
        .filter_map(|&j| {
            let w = fit.wald_for(j)?;
            (w.p_value < alpha).then(|| RankedFactor {
                code: fit.factor_codes[j].clone(),
                coefficient: fit.beta[j],
                p_value: w.p_value,
                positive: fit.beta[j] > 0.0,
            })
        })
        .collect();
    ranked.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient).then_with(|| a.code.cmp(&b.code)));
    ranked
}
