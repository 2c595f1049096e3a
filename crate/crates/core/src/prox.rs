//! Proximal gradient descent with backtracking for `f(x) + sum_j w_j |x_j|`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// `sign(z) * max(|z| - t, 0)`.
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// The smooth part of a composite objective.
pub trait SmoothObjective {
    fn dim(&self) -> usize;

    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// A starting step size, typically the inverse of a Lipschitz bound on
    /// the gradient.
    fn initial_step(&self, x: &DVector<f64>) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRule {
    /// Step multiplier applied on each rejected trial step.
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    /// Step multiplier applied after each accepted step.
    #[serde(default = "default_grow")]
    pub grow: f64,
}

fn default_shrink() -> f64 {
    0.5
}
fn default_grow() -> f64 {
    1.5
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule {
            shrink: default_shrink(),
            grow: default_grow(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxOutcome {
    pub x: DVector<f64>,
    /// Composite objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn penalty(x: &DVector<f64>, weights: &[f64]) -> f64 {
    x.iter().zip(weights).map(|(v, w)| w * v.abs()).sum()
}

/// Minimizes `smooth(x) + sum_j weights[j] * |x_j|` from `x0`.
///
/// Each step solves the prox subproblem and shrinks the step until the
/// quadratic upper-bound condition holds, so the composite objective never
/// increases. Stops when the relative objective change drops below
/// `tolerance`, or the iterate is a fixed point.
pub fn minimize<F: SmoothObjective>(
    smooth: &F,
    x0: DVector<f64>,
    weights: &[f64],
    max_iterations: usize,
    tolerance: f64,
    rule: StepRule,
) -> Result<ProxOutcome> {
    debug_assert_eq!(weights.len(), smooth.dim());
    let mut x = x0;
    let (mut f, mut g) = smooth.value_and_gradient(&x)?;
    let mut total = f + penalty(&x, weights);
    let mut trace = vec![total];
    let mut step = smooth.initial_step(&x)?;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        iterations += 1;
        let mut accepted = None;
        while step > f64::MIN_POSITIVE {
            let z = DVector::from_fn(x.len(), |j, _| {
                soft_threshold(x[j] - step * g[j], step * weights[j])
            });
            let d = &z - &x;
            let (fz, gz) = smooth.value_and_gradient(&z)?;
            let bound = f + g.dot(&d) + d.norm_squared() / (2.0 * step);
            if fz <= bound + 4.0 * f64::EPSILON * fz.abs().max(f.abs()) {
                accepted = Some((z, fz, gz, d.norm_squared() == 0.0));
                break;
            }
            step *= rule.shrink;
        }
        let Some((z, fz, gz, fixed_point)) = accepted else {
            // Step underflow: no representable descent step remains.
            converged = true;
            break;
        };
        let new_total = fz + penalty(&z, weights);
        let change = (total - new_total).abs();
        x = z;
        f = fz;
        g = gz;
        trace.push(new_total);
        let scale = total.abs().max(new_total.abs()).max(f64::MIN_POSITIVE);
        total = new_total;
        if fixed_point || change <= tolerance * scale {
            converged = true;
            break;
        }
        step *= rule.grow;
    }

    Ok(ProxOutcome {
        x,
        objective_trace: trace,
        iterations,
        converged,
    })
}
