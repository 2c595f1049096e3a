//! Negative log partial likelihood of the Cox model, its gradient and
//! Hessian, with Efron or Breslow handling of tied event times.
//!
//! Subjects are swept from the latest time to the earliest so risk-set sums
//! accumulate incrementally. Sums are kept relative to the running maximum
//! linear predictor of the risk set and rescaled whenever that maximum grows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HazardError, Result};
use crate::features::SurvivalDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMethod {
    #[default]
    Efron,
    Breslow,
}

/// A tied group: subjects sharing one duration, in sorted order.
#[derive(Debug, Clone, Copy)]
struct Group {
    start: usize,
    end: usize,
    time: f64,
    n_events: usize,
}

/// Survival data arranged for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct CoxProblem {
    n: usize,
    p: usize,
    /// Row-major covariates in ascending-duration order.
    x: Vec<f64>,
    event: Vec<bool>,
    groups: Vec<Group>,
    ties: TieMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    Value,
    Gradient,
    Hessian,
}

struct Derivatives {
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl CoxProblem {
    pub fn new(data: &SurvivalDataset, ties: TieMethod) -> CoxProblem {
        let n = data.n_subjects();
        let p = data.n_factors();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data.durations[a].total_cmp(&data.durations[b]).then(a.cmp(&b)));
        let mut x = Vec::with_capacity(n * p);
        for &i in &order {
            x.extend(data.covariates.row(i).iter());
        }
        let event: Vec<bool> = order.iter().map(|&i| data.events[i]).collect();
        let time: Vec<f64> = order.iter().map(|&i| data.durations[i]).collect();
        let mut groups = Vec::new();
        let mut start = 0;
        while start < n {
            let mut end = start;
            while end < n && time[end] == time[start] {
                end += 1;
            }
            groups.push(Group {
                start,
                end,
                time: time[start],
                n_events: event[start..end].iter().filter(|e| **e).count(),
            });
            start = end;
        }
        CoxProblem {
            n,
            p,
            x,
            event,
            groups,
            ties,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.p
    }

    pub fn n_events(&self) -> usize {
        self.groups.iter().map(|g| g.n_events).sum()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn linear_predictor(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.p {
            return Err(HazardError::Dimension {
                expected: self.p,
                got: beta.len(),
            });
        }
        Ok((0..self.n)
            .map(|i| self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn sweep(&self, beta: &[f64], order: Order) -> Result<Derivatives> {
        let p = self.p;
        let eta = self.linear_predictor(beta)?;
        let want_grad = order != Order::Value;
        let want_hess = order == Order::Hessian;

        let mut shift = f64::NEG_INFINITY;
        let mut r0 = 0.0;
        let mut r1 = vec![0.0; if want_grad { p } else { 0 }];
        let mut r2 = vec![0.0; if want_hess { p * p } else { 0 }];
        let mut h1 = vec![0.0; r1.len()];
        let mut h2 = vec![0.0; r2.len()];
        let mut s1 = vec![0.0; r1.len()];

        let mut value = 0.0;
        let mut gradient: DVector<f64> = DVector::zeros(if want_grad { p } else { 0 });
        let mut hessian: DMatrix<f64> = DMatrix::zeros(if want_hess { p } else { 0 }, if want_hess { p } else { 0 });

        for g in self.groups.iter().rev() {
            for i in g.start..g.end {
                if eta[i] > shift {
                    let scale = (shift - eta[i]).exp();
                    r0 *= scale;
                    r1.iter_mut().for_each(|v| *v *= scale);
                    r2.iter_mut().for_each(|v| *v *= scale);
                    shift = eta[i];
                }
                let w = (eta[i] - shift).exp();
                r0 += w;
                if want_grad {
                    let xi = self.row(i);
                    for a in 0..p {
                        r1[a] += w * xi[a];
                    }
                    if want_hess {
                        for a in 0..p {
                            let wa = w * xi[a];
                            for b in 0..p {
                                r2[a * p + b] += wa * xi[b];
                            }
                        }
                    }
                }
            }
            if g.n_events == 0 {
                continue;
            }

            let m = g.n_events as f64;
            let mut h0 = 0.0;
            h1.iter_mut().for_each(|v| *v = 0.0);
            h2.iter_mut().for_each(|v| *v = 0.0);
            for i in (g.start..g.end).filter(|&i| self.event[i]) {
                value -= eta[i];
                let w = (eta[i] - shift).exp();
                h0 += w;
                if want_grad {
                    let xi = self.row(i);
                    for a in 0..p {
                        gradient[a] -= xi[a];
                        h1[a] += w * xi[a];
                    }
                    if want_hess {
                        for a in 0..p {
                            let wa = w * xi[a];
                            for b in 0..p {
                                h2[a * p + b] += wa * xi[b];
                            }
                        }
                    }
                }
            }

            let terms = match self.ties {
                TieMethod::Efron => g.n_events,
                TieMethod::Breslow => 1,
            };
            let multiplicity = match self.ties {
                TieMethod::Efron => 1.0,
                TieMethod::Breslow => m,
            };
            for l in 0..terms {
                let frac = match self.ties {
                    TieMethod::Efron => l as f64 / m,
                    TieMethod::Breslow => 0.0,
                };
                let s0 = r0 - frac * h0;
                value += multiplicity * (shift + s0.ln());
                if want_grad {
                    for a in 0..p {
                        s1[a] = r1[a] - frac * h1[a];
                        gradient[a] += multiplicity * s1[a] / s0;
                    }
                    if want_hess {
                        for a in 0..p {
                            for b in 0..p {
                                let s2 = r2[a * p + b] - frac * h2[a * p + b];
                                hessian[(a, b)] += multiplicity * (s2 / s0 - s1[a] * s1[b] / (s0 * s0));
                            }
                        }
                    }
                }
            }
        }

        if !value.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
            return Err(HazardError::NonFinite {
                what: "partial likelihood",
            });
        }
        Ok(Derivatives {
            value,
            gradient,
            hessian,
        })
    }

    /// `-l(beta)` summed over distinct event times.
    pub fn neg_log_likelihood(&self, beta: &[f64]) -> Result<f64> {
        Ok(self.sweep(beta, Order::Value)?.value)
    }

    pub fn value_and_gradient(&self, beta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let d = self.sweep(beta, Order::Gradient)?;
        Ok((d.value, d.gradient))
    }

    pub fn value_gradient_hessian(&self, beta: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let d = self.sweep(beta, Order::Hessian)?;
        Ok((d.value, d.gradient, d.hessian))
    }

    /// Breslow increments `d_j / sum_{Y_i >= t_j} exp(eta_i)` at each
    /// distinct event time, ascending.
    pub fn baseline_increments(&self, beta: &[f64]) -> Result<Vec<(f64, f64)>> {
        let eta = self.linear_predictor(beta)?;
        let mut out = Vec::new();
        let mut shift = f64::NEG_INFINITY;
        let mut r0 = 0.0;
        for g in self.groups.iter().rev() {
            for &e in &eta[g.start..g.end] {
                if e > shift {
                    r0 *= (shift - e).exp();
                    shift = e;
                }
                r0 += (e - shift).exp();
            }
            if g.n_events > 0 {
                let inc = (g.n_events as f64).ln() - shift - r0.ln();
                out.push((g.time, inc.exp()));
            }
        }
        out.reverse();
        if out.iter().any(|(_, v)| !v.is_finite()) {
            return Err(HazardError::NonFinite {
                what: "baseline hazard",
            });
        }
        Ok(out)
    }
}

/// `-l(beta)` with Efron ties.
pub fn neg_log_partial_likelihood(beta: &[f64], data: &SurvivalDataset) -> Result<f64> {
    CoxProblem::new(data, TieMethod::Efron).neg_log_likelihood(beta)
}

pub fn gradient_neg_log_partial_likelihood(beta: &[f64], data: &SurvivalDataset) -> Result<DVector<f64>> {
    Ok(CoxProblem::new(data, TieMethod::Efron).value_and_gradient(beta)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(x: &[f64], t: &[f64], e: &[bool]) -> SurvivalDataset {
        let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
        SurvivalDataset::from_rows(&rows, t.to_vec(), e.to_vec()).unwrap()
    }

    #[test]
    fn beta_zero_untied() {
        let d = data(&[0.3, -1.0], &[1.0, 2.0], &[true, true]);
        let v = neg_log_partial_likelihood(&[0.0], &d).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn beta_zero_tied() {
        let d = data(&[0.3, -1.0, 2.0], &[1.0, 1.0, 2.0], &[true, true, true]);
        let v = neg_log_partial_likelihood(&[0.0], &d).unwrap();
        assert!((v - (3f64.ln() + 2f64.ln())).abs() < 1e-15);
        assert!((v - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn two_subject_example() {
        let d = data(&[1.0, 0.0], &[1.0, 2.0], &[true, true]);
        let v = neg_log_partial_likelihood(&[2f64.ln()], &d).unwrap();
        assert!((v - (3f64.ln() - 2f64.ln())).abs() < 1e-14);
        assert!((v - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn zero_covariates_zero_gradient() {
        let d = data(&[0.0, 0.0, 0.0], &[1.0, 1.0, 3.0], &[true, true, false]);
        let g = gradient_neg_log_partial_likelihood(&[0.7], &d).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn single_subject_gradient_cancels() {
        let d = data(&[1.7], &[4.0], &[true]);
        for b in [-3.0, 0.0, 2.5] {
            let g = gradient_neg_log_partial_likelihood(&[b], &d).unwrap();
            assert!(g[0].abs() < 1e-15);
        }
    }

    #[test]
    fn large_linear_predictor_stays_finite() {
        let d = data(&[400.0, 0.0, -400.0], &[1.0, 2.0, 3.0], &[true, true, true]);
        let v = neg_log_partial_likelihood(&[3.0], &d).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn breslow_increments_beta_zero() {
        let d = data(&[0.0, 0.0, 0.0], &[1.0, 1.0, 2.0], &[true, true, true]);
        let inc = CoxProblem::new(&d, TieMethod::Efron).baseline_increments(&[0.0]).unwrap();
        assert_eq!(inc.len(), 2);
        assert!((inc[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((inc[1].1 - 1.0).abs() < 1e-15);
    }
}
