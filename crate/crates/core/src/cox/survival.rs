use serde::{Deserialize, Serialize};

use super::CoxFit;
use crate::error::{HazardError, Result};
use crate::features::SurvivalDataset;

/// Breslow cumulative baseline hazard as a right-continuous step function.
/// The first point is always `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub points: Vec<(f64, f64)>,
}

impl BaselineHazard {
    pub fn from_increments(increments: &[(f64, f64)]) -> BaselineHazard {
        let mut points = Vec::with_capacity(increments.len() + 1);
        points.push((0.0, 0.0));
        let mut cum = 0.0;
        for &(t, inc) in increments {
            cum += inc;
            points.push((t, cum));
        }
        BaselineHazard { points }
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = self.points.partition_point(|(time, _)| *time <= t);
        if k == 0 {
            0.0
        } else {
            self.points[k - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// The level in the factor's original units.
    pub level: f64,
    pub points: Vec<(f64, f64)>,
}

/// Survival curves with `factor_code` fixed at each of `levels` (original
/// units) and every other factor held at its mean, or its mode for
/// categorical factors.
pub fn adjusted_survival(
    fit: &CoxFit,
    data: &SurvivalDataset,
    factor_code: &str,
    levels: &[f64],
) -> Result<Vec<SurvivalCurve>> {
    let j = fit
        .factor_codes
        .iter()
        .position(|c| c == factor_code)
        .ok_or_else(|| HazardError::UnknownFactor(factor_code.to_string()))?;
    if data.factor_codes != fit.factor_codes {
        return Err(HazardError::Artifact(
            "survival dataset columns differ from the fitted model".into(),
        ));
    }
    let reference: f64 = (0..fit.beta.len())
        .filter(|&k| k != j && fit.beta[k] != 0.0)
        .map(|k| {
            let x = if data.categorical[k] { data.column_mode(k) } else { 0.0 };
            x * fit.beta[k]
        })
        .sum();
    Ok(levels
        .iter()
        .map(|&level| {
            let lp = reference + fit.beta[j] * data.standardization[j].apply(level);
            let risk = lp.exp();
            SurvivalCurve {
                level,
                points: fit
                    .baseline
                    .points
                    .iter()
                    .map(|&(t, h)| (t, (-h * risk).exp()))
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_function_lookup() {
        let b = BaselineHazard::from_increments(&[(1.0, 0.5), (3.0, 0.25)]);
        assert_eq!(b.at(0.0), 0.0);
        assert_eq!(b.at(0.99), 0.0);
        assert_eq!(b.at(1.0), 0.5);
        assert_eq!(b.at(2.0), 0.5);
        assert_eq!(b.at(10.0), 0.75);
    }
}
