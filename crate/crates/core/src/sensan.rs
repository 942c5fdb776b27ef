//! Omitted-variable sensitivity analysis: a hypothetical binary covariate U
//! is drawn from the completed outcomes, added to the outcome model, and the
//! low-prevalence coefficient is re-pooled across replicates.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impute::ImputedSet;
use crate::infer::{build_design, pool_fits, AnalysisData, MixedModel, PooledEstimate};
use crate::model::{Regressor, SensitivityParams};
use crate::rng::{float_key, substream, Domain};

/// Draws U for every record given one replicate's completed outcomes.
pub fn gen_u(data: &AnalysisData, lbw: &[u8], params: SensitivityParams, seed: u64, replicate: usize) -> Result<Vec<f64>> {
    params.validate()?;
    if lbw.len() != data.records.len() {
        return Err(Error::Validation(format!(
            "completed outcome has {} values for {} records",
            lbw.len(),
            data.records.len()
        )));
    }
    let mut rng = substream(
        seed,
        Domain::Unobserved,
        &[float_key(params.p1), float_key(params.p2), replicate as u64],
    );
    Ok(data
        .records
        .iter()
        .zip(lbw)
        .map(|(r, &y)| {
            let p = params.probability(r.low_prevalence, y == 1);
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityFit {
    pub params: SensitivityParams,
    pub k1: PooledEstimate,
    pub lambda: PooledEstimate,
}

pub fn sensitivity_fit(
    data: &AnalysisData,
    imputed: &[ImputedSet],
    params: SensitivityParams,
    seed: u64,
) -> Result<SensitivityFit> {
    params.validate()?;
    let fits = imputed
        .par_iter()
        .map(|set| {
            let u = gen_u(data, &set.lbw, params, seed, set.replicate)?;
            let y: Vec<f64> = set.lbw.iter().map(|&v| v as f64).collect();
            MixedModel::new(&build_design(data, Some(&u)))?.fit(&y)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_fits(&fits)?;
    let k1 = *pooled.k1()?;
    let lambda = *pooled
        .get(Regressor::Unobserved)
        .ok_or_else(|| Error::Numerical("U column was dropped from the sensitivity model".into()))?;
    Ok(SensitivityFit { params, k1, lambda })
}

/// Sign quadrant of a grid point: 1 (+,+), 2 (+,−), 3 (−,+), 4 (−,−).
/// Points with a zero parameter belong to no case.
pub fn case_label(p1: f64, p2: f64) -> Option<u8> {
    match (p1.partial_cmp(&0.0)?, p2.partial_cmp(&0.0)?) {
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Greater) => Some(1),
        (std::cmp::Ordering::Greater, std::cmp::Ordering::Less) => Some(2),
        (std::cmp::Ordering::Less, std::cmp::Ordering::Greater) => Some(3),
        (std::cmp::Ordering::Less, std::cmp::Ordering::Less) => Some(4),
        _ => None,
    }
}

/// The 32-point grid, ordered by case, then |p2|, then |p1|.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(32);
    for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        for p2 in [5.0, 10.0] {
            for p1 in [2.5, 5.0, 7.5, 10.0] {
                grid.push((s1 * p1, s2 * p2));
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub case: Option<u8>,
    pub p1: f64,
    pub p2: f64,
    /// `Err` holds the reason a grid point was skipped.
    pub fit: std::result::Result<SensitivityFit, String>,
}

/// One row per grid point; invalid points are kept as skipped rows.
pub fn sensitivity_grid(
    data: &AnalysisData,
    imputed: &[ImputedSet],
    grid: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    grid.iter()
        .map(|&(p1, p2)| {
            let fit = match SensitivityParams::new(p1, p2) {
                Ok(params) => Ok(sensitivity_fit(data, imputed, params, seed)?),
                Err(e) => {
                    log::warn!("skipping sensitivity grid point ({p1}, {p2}): {e}");
                    Err(e.to_string())
                }
            };
            Ok(SensitivityRow {
                case: case_label(p1, p2),
                p1,
                p2,
                fit,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 32);
        let mut counts = [0; 5];
        for &(p1, p2) in &g {
            counts[case_label(p1, p2).unwrap() as usize] += 1;
        }
        assert_eq!(counts, [0, 8, 8, 8, 8]);
        assert_eq!(case_label(0.0, 5.0), None);
    }
}
