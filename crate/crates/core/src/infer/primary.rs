//! Per-replicate fits of the outcome model, pooling, and the descriptive
//! comparisons reported next to the model estimate.

use rayon::prelude::*;

use super::design::{build_design, AnalysisData};
use super::mixed::{MixedFit, MixedModel};
use super::rubin::{did_contrasts, rubin_combine, Contrasts, PooledEstimate};
use crate::error::{Error, Result};
use crate::impute::ImputedSet;
use crate::model::Regressor;

#[derive(Debug, Clone, PartialEq)]
pub struct PooledRow {
    pub regressor: Regressor,
    pub pooled: PooledEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledInference {
    pub replicates: usize,
    pub rows: Vec<PooledRow>,
}

impl PooledInference {
    pub fn get(&self, r: Regressor) -> Option<&PooledEstimate> {
        self.rows.iter().find(|row| row.regressor == r).map(|row| &row.pooled)
    }

    pub fn k1(&self) -> Result<&PooledEstimate> {
        self.get(Regressor::LowPrevalence)
            .ok_or_else(|| Error::Validation("low_prevalence is not in the fitted model".into()))
    }
}

/// Pools fits that share one column layout.
pub fn pool_fits(fits: &[MixedFit]) -> Result<PooledInference> {
    let first = fits
        .first()
        .ok_or_else(|| Error::Validation("no replicate fits to pool".into()))?;
    if fits.iter().any(|f| f.columns != first.columns) {
        return Err(Error::Validation("replicate fits have different columns".into()));
    }
    let rows = first
        .columns
        .iter()
        .enumerate()
        .map(|(j, &regressor)| {
            let est: Vec<f64> = fits.iter().map(|f| f.coefficients[j]).collect();
            let var: Vec<f64> = fits.iter().map(|f| f.std_errors[j] * f.std_errors[j]).collect();
            Ok(PooledRow {
                regressor,
                pooled: rubin_combine(&est, &var)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledInference {
        replicates: fits.len(),
        rows,
    })
}

/// Fits the outcome model to one completed outcome vector.
pub fn fit_mixed_lpm(data: &AnalysisData, y: &[f64], unobserved: Option<&[f64]>) -> Result<MixedFit> {
    MixedModel::new(&build_design(data, unobserved))?.fit(y)
}

/// Fits every replicate in parallel; output is in replicate order.
pub fn fit_replicates(data: &AnalysisData, imputed: &[ImputedSet]) -> Result<Vec<MixedFit>> {
    let model = MixedModel::new(&build_design(data, None))?;
    imputed
        .par_iter()
        .map(|set| {
            let y: Vec<f64> = set.lbw.iter().map(|&v| v as f64).collect();
            model.fit(&y)
        })
        .collect()
}

/// Raw outcome rates (percent) among observed records in the four cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveDid {
    /// High-low early, high-low late, high-high early, high-high late.
    pub rates_pct: [f64; 4],
    pub counts: [usize; 4],
    pub contrasts: Contrasts,
}

pub fn naive_did(data: &AnalysisData) -> Result<NaiveDid> {
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for (i, y) in data.observed_outcomes() {
        let r = &data.records[i];
        let cell = match (r.high_low_group, r.late) {
            (true, false) => 0,
            (true, true) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        sums[cell] += y as f64;
        counts[cell] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        let names = ["high-low early", "high-low late", "high-high early", "high-high late"];
        return Err(Error::Validation(format!(
            "no observed outcomes in the {} cell",
            names[empty]
        )));
    }
    let rates_pct: [f64; 4] = std::array::from_fn(|k| 100.0 * sums[k] / counts[k] as f64);
    let [a, b, c, d] = rates_pct;
    Ok(NaiveDid {
        rates_pct,
        counts,
        contrasts: did_contrasts(a, b, c, d),
    })
}

/// `β̂'(x̄_late − x̄_early)` over high-low records, in percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDrift {
    pub total_pp: f64,
    pub terms: Vec<(Regressor, f64)>,
}

pub fn covariate_drift(data: &AnalysisData, pooled: &PooledInference) -> CovariateDrift {
    let hl: Vec<_> = data.records.iter().filter(|r| r.high_low_group).collect();
    let cell_mean = |late: bool, reg: Regressor| {
        let (s, n) = hl
            .iter()
            .filter(|r| r.late == late)
            .fold((0.0, 0usize), |(s, n), r| (s + r.value(reg), n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let terms: Vec<(Regressor, f64)> = Regressor::OUTCOME_MODEL[4..]
        .iter()
        .filter_map(|&reg| {
            let beta = pooled.get(reg)?.estimate;
            Some((reg, 100.0 * beta * (cell_mean(true, reg) - cell_mean(false, reg))))
        })
        .collect();
    CovariateDrift {
        total_pp: terms.iter().map(|(_, v)| v).sum(),
        terms,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryAnalysis {
    pub pooled: PooledInference,
    pub naive: NaiveDid,
    pub drift: CovariateDrift,
    /// Regressors left out of the design because they were constant.
    pub dropped: Vec<Regressor>,
}

pub fn run_primary_analysis(data: &AnalysisData, imputed: &[ImputedSet]) -> Result<PrimaryAnalysis> {
    let fits = fit_replicates(data, imputed)?;
    let pooled = pool_fits(&fits)?;
    let naive = naive_did(data)?;
    let drift = covariate_drift(data, &pooled);
    let dropped = build_design(data, None).dropped;
    Ok(PrimaryAnalysis {
        pooled,
        naive,
        drift,
        dropped,
    })
}
