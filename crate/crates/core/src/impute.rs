//! Bayesian logistic imputation of the missing low-birth-weight indicator.
//!
//! The model is fitted on records with an observed outcome, the posterior is
//! approximated by a normal at the penalized mode, and each replicate draws
//! one coefficient vector and then one Bernoulli outcome per missing record.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::infer::{AnalysisData, AnalysisRecord};
use crate::logistic::{self, NewtonOptions};
use crate::model::{ReportedSize, Regressor};
use crate::rng::{substream, Domain};
use crate::stats::{logistic as inv_logit, mean, sample_sd};

const INTERCEPT_SCALE: f64 = 10.0;
const SLOPE_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ImputationTerm {
    Intercept,
    MotherAge,
    MotherAgeSq,
    Wealth,
    BirthOrder,
    BirthOrderSq,
    Urban,
    MotherEducation,
    Boy,
    Married,
    Antenatal,
    SmallSize,
    LargeSize,
    LowPrevalence,
    Late,
    HighLowGroup,
}

impl ImputationTerm {
    /// Predictors of the outcome model in design-column order.
    pub const BASE: [ImputationTerm; 13] = [
        ImputationTerm::Intercept,
        ImputationTerm::MotherAge,
        ImputationTerm::MotherAgeSq,
        ImputationTerm::Wealth,
        ImputationTerm::BirthOrder,
        ImputationTerm::BirthOrderSq,
        ImputationTerm::Urban,
        ImputationTerm::MotherEducation,
        ImputationTerm::Boy,
        ImputationTerm::Married,
        ImputationTerm::Antenatal,
        ImputationTerm::SmallSize,
        ImputationTerm::LargeSize,
    ];

    pub const DESIGN: [ImputationTerm; 3] = [
        ImputationTerm::LowPrevalence,
        ImputationTerm::Late,
        ImputationTerm::HighLowGroup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImputationTerm::Intercept => "intercept",
            ImputationTerm::MotherAge => "mother_age",
            ImputationTerm::MotherAgeSq => "mother_age_sq",
            ImputationTerm::Wealth => "wealth_index",
            ImputationTerm::BirthOrder => "birth_order",
            ImputationTerm::BirthOrderSq => "birth_order_sq",
            ImputationTerm::Urban => "urban",
            ImputationTerm::MotherEducation => "mother_education",
            ImputationTerm::Boy => "child_is_boy",
            ImputationTerm::Married => "married",
            ImputationTerm::Antenatal => "antenatal",
            ImputationTerm::SmallSize => "size_small",
            ImputationTerm::LargeSize => "size_large",
            ImputationTerm::LowPrevalence => "low_prevalence",
            ImputationTerm::Late => "late_year",
            ImputationTerm::HighLowGroup => "high_low_group",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::BASE.iter().chain(&Self::DESIGN).copied().find(|t| t.name() == name)
    }

    fn is_binary(self) -> bool {
        matches!(
            self,
            ImputationTerm::Urban
                | ImputationTerm::Boy
                | ImputationTerm::Married
                | ImputationTerm::Antenatal
                | ImputationTerm::SmallSize
                | ImputationTerm::LargeSize
                | ImputationTerm::LowPrevalence
                | ImputationTerm::Late
                | ImputationTerm::HighLowGroup
        )
    }

    pub fn value(self, r: &AnalysisRecord) -> f64 {
        let size = |s: ReportedSize| if r.birth.reported_size == Some(s) { 1.0 } else { 0.0 };
        match self {
            ImputationTerm::Intercept => 1.0,
            ImputationTerm::MotherAge => r.value(Regressor::MotherAge),
            ImputationTerm::MotherAgeSq => r.value(Regressor::MotherAgeSq),
            ImputationTerm::Wealth => r.value(Regressor::Wealth),
            ImputationTerm::BirthOrder => r.value(Regressor::BirthOrder),
            ImputationTerm::BirthOrderSq => r.value(Regressor::BirthOrderSq),
            ImputationTerm::Urban => r.value(Regressor::Urban),
            ImputationTerm::MotherEducation => r.value(Regressor::MotherEducation),
            ImputationTerm::Boy => r.value(Regressor::Boy),
            ImputationTerm::Married => r.value(Regressor::Married),
            ImputationTerm::Antenatal => r.value(Regressor::Antenatal),
            ImputationTerm::SmallSize => size(ReportedSize::Small),
            ImputationTerm::LargeSize => size(ReportedSize::Large),
            ImputationTerm::LowPrevalence => r.value(Regressor::LowPrevalence),
            ImputationTerm::Late => r.value(Regressor::Late),
            ImputationTerm::HighLowGroup => r.value(Regressor::HighLowGroup),
        }
    }
}

/// Posterior mode and Laplace covariance of the imputation model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationModel {
    pub terms: Vec<ImputationTerm>,
    /// Terms constant among the fitting records, left out of the fit.
    pub dropped: Vec<ImputationTerm>,
    pub coefficients: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub prior_scales: Vec<f64>,
    pub log_posterior: f64,
    pub iterations: usize,
    pub n_observed: usize,
}

impl ImputationModel {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.terms.len()).map(|j| self.covariance[(j, j)].sqrt()).collect()
    }

    pub fn row(&self, r: &AnalysisRecord) -> DVector<f64> {
        DVector::from_iterator(self.terms.len(), self.terms.iter().map(|t| t.value(r)))
    }

    /// Posterior-mean probability `E[logistic(x'β)]` under the normal
    /// approximation, by quadrature over the linear predictor.
    pub fn mean_probability(&self, r: &AnalysisRecord) -> f64 {
        let x = self.row(r);
        let mu = x.dot(&DVector::from_column_slice(&self.coefficients));
        let sd = (x.transpose() * &self.covariance * &x)[(0, 0)].max(0.0).sqrt();
        if sd == 0.0 {
            return inv_logit(mu);
        }
        let k = 4000;
        let h = 16.0 / k as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=k {
            let z = -8.0 + i as f64 * h;
            let w = (-0.5 * z * z).exp() * if i == 0 || i == k { 0.5 } else { 1.0 };
            num += w * inv_logit(mu + sd * z);
            den += w;
        }
        num / den
    }
}

/// Fits the imputation model on the records of `data` with an observed outcome.
pub fn fit_imputation_model(data: &AnalysisData, with_design_indicators: bool) -> Result<ImputationModel> {
    let observed: Vec<(&AnalysisRecord, f64)> = data
        .records
        .iter()
        .filter_map(|r| r.birth.lbw.map(|y| (r, y as f64)))
        .collect();
    let ones = observed.iter().filter(|(_, y)| *y == 1.0).count();
    if ones == 0 || ones == observed.len() {
        return Err(Error::Validation(format!(
            "imputation model needs observed records of both outcome classes ({} observed, {} with lbw=1)",
            observed.len(),
            ones
        )));
    }

    let mut candidates: Vec<ImputationTerm> = ImputationTerm::BASE.to_vec();
    if with_design_indicators {
        candidates.extend(ImputationTerm::DESIGN);
    }
    let mut terms = Vec::new();
    let mut dropped = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut prior_scales = Vec::new();
    for t in candidates {
        let values: Vec<f64> = observed.iter().map(|(r, _)| t.value(r)).collect();
        if t == ImputationTerm::Intercept {
            prior_scales.push(INTERCEPT_SCALE);
        } else {
            let sd = sample_sd(&values);
            if !(sd > 0.0) {
                dropped.push(t);
                continue;
            }
            prior_scales.push(if t.is_binary() { SLOPE_SCALE } else { SLOPE_SCALE / (2.0 * sd) });
        }
        terms.push(t);
        columns.push(values);
    }
    if !dropped.is_empty() {
        log::warn!(
            "imputation model: dropping constant terms {}",
            dropped.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ")
        );
    }

    let x = DMatrix::from_fn(observed.len(), terms.len(), |i, j| columns[j][i]);
    let y: Vec<f64> = observed.iter().map(|(_, y)| *y).collect();
    let fit = logistic::fit(&x, &y, &prior_scales, NewtonOptions::default())?;
    log::debug!(
        "imputation model converged in {} iterations, mean observed lbw {}",
        fit.iterations,
        mean(&y)
    );
    Ok(ImputationModel {
        terms,
        dropped,
        coefficients: fit.coefficients.iter().copied().collect(),
        covariance: fit.covariance,
        prior_scales,
        log_posterior: fit.log_posterior,
        iterations: fit.iterations,
        n_observed: observed.len(),
    })
}

/// One completed data set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImputedSet {
    /// 1-based replicate index; also the random substream key.
    pub replicate: usize,
    /// Outcome for every record of the analysis data, in record order.
    pub lbw: Vec<u8>,
}

/// Draws `m` completed data sets. Replicate `k` uses only substreams keyed by
/// `(seed, k)`, so results do not depend on scheduling.
pub fn draw_imputations(model: &ImputationModel, data: &AnalysisData, m: usize, seed: u64) -> Result<Vec<ImputedSet>> {
    let p = model.terms.len();
    let chol = model
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("imputation posterior covariance is not positive definite".into()))?;
    let l = chol.l();
    let mode = DVector::from_column_slice(&model.coefficients);
    let missing: Vec<(usize, DVector<f64>)> = data
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.birth.lbw.is_none())
        .map(|(i, r)| (i, model.row(r)))
        .collect();
    let base: Vec<u8> = data.records.iter().map(|r| r.birth.lbw.unwrap_or(0)).collect();

    Ok((1..=m)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, Domain::ImputationCoefficients, &[k as u64]);
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = &mode + &l * z;
            let mut lbw = base.clone();
            for (i, x) in &missing {
                let prob = inv_logit(x.dot(&beta));
                let mut r = substream(seed, Domain::ImputationOutcome, &[k as u64, *i as u64]);
                lbw[*i] = u8::from(r.random::<f64>() < prob);
            }
            ImputedSet { replicate: k, lbw }
        })
        .collect())
}
