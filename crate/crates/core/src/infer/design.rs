//! Individual-level analysis records and the outcome-model design matrix.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{BirthRecord, PairCategory, Quadruple, Regressor, Role};

/// A birth placed in the difference-in-differences layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecord {
    pub birth: BirthRecord,
    /// Index into [`AnalysisData::cluster_ids`]; the random-intercept group.
    pub cluster: usize,
    pub low_prevalence: bool,
    pub late: bool,
    pub high_low_group: bool,
}

impl AnalysisRecord {
    pub fn value(&self, r: Regressor) -> f64 {
        let b = &self.birth;
        let flag = |v: bool| if v { 1.0 } else { 0.0 };
        match r {
            Regressor::Intercept => 1.0,
            Regressor::LowPrevalence => flag(self.low_prevalence),
            Regressor::Late => flag(self.late),
            Regressor::HighLowGroup => flag(self.high_low_group),
            Regressor::MotherAge => b.mother_age_years as f64,
            Regressor::MotherAgeSq => (b.mother_age_years as f64).powi(2),
            Regressor::BirthOrder => b.birth_order_code as f64,
            Regressor::BirthOrderSq => (b.birth_order_code as f64).powi(2),
            Regressor::Wealth => b.wealth_index as f64,
            Regressor::Urban => b.urban as f64,
            Regressor::MotherEducation => b.mother_education as f64,
            Regressor::Boy => b.child_is_boy as f64,
            Regressor::Married => b.married as f64,
            Regressor::Antenatal => b.antenatal as f64,
            Regressor::Unobserved => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisData {
    pub records: Vec<AnalysisRecord>,
    pub cluster_ids: Vec<String>,
}

impl AnalysisData {
    pub fn observed_outcomes(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.birth.lbw.map(|v| (i, v)))
    }

    pub fn missing_count(&self) -> usize {
        self.records.iter().filter(|r| r.birth.lbw.is_none()).count()
    }
}

/// Keeps births from the clusters of the matched quadruples and attaches the
/// three design indicators. Births are ordered by (cluster id, child id).
pub fn build_analysis_data(quadruples: &[Quadruple], births: &[BirthRecord], cutoff_low: f64) -> Result<AnalysisData> {
    // cluster id -> (late, high-low group, low prevalence)
    let mut layout: BTreeMap<String, (bool, bool, bool)> = BTreeMap::new();
    for q in quadruples {
        for pair in [&q.treated, &q.control] {
            let group = pair.category == PairCategory::HighLow;
            for c in [&pair.early, &pair.late] {
                let pfpr = c.assigned_pfpr().ok_or_else(|| {
                    Error::Validation(format!("cluster {} has no prevalence for year {}", c.cluster_id, c.prevalence_year))
                })?;
                let entry = (c.role == Role::Late, group, pfpr < cutoff_low);
                if let Some(prev) = layout.insert(c.cluster_id.clone(), entry) {
                    if prev != entry {
                        return Err(Error::Validation(format!(
                            "cluster {} appears in quadruples with conflicting roles",
                            c.cluster_id
                        )));
                    }
                }
            }
        }
    }
    let cluster_ids: Vec<String> = layout.keys().cloned().collect();
    let index: BTreeMap<&str, usize> = cluster_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut records: Vec<AnalysisRecord> = births
        .iter()
        .filter_map(|b| {
            let &(late, group, low) = layout.get(&b.cluster_id)?;
            Some(AnalysisRecord {
                birth: b.clone(),
                cluster: index[b.cluster_id.as_str()],
                low_prevalence: low,
                late,
                high_low_group: group,
            })
        })
        .collect();
    records.sort_by(|a, b| {
        a.cluster
            .cmp(&b.cluster)
            .then_with(|| a.birth.child_id.cmp(&b.birth.child_id))
    });
    Ok(AnalysisData { records, cluster_ids })
}

/// Outcome-model design: one row per record, columns in `columns` order.
#[derive(Debug, Clone)]
pub struct Design {
    pub columns: Vec<Regressor>,
    /// Regressors dropped because they are constant in this sample.
    pub dropped: Vec<Regressor>,
    pub x: DMatrix<f64>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl Design {
    pub fn position(&self, r: Regressor) -> Option<usize> {
        self.columns.iter().position(|&c| c == r)
    }
}

/// Builds the outcome-model design, appending `unobserved` as a final column
/// when given. Non-intercept columns that are constant are dropped.
pub fn build_design(data: &AnalysisData, unobserved: Option<&[f64]>) -> Design {
    let n = data.records.len();
    let mut candidates: Vec<(Regressor, Vec<f64>)> = Regressor::OUTCOME_MODEL
        .iter()
        .map(|&r| (r, data.records.iter().map(|rec| rec.value(r)).collect()))
        .collect();
    if let Some(u) = unobserved {
        assert_eq!(u.len(), n);
        candidates.push((Regressor::Unobserved, u.to_vec()));
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for (r, values) in candidates {
        let constant = values.windows(2).all(|w| w[0] == w[1]);
        if r != Regressor::Intercept && constant {
            dropped.push(r);
        } else {
            columns.push(r);
            kept.push(values);
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "dropping constant regressors: {}",
            dropped.iter().map(|r| r.name()).collect::<Vec<_>>().join(", ")
        );
    }
    let x = DMatrix::from_fn(n, columns.len(), |i, j| kept[j][i]);
    Design {
        columns,
        dropped,
        x,
        groups: data.records.iter().map(|r| r.cluster).collect(),
        n_groups: data.cluster_ids.len(),
    }
}
