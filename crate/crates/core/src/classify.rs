//! Prevalence levels and Step-2 pair categories.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ClusterRecord, ModelSpec, PairCategory};

/// First and last year of the prevalence study window.
pub const STUDY_WINDOW: (i32, i32) = (2000, 2015);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrevalenceLevel {
    Low,
    Medium,
    High,
}

/// High iff `pfpr > cutoff_high`, Low iff `pfpr < cutoff_low`, Medium on the
/// closed interval between (both boundaries are Medium).
pub fn prevalence_level(pfpr: f64, spec: &ModelSpec) -> PrevalenceLevel {
    if pfpr > spec.cutoff_high {
        PrevalenceLevel::High
    } else if pfpr < spec.cutoff_low {
        PrevalenceLevel::Low
    } else {
        PrevalenceLevel::Medium
    }
}

/// True when every recorded study-window prevalence is zero.
pub fn zero_throughout_window(cluster: &ClusterRecord) -> bool {
    let mut seen = false;
    for (_, &v) in cluster.pfpr_by_year.range(STUDY_WINDOW.0..=STUDY_WINDOW.1) {
        seen = true;
        if v != 0.0 {
            return false;
        }
    }
    seen
}

/// Categorises an early/late pair by the prevalences at each cluster's
/// assigned prevalence year.
pub fn pair_category(early: &ClusterRecord, late: &ClusterRecord, spec: &ModelSpec) -> Result<PairCategory> {
    let pe = early.assigned_pfpr().ok_or_else(|| missing(early))?;
    let pl = late.assigned_pfpr().ok_or_else(|| missing(late))?;
    use PrevalenceLevel::*;
    let category = match (prevalence_level(pe, spec), prevalence_level(pl, spec)) {
        (High, High) if (pe - pl).abs() < spec.highhigh_gap => PairCategory::HighHigh,
        (High, Low) if zero_throughout_window(late) => PairCategory::Excluded,
        (High, Low) => PairCategory::HighLow,
        _ => PairCategory::Other,
    };
    Ok(category)
}

fn missing(c: &ClusterRecord) -> Error {
    Error::Validation(format!(
        "cluster {} has no prevalence for its assigned year {}",
        c.cluster_id, c.prevalence_year
    ))
}

/// Counts per category; the counts always sum to the number of pairs.
pub fn category_counts(categories: &[PairCategory]) -> BTreeMap<PairCategory, usize> {
    let mut counts = BTreeMap::new();
    for c in [
        PairCategory::HighHigh,
        PairCategory::HighLow,
        PairCategory::Other,
        PairCategory::Excluded,
    ] {
        counts.insert(c, 0);
    }
    for &c in categories {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}
