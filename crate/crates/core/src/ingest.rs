//! Country/year eligibility, cluster-level covariate aggregation and birth
//! record exclusions.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{BirthFilter, BirthRecord, CovariateMeans};

pub const EARLY_WINDOW: (i32, i32) = (2000, 2007);
pub const LATE_WINDOW: (i32, i32) = (2008, 2015);
/// Surveys from these years may stand in for a missing early-window survey.
pub const EARLY_FALLBACK_YEARS: [i32; 2] = [1998, 1999];

/// Prevalence year attached to a survey year: surveys before the first
/// prevalence estimate borrow the 2000 estimate.
pub fn prevalence_year_for(survey_year: i32) -> i32 {
    if EARLY_FALLBACK_YEARS.contains(&survey_year) {
        EARLY_WINDOW.0
    } else {
        survey_year
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountryAvailability {
    /// Years with a usable survey and GPS file.
    pub survey_years: BTreeSet<i32>,
    /// Years with a prevalence estimate.
    pub prevalence_years: BTreeSet<i32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AvailabilityTable {
    pub countries: BTreeMap<String, CountryAvailability>,
}

impl AvailabilityTable {
    pub fn validate(&self) -> Result<()> {
        for (country, a) in &self.countries {
            if let Some(y) = a.survey_years.iter().chain(&a.prevalence_years).find(|&&y| y < 1998) {
                return Err(Error::Validation(format!("{country}: year {y} is before 1998")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudyYears {
    pub early_year: i32,
    pub late_year: i32,
    pub prevalence_early_year: i32,
    pub prevalence_late_year: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YearSelection {
    Selected(StudyYears),
    Excluded,
}

/// Earliest usable early-window survey (falling back to 1999, then 1998) and
/// latest usable late-window survey, per country.
pub fn select_study_years(avail: &AvailabilityTable) -> BTreeMap<String, YearSelection> {
    avail
        .countries
        .iter()
        .map(|(country, a)| (country.clone(), select_for_country(a)))
        .collect()
}

fn select_for_country(a: &CountryAvailability) -> YearSelection {
    let usable = |y: i32| a.prevalence_years.contains(&prevalence_year_for(y));
    let in_window = |y: i32, (lo, hi): (i32, i32)| y >= lo && y <= hi;
    let early = a
        .survey_years
        .iter()
        .copied()
        .find(|&y| in_window(y, EARLY_WINDOW) && usable(y))
        .or_else(|| {
            EARLY_FALLBACK_YEARS
                .iter()
                .rev()
                .copied()
                .find(|&y| a.survey_years.contains(&y) && usable(y))
        });
    let late = a
        .survey_years
        .iter()
        .rev()
        .copied()
        .find(|&y| in_window(y, LATE_WINDOW) && usable(y));
    match (early, late) {
        (Some(e), Some(l)) => YearSelection::Selected(StudyYears {
            early_year: e,
            late_year: l,
            prevalence_early_year: prevalence_year_for(e),
            prevalence_late_year: prevalence_year_for(l),
        }),
        _ => YearSelection::Excluded,
    }
}

/// Individual-level covariate values; `None` marks a missing answer.
pub type IndividualRow = [Option<f64>; 6];

/// Per-covariate means over the non-missing values of one cluster's rows.
pub fn aggregate_cluster_covariates(cluster_id: &str, rows: &[IndividualRow]) -> Result<CovariateMeans> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("cluster {cluster_id} has no individual records")));
    }
    let mut out = [None; 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let (sum, n) = rows
            .iter()
            .filter_map(|r| r[k])
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n > 0 {
            *slot = Some(sum / n as f64);
        }
    }
    Ok(CovariateMeans(out))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterCounts {
    pub input: usize,
    pub multiple_births: usize,
    pub missing_reported_size: usize,
    /// Rows removed by the analysis-specific filter (infants / first born).
    pub analysis_filter: usize,
    pub kept: usize,
}

/// Drops multiple births, then records with missing reported size, then rows
/// outside the analysis filter. Order is preserved.
pub fn filter_births(records: &[BirthRecord], filter: BirthFilter) -> (Vec<BirthRecord>, FilterCounts) {
    let mut counts = FilterCounts {
        input: records.len(),
        ..FilterCounts::default()
    };
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        if r.multiple_birth == 1 {
            counts.multiple_births += 1;
        } else if r.reported_size.is_none() {
            counts.missing_reported_size += 1;
        } else if !filter.keep(r) {
            counts.analysis_filter += 1;
        } else {
            kept.push(r.clone());
        }
    }
    counts.kept = kept.len();
    (kept, counts)
}
