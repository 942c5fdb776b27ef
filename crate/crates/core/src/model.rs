//! Domain types shared by every stage of the pipeline.
//!
//! Records are plain immutable values; every stage consumes slices of them and
//! produces new values, so they can be shared freely across threads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the globe in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
}

impl GeoPoint {
    pub fn new(latitude_deg: f64, longitude_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(Error::Validation(format!(
                "latitude {latitude_deg} outside [-90, 90]"
            )));
        }
        if !(longitude_deg > -180.0 && longitude_deg <= 180.0) {
            return Err(Error::Validation(format!(
                "longitude {longitude_deg} outside (-180, 180]"
            )));
        }
        Ok(Self {
            latitude_deg,
            longitude_deg,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Early,
    Late,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Early => "early",
            Role::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "early" => Some(Role::Early),
            "late" => Some(Role::Late),
            _ => None,
        }
    }
}

/// The six cluster-level sociodemographic covariates used for Step-2 balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Covariate {
    Electricity,
    Floor,
    Toilet,
    Urban,
    MotherEducation,
    Contraception,
}

impl Covariate {
    pub const ALL: [Covariate; 6] = [
        Covariate::Electricity,
        Covariate::Floor,
        Covariate::Toilet,
        Covariate::Urban,
        Covariate::MotherEducation,
        Covariate::Contraception,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Electricity => "electricity",
            Covariate::Floor => "floor",
            Covariate::Toilet => "toilet",
            Covariate::Urban => "urban",
            Covariate::MotherEducation => "mother_education",
            Covariate::Contraception => "contraception",
        }
    }

    /// Coded range of the individual-level variable (and so of its cluster mean).
    pub fn range(self) -> (f64, f64) {
        match self {
            Covariate::Floor => (1.0, 3.0),
            Covariate::MotherEducation => (0.0, 2.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Cluster means of the six covariates; `None` marks a covariate that was
/// missing for every individual in the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateMeans(pub [Option<f64>; 6]);

impl CovariateMeans {
    pub fn complete(values: [f64; 6]) -> Self {
        Self(values.map(Some))
    }

    pub fn get(&self, cov: Covariate) -> Option<f64> {
        self.0[cov.index()]
    }

    /// All six values, or `None` if any is undefined.
    pub fn values(&self) -> Option<[f64; 6]> {
        let mut out = [0.0; 6];
        for (slot, v) in out.iter_mut().zip(self.0.iter()) {
            *slot = (*v)?;
        }
        Some(out)
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    pub fn validate(&self) -> Result<()> {
        for cov in Covariate::ALL {
            if let Some(v) = self.get(cov) {
                let (lo, hi) = cov.range();
                if !(v >= lo && v <= hi) {
                    return Err(Error::Validation(format!(
                        "{} mean {v} outside coded range [{lo}, {hi}]",
                        cov.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One survey cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub country: String,
    pub survey_year: i32,
    pub role: Role,
    pub location: GeoPoint,
    pub covariates: CovariateMeans,
    /// Year whose prevalence estimate is attached to this cluster.
    pub prevalence_year: i32,
    pub pfpr_by_year: BTreeMap<i32, f64>,
}

impl ClusterRecord {
    pub fn urban(&self) -> Option<f64> {
        self.covariates.get(Covariate::Urban)
    }

    pub fn pfpr_at(&self, year: i32) -> Option<f64> {
        self.pfpr_by_year.get(&year).copied()
    }

    /// Prevalence at the cluster's assigned prevalence year.
    pub fn assigned_pfpr(&self) -> Option<f64> {
        self.pfpr_at(self.prevalence_year)
    }
}

/// Mother's subjective size of the child at birth, collapsed to three levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportedSize {
    Small,
    Average,
    Large,
}

impl ReportedSize {
    /// Collapses the five DHS categories (1 = very large ... 5 = very small).
    pub fn from_dhs_code(code: u8) -> Option<Self> {
        match code {
            1 | 2 => Some(ReportedSize::Large),
            3 => Some(ReportedSize::Average),
            4 | 5 => Some(ReportedSize::Small),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReportedSize::Small => "small",
            ReportedSize::Average => "average",
            ReportedSize::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Some(ReportedSize::Small),
            "average" => Some(ReportedSize::Average),
            "large" => Some(ReportedSize::Large),
            _ => None,
        }
    }
}

/// One child. `reported_size` and `lbw` may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct BirthRecord {
    pub child_id: String,
    pub cluster_id: String,
    pub mother_age_years: u32,
    /// 1 = first born, 2 = second to fourth, 3 = fifth or later.
    pub birth_order_code: u8,
    pub wealth_index: u8,
    pub urban: u8,
    pub mother_education: u8,
    pub child_is_boy: u8,
    pub married: u8,
    pub antenatal: u8,
    pub reported_size: Option<ReportedSize>,
    pub multiple_birth: u8,
    pub child_age_years: f64,
    pub lbw: Option<u8>,
}

impl BirthRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Validation(format!(
                "birth {}: {what} out of range",
                self.child_id
            )))
        };
        if self.mother_age_years == 0 {
            return bad("mother_age_years");
        }
        if !(1..=3).contains(&self.birth_order_code) {
            return bad("birth_order_code");
        }
        if !(1..=5).contains(&self.wealth_index) {
            return bad("wealth_index");
        }
        if self.mother_education > 2 {
            return bad("mother_education");
        }
        for (name, v) in [
            ("urban", self.urban),
            ("child_is_boy", self.child_is_boy),
            ("married", self.married),
            ("antenatal", self.antenatal),
            ("multiple_birth", self.multiple_birth),
        ] {
            if v > 1 {
                return bad(name);
            }
        }
        if !(self.child_age_years >= 0.0) {
            return bad("child_age_years");
        }
        if matches!(self.lbw, Some(v) if v > 1) {
            return bad("lbw");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairCategory {
    HighHigh,
    HighLow,
    Other,
    Excluded,
}

impl PairCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            PairCategory::HighHigh => "high-high",
            PairCategory::HighLow => "high-low",
            PairCategory::Other => "other",
            PairCategory::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "high-high" => Some(PairCategory::HighHigh),
            "high-low" => Some(PairCategory::HighLow),
            "other" => Some(PairCategory::Other),
            "excluded" => Some(PairCategory::Excluded),
            _ => None,
        }
    }
}

impl fmt::Display for PairCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A Step-1 early/late pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPair {
    pub early: ClusterRecord,
    pub late: ClusterRecord,
    pub category: PairCategory,
    pub geo_distance_km: f64,
}

impl ClusterPair {
    pub fn new(
        early: ClusterRecord,
        late: ClusterRecord,
        category: PairCategory,
        geo_distance_km: f64,
    ) -> Result<Self> {
        if early.role != Role::Early || late.role != Role::Late {
            return Err(Error::Validation(format!(
                "pair ({}, {}) does not join an early cluster to a late cluster",
                early.cluster_id, late.cluster_id
            )));
        }
        if early.country != late.country {
            return Err(Error::Validation(format!(
                "pair ({}, {}) crosses countries",
                early.cluster_id, late.cluster_id
            )));
        }
        Ok(Self {
            early,
            late,
            category,
            geo_distance_km,
        })
    }

    /// The 12 balance covariates: six early means followed by six late means.
    pub fn balance_vector(&self) -> Option<[f64; 12]> {
        let e = self.early.covariates.values()?;
        let l = self.late.covariates.values()?;
        let mut out = [0.0; 12];
        out[..6].copy_from_slice(&e);
        out[6..].copy_from_slice(&l);
        Some(out)
    }
}

/// Names of the 12 balance covariates, in `balance_vector` order.
pub fn balance_covariate_names() -> Vec<String> {
    let mut names = Vec::with_capacity(12);
    for period in ["early", "late"] {
        for cov in Covariate::ALL {
            names.push(format!("{} ({period})", cov.name()));
        }
    }
    names
}

/// A treated (high-low) pair matched to a control (high-high) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    pub treated: ClusterPair,
    pub control: ClusterPair,
}

impl Quadruple {
    pub fn new(treated: ClusterPair, control: ClusterPair) -> Result<Self> {
        if treated.category != PairCategory::HighLow || control.category != PairCategory::HighHigh {
            return Err(Error::Validation(format!(
                "quadruple needs a high-low treated pair and a high-high control pair, got {} and {}",
                treated.category, control.category
            )));
        }
        Ok(Self { treated, control })
    }
}

/// Row filters for the secondary analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthFilter {
    #[default]
    All,
    /// Children no older than one year at the survey.
    InfantsOnly,
    FirstBornOnly,
}

impl BirthFilter {
    pub fn keep(self, b: &BirthRecord) -> bool {
        match self {
            BirthFilter::All => true,
            BirthFilter::InfantsOnly => b.child_age_years <= 1.0,
            BirthFilter::FirstBornOnly => b.birth_order_code == 1,
        }
    }
}

/// Analysis settings: prevalence cutoffs, balance threshold, imputation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub cutoff_high: f64,
    pub cutoff_low: f64,
    pub highhigh_gap: f64,
    pub balance_threshold: f64,
    pub imputations: usize,
    pub birth_filter: BirthFilter,
    /// Adds the three design indicators to the imputation model.
    pub impute_with_design_indicators: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            cutoff_high: 0.4,
            cutoff_low: 0.2,
            highhigh_gap: 0.1,
            balance_threshold: 0.1,
            imputations: 500,
            birth_filter: BirthFilter::All,
            impute_with_design_indicators: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.cutoff_low && self.cutoff_low < self.cutoff_high && self.cutoff_high <= 1.0) {
            return Err(Error::Config(format!(
                "cutoffs must satisfy 0 <= low < high <= 1 (got low={}, high={})",
                self.cutoff_low, self.cutoff_high
            )));
        }
        if !(self.highhigh_gap > 0.0) {
            return Err(Error::Config("highhigh_gap must be positive".into()));
        }
        if !(self.balance_threshold > 0.0) {
            return Err(Error::Config("balance_threshold must be positive".into()));
        }
        if self.imputations < 2 {
            return Err(Error::Config(format!(
                "imputations must be at least 2 (got {})",
                self.imputations
            )));
        }
        Ok(())
    }
}

/// Regressors of the outcome model, in design-column order.
///
/// `Intercept`, `LowPrevalence`, `Late` and `HighLowGroup` carry the
/// coefficients k0..k3; the covariates form the β block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regressor {
    Intercept,
    LowPrevalence,
    Late,
    HighLowGroup,
    MotherAge,
    MotherAgeSq,
    BirthOrder,
    BirthOrderSq,
    Wealth,
    Urban,
    MotherEducation,
    Boy,
    Married,
    Antenatal,
    /// Hypothetical unobserved covariate of the sensitivity model.
    Unobserved,
}

impl Regressor {
    /// Outcome-model regressors (without `Unobserved`).
    pub const OUTCOME_MODEL: [Regressor; 14] = [
        Regressor::Intercept,
        Regressor::LowPrevalence,
        Regressor::Late,
        Regressor::HighLowGroup,
        Regressor::MotherAge,
        Regressor::MotherAgeSq,
        Regressor::BirthOrder,
        Regressor::BirthOrderSq,
        Regressor::Wealth,
        Regressor::Urban,
        Regressor::MotherEducation,
        Regressor::Boy,
        Regressor::Married,
        Regressor::Antenatal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regressor::Intercept => "intercept",
            Regressor::LowPrevalence => "low_prevalence",
            Regressor::Late => "late_year",
            Regressor::HighLowGroup => "high_low_group",
            Regressor::MotherAge => "mother_age",
            Regressor::MotherAgeSq => "mother_age_sq",
            Regressor::BirthOrder => "birth_order",
            Regressor::BirthOrderSq => "birth_order_sq",
            Regressor::Wealth => "wealth_index",
            Regressor::Urban => "urban",
            Regressor::MotherEducation => "mother_education",
            Regressor::Boy => "child_is_boy",
            Regressor::Married => "married",
            Regressor::Antenatal => "antenatal",
            Regressor::Unobserved => "unobserved_u",
        }
    }

    /// Table-style label.
    pub fn label(self) -> &'static str {
        match self {
            Regressor::Intercept => "(Intercept)",
            Regressor::LowPrevalence => "0 - high prevalence; 1 - low prevalence",
            Regressor::Late => "0 - early year; 1 - late year",
            Regressor::HighLowGroup => "0 - high-high pairs; 1 - high-low pairs",
            Regressor::MotherAge => "Mother's age (linear term)",
            Regressor::MotherAgeSq => "Mother's age (quadratic term)",
            Regressor::BirthOrder => "Child's birth order (linear term)",
            Regressor::BirthOrderSq => "Child's birth order (quadratic term)",
            Regressor::Wealth => "Wealth index",
            Regressor::Urban => "0 - rural; 1 - urban",
            Regressor::MotherEducation => "Mother's education level",
            Regressor::Boy => "Child is boy",
            Regressor::Married => "Mother is married or living together",
            Regressor::Antenatal => "Antenatal care indicator",
            Regressor::Unobserved => "Unobserved covariate U",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Regressor::OUTCOME_MODEL
            .iter()
            .copied()
            .chain(std::iter::once(Regressor::Unobserved))
            .find(|r| r.name() == name)
    }
}

/// Sensitivity parameters in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub p1: f64,
    pub p2: f64,
}

impl SensitivityParams {
    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        let params = Self { p1, p2 };
        params.validate()?;
        Ok(params)
    }

    /// Every probability the U model can produce must lie in [0, 1].
    pub fn validate(&self) -> Result<()> {
        if !self.p1.is_finite() || !self.p2.is_finite() {
            return Err(Error::Config("sensitivity parameters must be finite".into()));
        }
        for low in [false, true] {
            for outcome in [false, true] {
                let p = self.probability(low, outcome);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "sensitivity parameters (p1={}, p2={}) give P(U=1) = {p} outside [0, 1]",
                        self.p1, self.p2
                    )));
                }
            }
        }
        Ok(())
    }

    /// P(U = 1) for a record.
    pub fn probability(&self, low_prevalence: bool, outcome_one: bool) -> f64 {
        let mut p = 0.5;
        if low_prevalence {
            p += self.p1 / 100.0;
        }
        if outcome_one {
            p += self.p2 / 100.0;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geo_point_ranges() {
        assert!(GeoPoint::new(0.0, 180.0).is_ok());
        assert!(GeoPoint::new(0.0, -180.0).is_err());
        assert!(GeoPoint::new(90.5, 0.0).is_err());
    }

    #[test]
    fn reported_size_collapses_five_codes() {
        assert_eq!(ReportedSize::from_dhs_code(5), Some(ReportedSize::Small));
        assert_eq!(ReportedSize::from_dhs_code(4), Some(ReportedSize::Small));
        assert_eq!(ReportedSize::from_dhs_code(3), Some(ReportedSize::Average));
        assert_eq!(ReportedSize::from_dhs_code(1), Some(ReportedSize::Large));
        assert_eq!(ReportedSize::from_dhs_code(8), None);
    }

    #[test]
    fn model_spec_defaults_are_valid() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.imputations, 500);
        let bad = ModelSpec {
            cutoff_low: 0.5,
            ..ModelSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sensitivity_probability_validity() {
        assert!(SensitivityParams::new(10.0, 10.0).is_ok());
        assert!(SensitivityParams::new(30.0, 30.0).is_err());
        assert!(SensitivityParams::new(-30.0, -30.0).is_err());
        let p = SensitivityParams::new(10.0, 0.0).unwrap();
        assert!((p.probability(true, false) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn covariate_means_range_check() {
        let ok = CovariateMeans::complete([0.5, 2.0, 1.0, 0.0, 1.5, 0.2]);
        ok.validate().unwrap();
        let bad = CovariateMeans::complete([0.5, 3.5, 1.0, 0.0, 1.5, 0.2]);
        assert!(bad.validate().is_err());
    }
}
