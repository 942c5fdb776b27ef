//! Synthetic scenarios with known ground truth.
//!
//! Each country has a set of sites. A site contributes one early and one late
//! cluster at nearly the same location and follows one prevalence trajectory:
//! declining from high to low, staying high, or staying moderate. Births are
//! drawn from the linear probability model with a cluster random intercept.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classify::STUDY_WINDOW;
use crate::error::{Error, Result};
use crate::infer::{AnalysisData, AnalysisRecord};
use crate::io;
use crate::ingest::{EARLY_FALLBACK_YEARS, EARLY_WINDOW, LATE_WINDOW};
use crate::model::{BirthRecord, ClusterRecord, Covariate, CovariateMeans, GeoPoint, Regressor, ReportedSize, Role};
use crate::rng::{substream, Domain};
use crate::stats::logistic;

pub const CLIP_BOUNDS: (f64, f64) = (0.001, 0.999);

/// Coefficients of the outcome model, on the probability scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeEffects {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub mother_age: f64,
    pub mother_age_sq: f64,
    pub birth_order: f64,
    pub birth_order_sq: f64,
    pub wealth: f64,
    pub urban: f64,
    pub mother_education: f64,
    pub boy: f64,
    pub married: f64,
    pub antenatal: f64,
    /// Sd of the cluster random intercept.
    pub sigma0: f64,
}

impl Default for OutcomeEffects {
    fn default() -> Self {
        Self {
            k0: 0.16,
            k1: -0.03,
            k2: 0.0,
            k3: 0.0,
            mother_age: -0.004,
            mother_age_sq: 0.00006,
            birth_order: 0.01,
            birth_order_sq: -0.002,
            wealth: -0.004,
            urban: -0.01,
            mother_education: -0.005,
            boy: -0.01,
            married: -0.01,
            antenatal: -0.015,
            sigma0: 0.02,
        }
    }
}

impl OutcomeEffects {
    pub fn coefficient(&self, r: Regressor) -> f64 {
        match r {
            Regressor::Intercept => self.k0,
            Regressor::LowPrevalence => self.k1,
            Regressor::Late => self.k2,
            Regressor::HighLowGroup => self.k3,
            Regressor::MotherAge => self.mother_age,
            Regressor::MotherAgeSq => self.mother_age_sq,
            Regressor::BirthOrder => self.birth_order,
            Regressor::BirthOrderSq => self.birth_order_sq,
            Regressor::Wealth => self.wealth,
            Regressor::Urban => self.urban,
            Regressor::MotherEducation => self.mother_education,
            Regressor::Boy => self.boy,
            Regressor::Married => self.married,
            Regressor::Antenatal => self.antenatal,
            Regressor::Unobserved => 0.0,
        }
    }

    /// Linear predictor without the random intercept.
    pub fn linear(&self, r: &AnalysisRecord) -> f64 {
        Regressor::OUTCOME_MODEL.iter().map(|&reg| self.coefficient(reg) * r.value(reg)).sum()
    }
}

/// Outcome missingness. The covariate-dependent form never looks at the
/// outcome itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Missingness {
    #[default]
    None,
    Mcar { rate: f64 },
    /// `logit P(missing) = a + Σ b·x`, with `a` calibrated so that the
    /// expected missing fraction equals `rate`.
    Covariate {
        rate: f64,
        small_size: f64,
        large_size: f64,
        wealth: f64,
        urban: f64,
        late: f64,
        low_prevalence: f64,
    },
}

impl Missingness {
    /// Covariate-dependent missingness with the default slopes.
    pub fn covariate(rate: f64) -> Self {
        Missingness::Covariate {
            rate,
            small_size: 0.6,
            large_size: -0.3,
            wealth: -0.15,
            urban: -0.4,
            late: -0.5,
            low_prevalence: 0.3,
        }
    }

    fn rate(&self) -> f64 {
        match *self {
            Missingness::None => 0.0,
            Missingness::Mcar { rate } | Missingness::Covariate { rate, .. } => rate,
        }
    }
}

/// A true binary confounder: `P(U=1) = 0.5 + p1/100 · low`, entering the
/// outcome with coefficient `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueUnobserved {
    pub p1: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub countries: usize,
    /// Sites per country; each gives one early and one late cluster.
    pub sites_per_country: usize,
    pub births_per_cluster: usize,
    pub early_year: i32,
    pub late_year: i32,
    /// Fraction of sites whose prevalence falls from high to low.
    pub decline_fraction: f64,
    /// Fraction of sites that stay at high prevalence.
    pub stay_high_fraction: f64,
    /// Fraction of declining sites whose late cluster shows zero prevalence
    /// in every year.
    pub zero_late_fraction: f64,
    /// Sd (degrees) of the late cluster's offset from its site.
    pub location_jitter_deg: f64,
    pub effects: OutcomeEffects,
    pub missingness: Missingness,
    pub reported_size_missing_rate: f64,
    pub multiple_birth_rate: f64,
    pub unobserved: Option<TrueUnobserved>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            countries: 3,
            sites_per_country: 30,
            births_per_cluster: 30,
            early_year: 2003,
            late_year: 2012,
            decline_fraction: 0.4,
            stay_high_fraction: 0.4,
            zero_late_fraction: 0.0,
            location_jitter_deg: 0.02,
            effects: OutcomeEffects::default(),
            missingness: Missingness::None,
            reported_size_missing_rate: 0.01,
            multiple_birth_rate: 0.02,
            unobserved: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("scenario: {m}")));
        if self.countries == 0 || self.sites_per_country == 0 || self.births_per_cluster == 0 {
            return err("countries, sites_per_country and births_per_cluster must be positive".into());
        }
        let early_ok = (EARLY_WINDOW.0..=EARLY_WINDOW.1).contains(&self.early_year)
            || EARLY_FALLBACK_YEARS.contains(&self.early_year);
        if !early_ok || !(LATE_WINDOW.0..=LATE_WINDOW.1).contains(&self.late_year) {
            return err(format!(
                "survey years {} / {} fall outside the study windows",
                self.early_year, self.late_year
            ));
        }
        for (name, v) in [
            ("decline_fraction", self.decline_fraction),
            ("stay_high_fraction", self.stay_high_fraction),
            ("zero_late_fraction", self.zero_late_fraction),
            ("reported_size_missing_rate", self.reported_size_missing_rate),
            ("multiple_birth_rate", self.multiple_birth_rate),
            ("missingness rate", self.missingness.rate()),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} = {v} is not a probability"));
            }
        }
        if self.decline_fraction + self.stay_high_fraction > 1.0 {
            return err("decline_fraction + stay_high_fraction exceeds 1".into());
        }
        if matches!(self.missingness, Missingness::Covariate { rate, .. } if rate <= 0.0 || rate >= 1.0) {
            return err("covariate-dependent missingness needs a rate strictly between 0 and 1".into());
        }
        if !(self.effects.sigma0 >= 0.0) || !(self.location_jitter_deg >= 0.0) {
            return err("sigma0 and location_jitter_deg must be non-negative".into());
        }
        if let Some(u) = self.unobserved {
            if !(0.0..=1.0).contains(&(0.5 + u.p1 / 100.0)) {
                return err(format!("true U parameter p1 = {} gives a probability outside [0, 1]", u.p1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Decline,
    StayHigh,
    Moderate,
}

/// Everything needed to judge an analysis of the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub seed: u64,
    pub config: ScenarioConfig,
    /// True coefficient per outcome-model regressor.
    pub coefficients: BTreeMap<String, f64>,
    /// Generation-time clipping of the outcome probability.
    pub clip_bounds: (f64, f64),
    pub clipped_probabilities: usize,
    pub births: usize,
    pub missing_outcomes: usize,
    pub missingness_intercept: Option<f64>,
    pub sites: BTreeMap<String, usize>,
    /// Realized `P(U=1 | y=1) − P(U=1 | y=0)` in percentage points, averaged
    /// over the low/high strata.
    pub implied_p2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub clusters: Vec<ClusterRecord>,
    pub births: Vec<BirthRecord>,
    /// The true confounder per birth (parallel to `births`), when configured.
    pub unobserved: Option<Vec<u8>>,
    pub truth: ScenarioTruth,
}

impl Scenario {
    pub fn truth_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.truth)
            .map(|s| s + "\n")
            .map_err(|e| Error::Numerical(format!("serializing truth record: {e}")))
    }

    /// Writes clusters.csv, prevalence.csv, births.csv and truth.json.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_clusters(&dir.join("clusters.csv"), &self.clusters)?;
        io::write_prevalence(&dir.join("prevalence.csv"), &self.clusters)?;
        io::write_births(&dir.join("births.csv"), &self.births)?;
        io::write_text(&dir.join("truth.json"), &self.truth_json()?)
    }
}

fn trajectory_level(start: f64, end: f64, early: i32, late: i32, year: i32) -> f64 {
    if year <= early {
        start
    } else if year >= late {
        end
    } else {
        start + (end - start) * (year - early) as f64 / (late - early) as f64
    }
}

struct ClusterDraw {
    record: ClusterRecord,
    low: bool,
    late: bool,
    group: bool,
}

fn draw_covariates(rng: &mut ChaCha8Rng, site: &[f64; 6]) -> CovariateMeans {
    let mut out = [0.0; 6];
    for cov in Covariate::ALL {
        let (lo, hi) = cov.range();
        let noise = Normal::new(0.0, 0.05 * (hi - lo)).unwrap().sample(rng);
        out[cov.index()] = (site[cov.index()] + noise).clamp(lo, hi);
    }
    CovariateMeans::complete(out)
}

/// Individual covariates of one birth; outcome fields are left unset.
fn draw_birth(rng: &mut ChaCha8Rng, child_id: String, cluster_id: &str, cov: &CovariateMeans) -> BirthRecord {
    let electricity = cov.get(Covariate::Electricity).unwrap_or(0.5);
    let urban = cov.get(Covariate::Urban).unwrap_or(0.3);
    let edu = cov.get(Covariate::MotherEducation).unwrap_or(1.0);
    let wealth = (1.0 + 4.0 * electricity + Normal::new(0.0, 1.0).unwrap().sample(rng)).round();
    let u: f64 = rng.random();
    BirthRecord {
        child_id,
        cluster_id: cluster_id.to_string(),
        mother_age_years: rng.random_range(15..=49),
        birth_order_code: if u < 0.35 {
            1
        } else if u < 0.7 {
            2
        } else {
            3
        },
        wealth_index: wealth.clamp(1.0, 5.0) as u8,
        urban: u8::from(rng.random_bool(urban.clamp(0.0, 1.0))),
        mother_education: (edu + rng.random_range(-0.5..0.5)).round().clamp(0.0, 2.0) as u8,
        child_is_boy: u8::from(rng.random_bool(0.5)),
        married: u8::from(rng.random_bool(0.85)),
        antenatal: u8::from(rng.random_bool(0.75)),
        reported_size: None,
        multiple_birth: 0,
        child_age_years: rng.random_range(0..60) as f64 / 12.0,
        lbw: None,
    }
}

fn draw_reported_size(rng: &mut ChaCha8Rng, lbw: u8) -> ReportedSize {
    let (small, average) = if lbw == 1 { (0.55, 0.35) } else { (0.12, 0.55) };
    let u: f64 = rng.random();
    if u < small {
        ReportedSize::Small
    } else if u < small + average {
        ReportedSize::Average
    } else {
        ReportedSize::Large
    }
}

/// Per-birth quantities carried from the draw to the missingness step.
struct Pending {
    record: AnalysisRecord,
    u_missing: f64,
    unobserved: Option<u8>,
}

pub fn gen_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let n_sites = cfg.sites_per_country;
    let n_decline = (cfg.decline_fraction * n_sites as f64).round() as usize;
    let n_high = ((cfg.stay_high_fraction * n_sites as f64).round() as usize).min(n_sites - n_decline.min(n_sites));
    let n_zero = (cfg.zero_late_fraction * n_decline as f64).round() as usize;

    let mut clusters: Vec<ClusterDraw> = Vec::new();
    let mut sites: BTreeMap<String, usize> = BTreeMap::new();
    for c in 0..cfg.countries {
        let country = format!("C{:02}", c + 1);
        let center = (-12.0 + 6.0 * (c % 5) as f64, -10.0 + 8.0 * (c / 5) as f64 + 2.0 * c as f64);
        for s in 0..n_sites {
            let mut rng = substream(seed, Domain::Scenario, &[1, c as u64, s as u64]);
            let trajectory = if s < n_decline {
                Trajectory::Decline
            } else if s < n_decline + n_high {
                Trajectory::StayHigh
            } else {
                Trajectory::Moderate
            };
            *sites.entry(format!("{trajectory:?}")).or_default() += 1;
            let (start, end) = match trajectory {
                Trajectory::Decline => (rng.random_range(0.45..0.75), rng.random_range(0.02..0.15)),
                Trajectory::StayHigh => {
                    let a: f64 = rng.random_range(0.46..0.75);
                    (a, (a + rng.random_range(-0.08..0.08)).max(0.42))
                }
                Trajectory::Moderate => (rng.random_range(0.22..0.38), rng.random_range(0.22..0.38)),
            };
            let zero_late = trajectory == Trajectory::Decline && s < n_zero;
            let lat = center.0 + rng.random_range(-2.0..2.0);
            let lon = center.1 + rng.random_range(-2.0..2.0);
            let site_cov: [f64; 6] = std::array::from_fn(|k| {
                let (lo, hi) = Covariate::ALL[k].range();
                lo + (hi - lo) * rng.random_range(0.15..0.85)
            });
            let jitter = Normal::new(0.0, cfg.location_jitter_deg.max(1e-12)).unwrap();
            for role in [Role::Early, Role::Late] {
                let (dlat, dlon) = match role {
                    Role::Early => (0.0, 0.0),
                    Role::Late => (jitter.sample(&mut rng), jitter.sample(&mut rng)),
                };
                let year = match role {
                    Role::Early => cfg.early_year,
                    Role::Late => cfg.late_year,
                };
                let pfpr_by_year: BTreeMap<i32, f64> = (STUDY_WINDOW.0..=STUDY_WINDOW.1)
                    .map(|y| {
                        let v = if role == Role::Late && zero_late {
                            0.0
                        } else {
                            trajectory_level(start, end, cfg.early_year, cfg.late_year, y)
                        };
                        (y, v)
                    })
                    .collect();
                let prevalence_year = crate::ingest::prevalence_year_for(year);
                let assigned = pfpr_by_year[&prevalence_year];
                let tag = if role == Role::Early { "E" } else { "L" };
                clusters.push(ClusterDraw {
                    record: ClusterRecord {
                        cluster_id: format!("{country}-{tag}-{:03}", s + 1),
                        country: country.clone(),
                        survey_year: year,
                        role,
                        location: GeoPoint::new(lat + dlat, lon + dlon)?,
                        covariates: draw_covariates(&mut rng, &site_cov),
                        prevalence_year,
                        pfpr_by_year,
                    },
                    low: assigned < 0.2,
                    late: role == Role::Late,
                    group: trajectory == Trajectory::Decline,
                });
            }
        }
    }

    let sigma0 = Normal::new(0.0, cfg.effects.sigma0.max(0.0)).unwrap();
    let mut pending: Vec<Pending> = Vec::new();
    let mut clipped = 0;
    for (ci, cd) in clusters.iter().enumerate() {
        let mut rng = substream(seed, Domain::Scenario, &[2, ci as u64]);
        let alpha = if cfg.effects.sigma0 > 0.0 { sigma0.sample(&mut rng) } else { 0.0 };
        for b in 0..cfg.births_per_cluster {
            let id = format!("{}-{:04}", cd.record.cluster_id, b + 1);
            let mut birth = draw_birth(&mut rng, id, &cd.record.cluster_id, &cd.record.covariates);
            let u = cfg
                .unobserved
                .map(|t| u8::from(rng.random_bool(0.5 + if cd.low { t.p1 / 100.0 } else { 0.0 })));
            let mut rec = AnalysisRecord {
                birth: birth.clone(),
                cluster: ci,
                low_prevalence: cd.low,
                late: cd.late,
                high_low_group: cd.group,
            };
            let mut p = cfg.effects.linear(&rec) + alpha;
            if let (Some(t), Some(u)) = (cfg.unobserved, u) {
                p += t.lambda * u as f64;
            }
            if p < CLIP_BOUNDS.0 || p > CLIP_BOUNDS.1 {
                clipped += 1;
            }
            let p = p.clamp(CLIP_BOUNDS.0, CLIP_BOUNDS.1);
            let y = u8::from(rng.random::<f64>() < p);
            birth.lbw = Some(y);
            birth.reported_size = Some(draw_reported_size(&mut rng, y));
            if rng.random::<f64>() < cfg.reported_size_missing_rate {
                birth.reported_size = None;
            }
            birth.multiple_birth = u8::from(rng.random::<f64>() < cfg.multiple_birth_rate);
            let u_missing = rng.random::<f64>();
            rec.birth = birth;
            pending.push(Pending {
                record: rec,
                u_missing,
                unobserved: u,
            });
        }
    }

    let implied_p2 = cfg.unobserved.map(|_| {
        let mut diffs = Vec::new();
        for low in [false, true] {
            let mut s = [(0.0, 0usize); 2];
            for p in pending.iter().filter(|p| p.record.low_prevalence == low) {
                let y = p.record.birth.lbw.unwrap() as usize;
                s[y].0 += p.unobserved.unwrap() as f64;
                s[y].1 += 1;
            }
            if s[0].1 > 0 && s[1].1 > 0 {
                diffs.push(s[1].0 / s[1].1 as f64 - s[0].0 / s[0].1 as f64);
            }
        }
        100.0 * diffs.iter().sum::<f64>() / diffs.len().max(1) as f64
    });

    let (miss_prob, intercept) = missing_probabilities(&cfg.missingness, pending.iter().map(|p| &p.record));

    let mut births = Vec::with_capacity(pending.len());
    let mut unobserved = cfg.unobserved.map(|_| Vec::with_capacity(pending.len()));
    let mut missing = 0;
    for (p, q) in pending.into_iter().zip(miss_prob) {
        let mut b = p.record.birth;
        if p.u_missing < q {
            b.lbw = None;
            missing += 1;
        }
        births.push(b);
        if let (Some(v), Some(u)) = (unobserved.as_mut(), p.unobserved) {
            v.push(u);
        }
    }

    let coefficients = Regressor::OUTCOME_MODEL
        .iter()
        .map(|&r| (r.name().to_string(), cfg.effects.coefficient(r)))
        .chain(cfg.unobserved.map(|u| (Regressor::Unobserved.name().to_string(), u.lambda)))
        .collect();
    let truth = ScenarioTruth {
        seed,
        config: cfg.clone(),
        coefficients,
        clip_bounds: CLIP_BOUNDS,
        clipped_probabilities: clipped,
        births: births.len(),
        missing_outcomes: missing,
        missingness_intercept: intercept,
        sites,
        implied_p2,
    };
    Ok(Scenario {
        clusters: clusters.into_iter().map(|c| c.record).collect(),
        births,
        unobserved,
        truth,
    })
}

/// Per-record missingness probabilities, and the calibrated intercept for
/// the covariate-dependent mechanism.
fn missing_probabilities<'a>(
    m: &Missingness,
    records: impl Iterator<Item = &'a AnalysisRecord>,
) -> (Vec<f64>, Option<f64>) {
    match *m {
        Missingness::None => (records.map(|_| 0.0).collect(), None),
        Missingness::Mcar { rate } => (records.map(|_| rate).collect(), None),
        Missingness::Covariate {
            rate,
            small_size,
            large_size,
            wealth,
            urban,
            late,
            low_prevalence,
        } => {
            let flag = |v: bool| if v { 1.0 } else { 0.0 };
            let eta: Vec<f64> = records
                .map(|r| {
                    let b = &r.birth;
                    small_size * flag(b.reported_size == Some(ReportedSize::Small))
                        + large_size * flag(b.reported_size == Some(ReportedSize::Large))
                        + wealth * (b.wealth_index as f64 - 3.0)
                        + urban * b.urban as f64
                        + late * flag(r.late)
                        + low_prevalence * flag(r.low_prevalence)
                })
                .collect();
            let a = calibrate_intercept(&eta, rate);
            (eta.iter().map(|e| logistic(a + e)).collect(), Some(a))
        }
    }
}

/// Intercept `a` with `mean(logistic(a + eta)) = rate`, by bisection.
fn calibrate_intercept(eta: &[f64], rate: f64) -> f64 {
    let f = |a: f64| eta.iter().map(|e| logistic(a + e)).sum::<f64>() / eta.len().max(1) as f64 - rate;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Settings for a direct draw from the outcome model with a Gaussian error,
/// bypassing matching and imputation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedDataConfig {
    pub clusters: usize,
    pub births_per_cluster: usize,
    pub effects: OutcomeEffects,
    pub sigma1: f64,
    /// Only used by [`gen_binary_data`].
    pub unobserved: Option<TrueUnobserved>,
}

impl Default for MixedDataConfig {
    fn default() -> Self {
        Self {
            clusters: 200,
            births_per_cluster: 30,
            effects: OutcomeEffects::default(),
            sigma1: 0.1,
            unobserved: None,
        }
    }
}

/// Output of [`gen_binary_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryData {
    pub data: AnalysisData,
    /// Outcomes before masking.
    pub complete: Vec<u8>,
    /// The true confounder, when configured.
    pub unobserved: Option<Vec<u8>>,
}

/// Clusters cycle through the four design cells (high-low early, high-low
/// late, high-high early, high-high late); low prevalence marks high-low late.
fn cell_layout(
    cfg: &MixedDataConfig,
    seed: u64,
    mut outcome: impl FnMut(&mut ChaCha8Rng, &mut AnalysisRecord, f64),
) -> AnalysisData {
    let sigma0 = Normal::new(0.0, cfg.effects.sigma0.max(0.0)).unwrap();
    let mut records = Vec::new();
    let mut cluster_ids = Vec::new();
    for g in 0..cfg.clusters {
        let mut rng = substream(seed, Domain::Scenario, &[3, g as u64]);
        let id = format!("M{:05}", g + 1);
        let group = g % 4 < 2;
        let late = g % 2 == 1;
        let site: [f64; 6] = std::array::from_fn(|k| {
            let (lo, hi) = Covariate::ALL[k].range();
            lo + (hi - lo) * rng.random_range(0.15..0.85)
        });
        let cov = CovariateMeans::complete(site);
        let alpha = if cfg.effects.sigma0 > 0.0 { sigma0.sample(&mut rng) } else { 0.0 };
        for b in 0..cfg.births_per_cluster {
            let birth = draw_birth(&mut rng, format!("{id}-{:04}", b + 1), &id, &cov);
            let mut rec = AnalysisRecord {
                birth,
                cluster: g,
                low_prevalence: group && late,
                late,
                high_low_group: group,
            };
            outcome(&mut rng, &mut rec, alpha);
            records.push(rec);
        }
        cluster_ids.push(id);
    }
    AnalysisData { records, cluster_ids }
}

/// Gaussian outcome `linear + alpha + N(0, sigma1²)`, returned alongside the
/// records (whose `lbw` stays empty).
pub fn gen_mixed_data(cfg: &MixedDataConfig, seed: u64) -> (AnalysisData, Vec<f64>) {
    let sigma1 = Normal::new(0.0, cfg.sigma1.max(0.0)).unwrap();
    let mut y = Vec::new();
    let data = cell_layout(cfg, seed, |rng, rec, alpha| {
        let eps = if cfg.sigma1 > 0.0 { sigma1.sample(rng) } else { 0.0 };
        y.push(cfg.effects.linear(rec) + alpha + eps);
    });
    (data, y)
}

/// Binary outcome drawn as in [`gen_scenario`] (clipped linear probability,
/// reported size dependent on the outcome, optional true U), then masked by
/// `missingness`. `sigma1` is unused.
pub fn gen_binary_data(cfg: &MixedDataConfig, missingness: &Missingness, seed: u64) -> BinaryData {
    let mut u_missing = Vec::new();
    let mut unobserved = Vec::new();
    let mut data = cell_layout(cfg, seed, |rng, rec, alpha| {
        let mut p = cfg.effects.linear(rec) + alpha;
        if let Some(t) = cfg.unobserved {
            let shift = if rec.low_prevalence { t.p1 / 100.0 } else { 0.0 };
            let u = u8::from(rng.random_bool(0.5 + shift));
            p += t.lambda * u as f64;
            unobserved.push(u);
        }
        let y = u8::from(rng.random::<f64>() < p.clamp(CLIP_BOUNDS.0, CLIP_BOUNDS.1));
        rec.birth.lbw = Some(y);
        rec.birth.reported_size = Some(draw_reported_size(rng, y));
        u_missing.push(rng.random::<f64>());
    });
    let complete: Vec<u8> = data.records.iter().map(|r| r.birth.lbw.unwrap()).collect();
    let (q, _) = missing_probabilities(missingness, data.records.iter());
    for ((rec, u), q) in data.records.iter_mut().zip(u_missing).zip(q) {
        if u < q {
            rec.birth.lbw = None;
        }
    }
    BinaryData {
        data,
        complete,
        unobserved: cfg.unobserved.map(|_| unobserved),
    }
}
