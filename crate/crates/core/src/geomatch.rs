//! Step 1: within-country optimal pairing of early and late clusters by
//! geographic proximity.
//!
//! Distances are rank-based Mahalanobis distances on (latitude, longitude),
//! with a soft propensity-score caliper: entries whose propensity scores differ
//! by more than the caliper width receive a large additive penalty instead of
//! being forbidden, so a full pairing always exists.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::logistic::{self, NewtonOptions};
use crate::model::{ClusterRecord, GeoPoint, Role};
use crate::stats::{average_ranks, sample_sd};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.latitude_deg.to_radians(), b.latitude_deg.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.longitude_deg - a.longitude_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Caliper configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaliperSpec {
    /// Caliper width as a multiple of the sd of the estimated propensities.
    pub width_sd: f64,
    /// Penalty as a multiple of the largest base distance.
    pub penalty_factor: f64,
}

impl Default for CaliperSpec {
    fn default() -> Self {
        Self {
            width_sd: 0.2,
            penalty_factor: 1000.0,
        }
    }
}

/// A caliper bound to concrete propensity scores.
#[derive(Debug, Clone)]
pub struct Caliper {
    pub early_scores: Vec<f64>,
    pub late_scores: Vec<f64>,
    pub width: f64,
    pub penalty_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// `entries[i][j]`: early cluster `i` to late cluster `j`.
    pub entries: Vec<Vec<f64>>,
    /// Additive penalty applied to caliper violations (0 if none).
    pub penalty: f64,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }
}

const RIDGE: f64 = 1e-8;

/// Rank-based Mahalanobis distances between every early/late cluster pair.
///
/// Coordinates are replaced by their average ranks over the pooled set; the
/// distance is the quadratic form `(r_i - r_j)' S⁻¹ (r_i - r_j)` with `S` the
/// sample covariance of the pooled rank vectors.
pub fn rank_mahalanobis(early: &[GeoPoint], late: &[GeoPoint], caliper: Option<&Caliper>) -> DistanceMatrix {
    let pooled: Vec<GeoPoint> = early.iter().chain(late).copied().collect();
    let lat_r = average_ranks(&pooled.iter().map(|p| p.latitude_deg).collect::<Vec<_>>());
    let lon_r = average_ranks(&pooled.iter().map(|p| p.longitude_deg).collect::<Vec<_>>());

    let n = pooled.len() as f64;
    let ml = lat_r.iter().sum::<f64>() / n;
    let mo = lon_r.iter().sum::<f64>() / n;
    let denom = (n - 1.0).max(1.0);
    let mut s = Matrix2::zeros();
    for (a, b) in lat_r.iter().zip(&lon_r) {
        let d = Vector2::new(a - ml, b - mo);
        s += d * d.transpose();
    }
    s /= denom;

    let inv = match s.try_inverse() {
        Some(inv) if s.determinant() > 1e-12 * (s.trace() * s.trace()).max(1.0) => inv,
        _ => (s + Matrix2::identity() * RIDGE)
            .try_inverse()
            .unwrap_or_else(|| Matrix2::identity() / RIDGE),
    };

    let ne = early.len();
    let mut entries: Vec<Vec<f64>> = (0..ne)
        .map(|i| {
            (0..late.len())
                .map(|j| {
                    let d = Vector2::new(lat_r[i] - lat_r[ne + j], lon_r[i] - lon_r[ne + j]);
                    (d.transpose() * inv * d)[(0, 0)].max(0.0)
                })
                .collect()
        })
        .collect();

    let mut penalty = 0.0;
    if let Some(cal) = caliper {
        let max_base = entries.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
        penalty = cal.penalty_factor * max_base;
        for (i, row) in entries.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                if (cal.early_scores[i] - cal.late_scores[j]).abs() > cal.width {
                    *e += penalty;
                }
            }
        }
    }
    DistanceMatrix { entries, penalty }
}

/// Minimum-total-distance pairing with `min(rows, cols)` pairs.
pub fn optimal_pairing(d: &DistanceMatrix) -> Vec<(usize, usize)> {
    assignment::solve(&d.entries).pairs
}

/// Propensity of late-year membership from a logistic fit on (lat, lon).
///
/// Returns `None` when the fit fails; callers then proceed without a caliper.
pub fn propensity_scores(early: &[GeoPoint], late: &[GeoPoint]) -> Option<(Vec<f64>, Vec<f64>)> {
    let pts: Vec<GeoPoint> = early.iter().chain(late).copied().collect();
    let n = pts.len();
    let lat: Vec<f64> = pts.iter().map(|p| p.latitude_deg).collect();
    let lon: Vec<f64> = pts.iter().map(|p| p.longitude_deg).collect();
    // Constant coordinates are collinear with the intercept and are dropped.
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut scales = vec![10.0];
    for coord in [lat, lon] {
        let sd = sample_sd(&coord);
        if sd > 0.0 {
            scales.push(2.5 / (2.0 * sd));
            columns.push(coord);
        }
    }
    let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let y: Vec<f64> = (0..n).map(|i| if i < early.len() { 0.0 } else { 1.0 }).collect();
    let fit = logistic::fit(&x, &y, &scales, NewtonOptions::default()).ok()?;
    let eta = &x * &fit.coefficients;
    let probs: Vec<f64> = eta.iter().map(|&e| crate::stats::logistic(e)).collect();
    Some((probs[..early.len()].to_vec(), probs[early.len()..].to_vec()))
}

/// One Step-1 pair, referring to clusters by id.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPair {
    pub country: String,
    pub early_id: String,
    pub late_id: String,
    pub rank_distance: f64,
    pub haversine_km: f64,
}

/// Pairs clusters within each country. Countries are solved in parallel and
/// results returned sorted by country then early id.
pub fn match_all_countries(clusters: &[ClusterRecord], caliper: &CaliperSpec) -> Vec<GeoPair> {
    let mut by_country: BTreeMap<&str, (Vec<&ClusterRecord>, Vec<&ClusterRecord>)> = BTreeMap::new();
    for c in clusters {
        let slot = by_country.entry(c.country.as_str()).or_default();
        match c.role {
            Role::Early => slot.0.push(c),
            Role::Late => slot.1.push(c),
        }
    }
    let problems: Vec<_> = by_country.into_iter().collect();
    let mut out: Vec<GeoPair> = problems
        .par_iter()
        .flat_map_iter(|(country, (early, late))| match_country(country, early, late, caliper))
        .collect();
    out.sort_by(|a, b| (&a.country, &a.early_id).cmp(&(&b.country, &b.early_id)));
    out
}

fn match_country(
    country: &str,
    early: &[&ClusterRecord],
    late: &[&ClusterRecord],
    spec: &CaliperSpec,
) -> Vec<GeoPair> {
    if early.is_empty() || late.is_empty() {
        return Vec::new();
    }
    // Solve on id-sorted inputs so the result does not depend on file order.
    let mut early: Vec<&ClusterRecord> = early.to_vec();
    let mut late: Vec<&ClusterRecord> = late.to_vec();
    early.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
    late.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
    let ep: Vec<GeoPoint> = early.iter().map(|c| c.location).collect();
    let lp: Vec<GeoPoint> = late.iter().map(|c| c.location).collect();

    let caliper = if spec.width_sd > 0.0 {
        match propensity_scores(&ep, &lp) {
            Some((es, ls)) => {
                let all: Vec<f64> = es.iter().chain(&ls).copied().collect();
                Some(Caliper {
                    width: spec.width_sd * sample_sd(&all),
                    early_scores: es,
                    late_scores: ls,
                    penalty_factor: spec.penalty_factor,
                })
            }
            None => {
                log::warn!("{country}: propensity fit failed; pairing without caliper");
                None
            }
        }
    } else {
        None
    };

    let d = rank_mahalanobis(&ep, &lp, caliper.as_ref());
    optimal_pairing(&d)
        .into_iter()
        .map(|(i, j)| GeoPair {
            country: country.to_string(),
            early_id: early[i].cluster_id.clone(),
            late_id: late[j].cluster_id.clone(),
            rank_distance: d.entries[i][j],
            haversine_km: haversine_km(ep[i], lp[j]),
        })
        .collect()
}
