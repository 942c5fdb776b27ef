//! Random-intercept linear model fitted by restricted maximum likelihood.
//!
//! With `γ = σ0² / σ1²` and group sums `s_g = Σ x_i`, `t_g = Σ y_i` the GLS
//! quantities only need per-group sufficient statistics:
//!
//! ```text
//! w_g = γ / (1 + γ n_g)
//! A   = X'X − Σ w_g s_g s_g'      b = X'y − Σ w_g s_g t_g
//! c   = y'y − Σ w_g t_g²          β = A⁻¹ b,  q = c − b'β
//! ```
//!
//! and profiling σ1² = q / (n − p) out of the restricted likelihood leaves
//!
//! ```text
//! −2ℓ(γ) = (n − p)(ln(q / (n − p)) + 1 + ln 2π) + Σ ln(1 + γ n_g) + ln |A|
//! ```
//!
//! which is minimized over `ln γ` by a grid search and golden-section
//! refinement, with the boundary `γ = 0` checked separately.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::design::Design;
use crate::error::{Error, Result};
use crate::model::Regressor;

const LOG_GAMMA_RANGE: (f64, f64) = (-15.0, 8.0);
const GRID_STEP: f64 = 0.5;
const GOLDEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MixedFit {
    pub columns: Vec<Regressor>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    /// Restricted log-likelihood at the estimate.
    pub reml_loglik: f64,
    pub converged: bool,
}

impl MixedFit {
    pub fn coefficient(&self, r: Regressor) -> Option<(f64, f64)> {
        let j = self.columns.iter().position(|&c| c == r)?;
        Some((self.coefficients[j], self.std_errors[j]))
    }
}

/// Design-only quantities, reused across outcome vectors.
#[derive(Debug, Clone)]
pub struct MixedModel {
    columns: Vec<Regressor>,
    x: DMatrix<f64>,
    groups: Vec<usize>,
    group_n: Vec<f64>,
    group_s: Vec<DVector<f64>>,
    xtx: DMatrix<f64>,
}

struct OutcomeStats {
    xty: DVector<f64>,
    group_t: Vec<f64>,
    yty: f64,
}

struct Profile {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    q: f64,
    neg2ll: f64,
}

impl MixedModel {
    pub fn new(design: &Design) -> Result<Self> {
        let (n, p) = design.x.shape();
        if design.n_groups < 2 {
            return Err(Error::Validation(format!(
                "mixed model needs at least two clusters, got {}",
                design.n_groups
            )));
        }
        if n <= p {
            return Err(Error::Validation(format!("mixed model has {n} records for {p} coefficients")));
        }
        let xtx = design.x.transpose() * &design.x;
        let dependent = collinear_columns(&xtx);
        if !dependent.is_empty() {
            return Err(Error::RankDeficient(
                dependent.iter().map(|&j| design.columns[j].name().to_string()).collect(),
            ));
        }
        let mut group_n = vec![0.0; design.n_groups];
        let mut group_s = vec![DVector::zeros(p); design.n_groups];
        for (i, &g) in design.groups.iter().enumerate() {
            group_n[g] += 1.0;
            group_s[g] += design.x.row(i).transpose();
        }
        Ok(Self {
            columns: design.columns.clone(),
            x: design.x.clone(),
            groups: design.groups.clone(),
            group_n,
            group_s,
            xtx,
        })
    }

    pub fn columns(&self) -> &[Regressor] {
        &self.columns
    }

    fn n(&self) -> usize {
        self.x.nrows()
    }

    fn p(&self) -> usize {
        self.x.ncols()
    }

    fn outcome_stats(&self, y: &[f64]) -> OutcomeStats {
        let yv = DVector::from_column_slice(y);
        let mut group_t = vec![0.0; self.group_n.len()];
        for (i, &g) in self.groups.iter().enumerate() {
            group_t[g] += y[i];
        }
        OutcomeStats {
            xty: self.x.transpose() * &yv,
            group_t,
            yty: yv.dot(&yv),
        }
    }

    /// A, b and c at a given variance ratio.
    fn gls_parts(&self, gamma: f64, s: &OutcomeStats) -> (DMatrix<f64>, DVector<f64>, f64) {
        let mut a = self.xtx.clone();
        let mut b = s.xty.clone();
        let mut c = s.yty;
        if gamma > 0.0 {
            for g in 0..self.group_n.len() {
                let w = gamma / (1.0 + gamma * self.group_n[g]);
                let sg = &self.group_s[g];
                a.ger(-w, sg, sg, 1.0);
                b.axpy(-w * s.group_t[g], sg, 1.0);
                c -= w * s.group_t[g] * s.group_t[g];
            }
        }
        (a, b, c)
    }

    fn profile(&self, gamma: f64, s: &OutcomeStats) -> Option<Profile> {
        let (a, b, c) = self.gls_parts(gamma, s);
        let chol = a.cholesky()?;
        let beta = chol.solve(&b);
        let q = c - b.dot(&beta);
        let dof = (self.n() - self.p()) as f64;
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_groups: f64 = self.group_n.iter().map(|ng| (gamma * ng).ln_1p()).sum();
        let neg2ll = dof * ((q / dof).ln() + 1.0 + (2.0 * PI).ln()) + log_groups + logdet;
        Some(Profile {
            beta,
            a_inv: chol.inverse(),
            q,
            neg2ll,
        })
    }

    /// Restricted log-likelihood at arbitrary variance components.
    pub fn reml_loglik(&self, y: &[f64], sigma0_sq: f64, sigma1_sq: f64) -> f64 {
        let s = self.outcome_stats(y);
        let gamma = sigma0_sq / sigma1_sq;
        let (a, b, c) = self.gls_parts(gamma, &s);
        let Some(chol) = a.cholesky() else {
            return f64::NEG_INFINITY;
        };
        let beta = chol.solve(&b);
        let q = c - b.dot(&beta);
        let dof = (self.n() - self.p()) as f64;
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_groups: f64 = self.group_n.iter().map(|ng| (gamma * ng).ln_1p()).sum();
        let neg2ll = dof * sigma1_sq.ln() + log_groups + logdet + q / sigma1_sq + dof * (2.0 * PI).ln();
        -0.5 * neg2ll
    }

    /// Fit with the variance ratio held fixed (`γ = 0` gives ordinary least squares).
    pub fn fit_at_ratio(&self, y: &[f64], gamma: f64) -> Result<MixedFit> {
        let s = self.outcome_stats(y);
        let prof = self
            .profile(gamma, &s)
            .ok_or_else(|| Error::Numerical(format!("GLS system is singular at variance ratio {gamma}")))?;
        Ok(self.finish(gamma, prof, true))
    }

    pub fn fit(&self, y: &[f64]) -> Result<MixedFit> {
        if y.len() != self.n() {
            return Err(Error::Validation(format!(
                "outcome has {} values for {} design rows",
                y.len(),
                self.n()
            )));
        }
        let s = self.outcome_stats(y);
        let at_zero = self
            .profile(0.0, &s)
            .ok_or_else(|| Error::Numerical("X'X is singular".into()))?;
        // Perfect fit: residual variance is zero and the likelihood is unbounded.
        if !(at_zero.q > 1e-12 * s.yty.max(1e-300)) {
            let p = self.p();
            return Ok(MixedFit {
                columns: self.columns.clone(),
                coefficients: at_zero.beta.iter().copied().collect(),
                std_errors: vec![0.0; p],
                sigma0_sq: 0.0,
                sigma1_sq: 0.0,
                reml_loglik: f64::INFINITY,
                converged: true,
            });
        }

        let f = |theta: f64| self.profile(theta.exp(), &s).map_or(f64::INFINITY, |p| p.neg2ll);
        let steps = ((LOG_GAMMA_RANGE.1 - LOG_GAMMA_RANGE.0) / GRID_STEP).round() as usize;
        let (mut best_theta, mut best_val) = (LOG_GAMMA_RANGE.0, f64::INFINITY);
        for k in 0..=steps {
            let theta = LOG_GAMMA_RANGE.0 + k as f64 * GRID_STEP;
            let v = f(theta);
            if v < best_val {
                best_val = v;
                best_theta = theta;
            }
        }
        if !best_val.is_finite() {
            return Err(Error::NonConvergence {
                context: "REML profile likelihood".into(),
                iterations: steps + 1,
                trace: "no finite objective on the variance-ratio grid".into(),
            });
        }
        let lo = (best_theta - GRID_STEP).max(LOG_GAMMA_RANGE.0);
        let hi = (best_theta + GRID_STEP).min(LOG_GAMMA_RANGE.1);
        let (theta, val) = golden_section(f, lo, hi, GOLDEN_TOL);
        let (theta, val) = if val <= best_val { (theta, val) } else { (best_theta, best_val) };

        if at_zero.neg2ll <= val {
            return Ok(self.finish(0.0, at_zero, true));
        }
        let gamma = theta.exp();
        let prof = self
            .profile(gamma, &s)
            .ok_or_else(|| Error::Numerical(format!("GLS system is singular at variance ratio {gamma}")))?;
        Ok(self.finish(gamma, prof, true))
    }

    fn finish(&self, gamma: f64, prof: Profile, converged: bool) -> MixedFit {
        let dof = (self.n() - self.p()) as f64;
        let sigma1_sq = prof.q / dof;
        let std_errors = (0..self.p())
            .map(|j| (sigma1_sq * prof.a_inv[(j, j)]).max(0.0).sqrt())
            .collect();
        MixedFit {
            columns: self.columns.clone(),
            coefficients: prof.beta.iter().copied().collect(),
            std_errors,
            sigma0_sq: gamma * sigma1_sq,
            sigma1_sq,
            reml_loglik: -0.5 * prof.neg2ll,
            converged,
        }
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Columns that are (numerically) linear combinations of earlier columns,
/// found by a pivot-free Cholesky on the correlation-scaled cross-product.
pub fn collinear_columns(xtx: &DMatrix<f64>) -> Vec<usize> {
    let p = xtx.nrows();
    let scale: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt()).collect();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut dependent = Vec::new();
    for j in 0..p {
        if !(scale[j] > 0.0) {
            dependent.push(j);
            continue;
        }
        let mut d = 1.0;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < 1e-10 {
            dependent.push(j);
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..p {
            if !(scale[i] > 0.0) {
                continue;
            }
            let mut v = xtx[(i, j)] / (scale[i] * scale[j]);
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    dependent
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(x: DMatrix<f64>, groups: Vec<usize>) -> Design {
        let p = x.ncols();
        let n_groups = groups.iter().max().map_or(0, |g| g + 1);
        Design {
            columns: Regressor::OUTCOME_MODEL[..p].to_vec(),
            dropped: vec![],
            x,
            groups,
            n_groups,
        }
    }

    #[test]
    fn zero_outcome_is_degenerate_fit() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let m = MixedModel::new(&design(x, vec![0, 0, 0, 1, 1, 1])).unwrap();
        let fit = m.fit(&[0.0; 6]).unwrap();
        assert!(fit.coefficients.iter().all(|b| *b == 0.0));
        assert_eq!(fit.sigma0_sq, 0.0);
    }

    #[test]
    fn collinear_column_is_named() {
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let err = MixedModel::new(&design(x, vec![0, 0, 0, 1, 1, 1])).unwrap_err();
        match err {
            Error::RankDeficient(cols) => assert_eq!(cols, vec!["late_year".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strong_cluster_effect_gives_positive_sigma0() {
        let n = 40;
        let groups: Vec<usize> = (0..n).map(|i| i / 5).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ((i * 7) % 11) as f64 });
        let y: Vec<f64> = (0..n)
            .map(|i| 0.3 * x[(i, 1)] + [3.0, -2.0, 1.0, -4.0, 2.5, 0.0, -1.0, 1.5][groups[i]] + ((i * 13) % 5) as f64 * 0.1)
            .collect();
        let m = MixedModel::new(&design(x, groups)).unwrap();
        let fit = m.fit(&y).unwrap();
        assert!(fit.sigma0_sq > 1.0);
        assert!(fit.sigma1_sq > 0.0);
        let ll = m.reml_loglik(&y, fit.sigma0_sq, fit.sigma1_sq);
        assert!((ll - fit.reml_loglik).abs() < 1e-8);
    }
}
