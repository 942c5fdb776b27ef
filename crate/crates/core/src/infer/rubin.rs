//! Difference-in-differences contrasts and Rubin's combining rules.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrasts {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Cell means: `a` high-low early, `b` high-low late, `c` high-high early,
/// `d` high-high late.
pub fn did_contrasts(a: f64, b: f64, c: f64, d: f64) -> Contrasts {
    Contrasts {
        k1: (b - a) - (d - c),
        k2: d - c,
        k3: a - c,
    }
}

/// Cell means implied by an intercept and the three contrasts.
pub fn cell_means(k0: f64, k: Contrasts) -> (f64, f64, f64, f64) {
    let c = k0;
    let d = k0 + k.k2;
    let a = k0 + k.k3;
    let b = a + k.k2 + k.k1;
    (a, b, c, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledEstimate {
    pub estimate: f64,
    /// Between-imputation variance.
    pub between: f64,
    /// Mean within-imputation variance.
    pub within: f64,
    pub total: f64,
    /// Degrees of freedom; infinite when `between` is zero.
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl PooledEstimate {
    pub fn std_error(&self) -> f64 {
        self.total.sqrt()
    }

    /// `B / V̄`, the diagnostics variance ratio.
    pub fn var_ratio(&self) -> f64 {
        if self.within > 0.0 {
            self.between / self.within
        } else if self.between > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Pools per-replicate estimates and squared standard errors.
pub fn rubin_combine(estimates: &[f64], variances: &[f64]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(Error::Validation(format!(
            "Rubin's rules need at least two replicates with matching variances (got {m} estimates, {} variances)",
            variances.len()
        )));
    }
    let estimate = mean(estimates);
    // Identical replicates can leave a between-variance of pure rounding
    // noise, which would otherwise produce an absurd finite df.
    let scale = estimates.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let noise = (m as f64 * f64::EPSILON * scale).powi(2);
    let between = match sample_variance(estimates) {
        b if b <= noise => 0.0,
        b => b,
    };
    let within = mean(variances);
    let inflated = (1.0 + 1.0 / m as f64) * between;
    let total = inflated + within;
    let df = if between > 0.0 {
        (m as f64 - 1.0) * (1.0 + within / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    let se = total.sqrt();
    // Past this the t and normal quantiles agree to ~1e-7, and statrs'
    // inverse t CDF slows to a crawl.
    let (q, p_value) = if df < 1e6 {
        let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(format!("t distribution: {e}")))?;
        (t.inverse_cdf(0.975), two_sided(&t, estimate, se))
    } else {
        let n = Normal::standard();
        (n.inverse_cdf(0.975), two_sided(&n, estimate, se))
    };
    Ok(PooledEstimate {
        estimate,
        between,
        within,
        total,
        df,
        ci_low: estimate - q * se,
        ci_high: estimate + q * se,
        p_value,
    })
}

fn two_sided(dist: &impl ContinuousCDF<f64, f64>, estimate: f64, se: f64) -> f64 {
    if se > 0.0 {
        2.0 * dist.sf((estimate / se).abs())
    } else if estimate == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_rates() {
        let k = did_contrasts(9.33, 7.52, 9.18, 9.06);
        assert!((k.k1 - -1.69).abs() < 1e-10);
        assert!((k.k2 - -0.12).abs() < 1e-10);
        assert!((k.k3 - 0.15).abs() < 1e-10);
        assert_eq!(did_contrasts(1.0, 1.0, 1.0, 1.0), Contrasts { k1: 0.0, k2: 0.0, k3: 0.0 });
    }

    #[test]
    fn two_replicates_by_hand() {
        let p = rubin_combine(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p.estimate, 1.0);
        assert_eq!(p.between, 2.0);
        assert_eq!(p.total, 4.0);
        assert!((p.df - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn identical_estimates_use_normal_quantiles() {
        let p = rubin_combine(&[0.5; 4], &[0.04; 4]).unwrap();
        assert_eq!(p.between, 0.0);
        assert_eq!(p.total, p.within);
        assert!(p.df.is_infinite());
        assert!((p.ci_high - (0.5 + 1.959963984540054 * 0.2)).abs() < 1e-9);
    }
}
