//! Logistic regression with independent Cauchy(0, s_j) priors, fitted at the
//! posterior mode by damped Newton iterations.
//!
//! The log-posterior is
//!
//! ```text
//! Σ_i [y_i η_i − log(1 + e^{η_i})] − Σ_j log(1 + (β_j / s_j)²)
//! ```
//!
//! which is not globally concave (the Cauchy log-density is convex in the
//! tails), so the Newton system is Levenberg-damped whenever the negative
//! Hessian is not positive definite. Columns are rescaled internally to unit
//! RMS; the returned mode and covariance are in the caller's units.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::{log1p_exp, logistic};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Convergence when the max-norm of the gradient drops below this.
    pub gradient_tolerance: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    /// Inverse of the negative Hessian of the log-posterior at the mode.
    pub covariance: DMatrix<f64>,
    pub log_posterior: f64,
    pub iterations: usize,
}

/// Fits the penalized model. `scales[j] = ∞` gives column `j` a flat prior.
///
/// An empty design is legal: the mode is then the prior mode, zero.
pub fn fit(
    x: &DMatrix<f64>,
    y: &[f64],
    scales: &[f64],
    opts: NewtonOptions,
) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if y.len() != n || scales.len() != p {
        return Err(Error::Validation(format!(
            "logistic fit: design is {n}x{p} but got {} outcomes and {} prior scales",
            y.len(),
            scales.len()
        )));
    }
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Validation("prior scales must be positive".into()));
    }

    // Column scaling: z = x / c, γ = β c, prior scale on γ is s c.
    let col_scale: Vec<f64> = (0..p)
        .map(|j| {
            let rms = (x.column(j).iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
            if rms > 0.0 && rms.is_finite() {
                rms
            } else {
                1.0
            }
        })
        .collect();
    let z = DMatrix::from_fn(n, p, |i, j| x[(i, j)] / col_scale[j]);
    let prior: Vec<f64> = scales.iter().zip(&col_scale).map(|(s, c)| s * c).collect();

    let objective = |g: &DVector<f64>| -> f64 {
        let eta = &z * g;
        let mut ll = 0.0;
        for i in 0..n {
            ll += y[i] * eta[i] - log1p_exp(eta[i]);
        }
        for j in 0..p {
            if prior[j].is_finite() {
                ll -= (g[j] / prior[j]).powi(2).ln_1p();
            }
        }
        ll
    };

    let grad_and_neg_hessian = |g: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let eta = &z * g;
        let mut resid = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        for i in 0..n {
            let mu = logistic(eta[i]);
            resid[i] = y[i] - mu;
            w[i] = mu * (1.0 - mu);
        }
        let mut grad = z.transpose() * resid;
        let mut wz = z.clone();
        for (i, mut row) in wz.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut h = z.transpose() * wz;
        for j in 0..p {
            if prior[j].is_finite() {
                let s2 = prior[j] * prior[j];
                let b2 = g[j] * g[j];
                grad[j] -= 2.0 * g[j] / (s2 + b2);
                h[(j, j)] += 2.0 * (s2 - b2) / ((s2 + b2) * (s2 + b2));
            }
        }
        (grad, h)
    };

    let mut gamma = DVector::zeros(p);
    let mut value = objective(&gamma);
    let mut trace: Vec<String> = Vec::new();
    let mut converged_at = None;

    for iter in 0..=opts.max_iterations {
        let (grad, h) = grad_and_neg_hessian(&gamma);
        let gmax = grad.amax();
        trace.push(format!("{iter}:{gmax:.3e}"));
        if gmax < opts.gradient_tolerance {
            converged_at = Some(iter);
            break;
        }
        if iter == opts.max_iterations {
            break;
        }

        let mut damping = 0.0;
        let step = loop {
            let mut hd = h.clone();
            for j in 0..p {
                hd[(j, j)] += damping;
            }
            if let Some(chol) = hd.cholesky() {
                break chol.solve(&grad);
            }
            damping = if damping == 0.0 { 1e-6 * (1.0 + h.diagonal().amax()) } else { damping * 10.0 };
            if !damping.is_finite() {
                return Err(Error::Numerical("logistic fit: Hessian damping diverged".into()));
            }
        };
        // Newton decrement at rounding level of the objective: the gradient
        // is a sum over records and may never reach an absolute tolerance.
        if grad.dot(&step) < 1e-13 * (1.0 + value.abs()) {
            converged_at = Some(iter);
            break;
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &gamma + &step * t;
            let cv = objective(&candidate);
            if cv.is_finite() && cv >= value {
                gamma = candidate;
                value = cv;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No ascent possible at working precision: treat as stationary.
            let (grad, _) = grad_and_neg_hessian(&gamma);
            if grad.amax() < opts.gradient_tolerance.max(1e-6) {
                converged_at = Some(iter);
                break;
            }
            return Err(Error::NonConvergence {
                context: "penalized logistic regression (line search stalled)".into(),
                iterations: iter + 1,
                trace: trace.join(" "),
            });
        }
    }

    let iterations = converged_at.ok_or_else(|| Error::NonConvergence {
        context: "penalized logistic regression".into(),
        iterations: opts.max_iterations,
        trace: trace.join(" "),
    })?;

    let (_, h) = grad_and_neg_hessian(&gamma);
    let chol = h.cholesky().ok_or_else(|| {
        Error::Numerical("logistic fit: negative Hessian at the mode is not positive definite".into())
    })?;
    let cov_gamma = chol.inverse();

    let coefficients = DVector::from_fn(p, |j, _| gamma[j] / col_scale[j]);
    let covariance = DMatrix::from_fn(p, p, |a, b| cov_gamma[(a, b)] / (col_scale[a] * col_scale[b]));

    Ok(LogisticFit {
        coefficients,
        covariance,
        log_posterior: value,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_data_gives_prior_mode() {
        let x = DMatrix::<f64>::zeros(0, 3);
        let fit = fit(&x, &[], &[10.0, 2.5, 2.5], NewtonOptions::default()).unwrap();
        assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-12));
        // Prior curvature at zero is 2/s², so the variance is s²/2.
        assert!((fit.covariance[(0, 0)] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn separated_data_stays_finite() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit(&x, &y, &[10.0, 2.5], NewtonOptions::default()).unwrap();
        assert!(fit.coefficients[1].is_finite());
        assert!(fit.coefficients[1] > 1.0);
        assert!(fit.coefficients[1] < 50.0);
    }

    #[test]
    fn flat_prior_matches_mle_on_balanced_table() {
        // 2x2 table: x=0 -> 1/4 successes, x=1 -> 3/4 successes.
        let rows = [(0.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 0.0)];
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { rows[i].0 });
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let fit = fit(&x, &y, &[f64::INFINITY, f64::INFINITY], NewtonOptions::default()).unwrap();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        assert!((fit.coefficients[0] - logit(0.25)).abs() < 1e-9);
        assert!((fit.coefficients[1] - (logit(0.75) - logit(0.25))).abs() < 1e-9);
    }
}
