//! Huber M-estimation by iteratively reweighted least squares.
//!
//! Both the edge-wise confounder regressions and the per-class robust means
//! use the same scheme: the effective Huber threshold is `tuning * scale`,
//! where the scale is re-estimated each iteration as 1.4826 x the median
//! absolute deviation of the current residuals. `tuning = 1.345` gives the
//! usual 95% Gaussian efficiency. When the MAD collapses to zero the fit has
//! already matched the majority of the sample exactly and iteration stops.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::math;

/// 95%-efficiency tuning constant for the Huber threshold.
pub const HUBER_DEFAULT_TUNING: f64 = 1.345;

/// Consistency factor relating MAD to the Gaussian standard deviation.
pub const MAD_CONSISTENCY: f64 = 1.4826;

const MAX_ITER: usize = 50;
const COEFF_TOL: f64 = 1e-8;
const SCALE_FLOOR: f64 = 1e-12;
const RIDGE_DAMPING: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RobustError {
    #[error("empty sample")]
    EmptySample,
    #[error("need at least {needed} observations for {covariates} covariates, got {got}")]
    TooFewObservations { needed: usize, covariates: usize, got: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("huber tuning constant must be positive, got {0}")]
    BadTuning(f64),
}

/// Result of one edge-wise robust regression.
#[derive(Debug, Clone)]
pub struct EdgeFit {
    pub intercept: f64,
    pub gamma: Vec<f64>,
    /// Normal equations were rank-deficient and solved with ridge damping.
    pub degenerate: bool,
    /// Coefficient change fell below tolerance before the iteration cap.
    pub converged: bool,
    pub iterations: usize,
    /// (before, after) Huber objective values per iteration, both evaluated
    /// at that iteration's threshold; IRLS guarantees after <= before.
    pub descent: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LocationFit {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub descent: Vec<(f64, f64)>,
}

fn huber_loss(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn objective(residuals: &[f64], delta: f64) -> f64 {
    residuals.iter().map(|&r| huber_loss(r, delta)).sum()
}

/// Solves the weighted normal equations XᵀWX beta = XᵀWy by Cholesky,
/// retrying with ridge damping when the Gram matrix is rank-deficient.
/// Returns the solution and whether damping was needed.
fn weighted_solve(x: &Mat, y: &[f64], w: &[f64]) -> (Vec<f64>, bool) {
    let p = x.cols();
    let mut gram = Mat::zeros(p, p);
    let mut rhs = vec![0.0; p];
    for i in 0..x.rows() {
        let wi = w[i];
        let row = x.row(i);
        for a in 0..p {
            let wa = wi * row[a];
            rhs[a] += wa * y[i];
            for b in a..p {
                gram.add_assign_at(a, b, wa * row[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            let v = gram.get(b, a);
            gram.set(a, b, v);
        }
    }
    if let Some(beta) = cholesky_solve(&gram, &rhs) {
        return (beta, false);
    }
    for a in 0..p {
        gram.add_assign_at(a, a, RIDGE_DAMPING);
    }
    let beta = cholesky_solve(&gram, &rhs)
        .unwrap_or_else(|| vec![0.0; p]);
    (beta, true)
}

/// Cholesky solve for symmetric positive-definite systems; `None` when a
/// pivot degenerates relative to the largest diagonal entry.
fn cholesky_solve(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0_f64, f64::max);
    let tol = 1e-12 * max_diag.max(1e-300);
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= tol {
                    return None;
                }
                l.set(i, j, math::sqrt(s));
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Some(x)
}

/// Robust scale of the residuals: 1.4826 x MAD. Zero means the current fit
/// matches more than half the sample exactly.
fn residual_scale(residuals: &[f64]) -> f64 {
    MAD_CONSISTENCY * math::mad(residuals)
}

/// Huber regression of `responses` on an intercept plus `design` rows.
///
/// `design` is N_e x d (standardized covariates, one row per subject) and
/// `tuning` scales the per-iteration threshold. On data whose residuals all
/// stay below the threshold this coincides with ordinary least squares.
pub fn huber_fit_edge(
    responses: &[f64],
    design: &Mat,
    tuning: f64,
) -> Result<EdgeFit, RobustError> {
    let n = responses.len();
    let d = design.cols();
    if design.rows() != n {
        return Err(RobustError::TooFewObservations { needed: n, covariates: d, got: design.rows() });
    }
    if n < d + 2 {
        return Err(RobustError::TooFewObservations { needed: d + 2, covariates: d, got: n });
    }
    if !(tuning > 0.0) {
        return Err(RobustError::BadTuning(tuning));
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(RobustError::NonFinite { what: "responses" });
    }
    if design.data().iter().any(|v| !v.is_finite()) {
        return Err(RobustError::NonFinite { what: "design" });
    }

    // Augment with the intercept column.
    let mut x = Mat::zeros(n, d + 1);
    for i in 0..n {
        x.set(i, 0, 1.0);
        for k in 0..d {
            x.set(i, k + 1, design.get(i, k));
        }
    }

    let ones = vec![1.0; n];
    let (mut beta, mut degenerate) = weighted_solve(&x, responses, &ones);
    let mut residuals = compute_residuals(&x, responses, &beta);
    let mut descent = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITER {
        let scale = residual_scale(&residuals);
        if scale < SCALE_FLOOR {
            converged = true;
            break;
        }
        iterations += 1;
        let delta = tuning * scale;
        let before = objective(&residuals, delta);
        let weights: Vec<f64> = residuals.iter().map(|&r| huber_weight(r, delta)).collect();
        let (next, damped) = weighted_solve(&x, responses, &weights);
        degenerate |= damped;
        let step = beta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        beta = next;
        residuals = compute_residuals(&x, responses, &beta);
        descent.push((before, objective(&residuals, delta)));
        if step < COEFF_TOL {
            converged = true;
            break;
        }
    }

    Ok(EdgeFit {
        intercept: beta[0],
        gamma: beta[1..].to_vec(),
        degenerate,
        converged,
        iterations,
        descent,
    })
}

fn compute_residuals(x: &Mat, y: &[f64], beta: &[f64]) -> Vec<f64> {
    (0..x.rows()).map(|i| y[i] - math::dot(x.row(i), beta)).collect()
}

/// Huber location estimate of a sample (the robust mean used for site-level
/// class means). Equals the arithmetic mean when every deviation stays below
/// the threshold; returns the median when the MAD degenerates to zero.
pub fn robust_mean(values: &[f64], tuning: f64) -> Result<LocationFit, RobustError> {
    if values.is_empty() {
        return Err(RobustError::EmptySample);
    }
    if !(tuning > 0.0) {
        return Err(RobustError::BadTuning(tuning));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RobustError::NonFinite { what: "values" });
    }
    let mut mu = math::median(values);
    let mut descent = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        let residuals: Vec<f64> = values.iter().map(|&v| v - mu).collect();
        let scale = residual_scale(&residuals);
        if scale < SCALE_FLOOR {
            converged = true;
            break;
        }
        iterations += 1;
        let delta = tuning * scale;
        let before = objective(&residuals, delta);
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for &v in values {
            let w = huber_weight(v - mu, delta);
            wsum += w;
            acc += w * v;
        }
        let next = acc / wsum;
        let after = objective(&values.iter().map(|&v| v - next).collect::<Vec<_>>(), delta);
        descent.push((before, after));
        let step = (next - mu).abs();
        mu = next;
        if step < COEFF_TOL {
            converged = true;
            break;
        }
    }
    Ok(LocationFit { value: mu, converged, iterations, descent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_responses_give_constant_intercept() {
        let design = Mat::from_rows(&[&[0.3], &[-1.0], &[2.0], &[0.1], &[0.9]]);
        let fit = huber_fit_edge(&[4.2; 5], &design, HUBER_DEFAULT_TUNING).unwrap();
        assert!((fit.intercept - 4.2).abs() < 1e-10);
        assert!(fit.gamma[0].abs() < 1e-10);
    }

    #[test]
    fn exact_linear_data_recovers_coefficients() {
        // r = 2 + 3 q, no noise: coincides with OLS.
        let q = [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
        let rows: Vec<[f64; 1]> = q.iter().map(|&v| [v]).collect();
        let design = Mat::from_rows(&rows.iter().map(|r| &r[..]).collect::<Vec<_>>());
        let y: Vec<f64> = q.iter().map(|&v| 2.0 + 3.0 * v).collect();
        let fit = huber_fit_edge(&y, &design, HUBER_DEFAULT_TUNING).unwrap();
        assert!((fit.intercept - 2.0).abs() < 1e-8);
        assert!((fit.gamma[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn robust_mean_symmetric_sample() {
        let fit = robust_mean(&[1.0, 2.0, 3.0], HUBER_DEFAULT_TUNING).unwrap();
        assert!((fit.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn robust_mean_single_value() {
        let fit = robust_mean(&[7.5], HUBER_DEFAULT_TUNING).unwrap();
        assert_eq!(fit.value, 7.5);
    }

    #[test]
    fn robust_mean_resists_outlier() {
        let fit = robust_mean(&[0.0, 0.0, 0.0, 100.0], HUBER_DEFAULT_TUNING).unwrap();
        assert!(fit.value < 5.0, "got {}", fit.value);
    }

    #[test]
    fn robust_mean_empty_errors() {
        assert_eq!(robust_mean(&[], 1.345).unwrap_err(), RobustError::EmptySample);
    }

    #[test]
    fn descent_is_monotone() {
        let design = Mat::from_rows(&[&[0.1], &[0.7], &[-0.2], &[1.4], &[-1.1], &[0.4], &[2.2]]);
        let y = [0.5, 1.9, -0.1, 3.0, -2.0, 1.2, 40.0];
        let fit = huber_fit_edge(&y, &design, HUBER_DEFAULT_TUNING).unwrap();
        for (before, after) in fit.descent {
            assert!(after <= before + 1e-12, "{after} > {before}");
        }
    }

    #[test]
    fn rank_deficient_design_flags_degenerate() {
        // Duplicate covariate columns make the Gram matrix singular.
        let design = Mat::from_rows(&[
            &[1.0, 1.0],
            &[2.0, 2.0],
            &[3.0, 3.0],
            &[4.0, 4.0],
            &[5.0, 5.0],
        ]);
        let y = [1.0, 2.0, 3.1, 3.9, 5.0];
        let fit = huber_fit_edge(&y, &design, HUBER_DEFAULT_TUNING).unwrap();
        assert!(fit.degenerate);
        assert!(fit.intercept.is_finite());
    }

    #[test]
    fn too_few_observations_rejected() {
        let design = Mat::from_rows(&[&[1.0], &[2.0]]);
        assert!(matches!(
            huber_fit_edge(&[1.0, 2.0], &design, 1.345),
            Err(RobustError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn huge_tuning_matches_ols() {
        // With the threshold far above every residual the weights never leave
        // 1, so the fit is plain least squares.
        let design = Mat::from_rows(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0]]);
        let y = [0.1, 1.2, 1.8, 3.3, 3.6];
        let huber = huber_fit_edge(&y, &design, 1e12).unwrap();
        let (ols, _) = {
            let mut x = Mat::zeros(5, 2);
            for i in 0..5 {
                x.set(i, 0, 1.0);
                x.set(i, 1, design.get(i, 0));
            }
            weighted_solve(&x, &y, &[1.0; 5])
        };
        assert!((huber.intercept - ols[0]).abs() < 1e-8);
        assert!((huber.gamma[0] - ols[1]).abs() < 1e-8);
    }
}
