//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

/// Central finite-difference derivative of `f` with respect to each entry of `x`.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with an absolute floor so that gradients that are
/// exactly zero (a bias feeding batch norm) are compared absolutely.
///
/// Central differences of an O(1) loss carry rounding noise near
/// eps * L / h, a few times 1e-11 at h = 1e-5; the floor keeps that noise
/// well under the tolerance.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub const GRAD_FLOOR: f64 = 1e-5;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub mod gradcheck;

/// Textbook bias-corrected Adam on a scalar, written out step by step.
pub fn scalar_adam(theta0: f64, grads: &[f64], eta: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= eta * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

pub mod data;

/// Minimum within-cluster sum of squares over every partition of `values`
/// into `k` nonempty groups, by brute force.
pub fn exhaustive_wcss(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, &l) in values.iter().zip(&labels) {
            sums[l] += v;
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let wcss: f64 = values
                .iter()
                .zip(&labels)
                .map(|(v, &l)| (v - sums[l] / counts[l] as f64).powi(2))
                .sum();
            best = best.min(wcss);
        }
        let mut i = 0;
        while i < n && labels[i] == k - 1 {
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
        labels[i] += 1;
    }
}
