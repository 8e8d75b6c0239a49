//! Exact Rényi log-moments of the one-dimensional subsampled Gaussian pair
//! `μ₀ = N(0, σ²)` and `μ = (1−q)μ₀ + qN(2, σ²)` (clip `C = 1`), by quadrature.
//!
//! This path shares nothing with the closed-form cost in `privacy_core`; it is
//! the reference that closed form is compared against.

use serde::{Deserialize, Serialize};

use crate::privacy_core::rdp_cost_subsampled_gaussian;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `ln E_{z∼μ}[(μ(z)/μ₀(z))^α]`
    MixtureOverBase,
    /// `ln E_{z∼μ₀}[(μ₀(z)/μ(z))^α]`
    BaseOverMixture,
}

/// `ln(μ(z)/μ₀(z)) = ln(1 − q + q·e^{(2z−2)/σ²})`
fn log_density_ratio(z: f64, q: f64, sigma: f64) -> f64 {
    let log_l = (2.0 * z - 2.0) / (sigma * sigma);
    if log_l < 700.0 {
        (q * log_l.exp_m1()).ln_1p()
    } else {
        log_l + q.ln() + ((1.0 - q) / q * (-log_l).exp()).ln_1p()
    }
}

fn normal_pdf(z: f64, sigma: f64) -> f64 {
    (-0.5 * (z / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Exact log-moment of order `alpha` in the given direction.
///
/// The integrand is written as `μ₀·expm1(·)` so the leading 1 never enters the
/// sum and the `O(q²)` result is not lost to cancellation.
pub fn log_moment(q: f64, sigma: f64, alpha: f64, direction: Direction) -> f64 {
    let exponent = match direction {
        Direction::MixtureOverBase => alpha + 1.0,
        Direction::BaseOverMixture => -alpha,
    };
    // the tilted integrand peaks near z = 2(α+1)
    let lo = -14.0 * sigma;
    let hi = 2.0 * (alpha + 1.0) + 14.0 * sigma;
    let h = sigma / 32.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let f = |z: f64| normal_pdf(z, sigma) * (exponent * log_density_ratio(z, q, sigma)).exp_m1();
    let mut sum = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        sum += f(lo + i as f64 * h);
    }
    (sum * h).ln_1p()
}

/// Worst-case log-moment over both neighbour orderings.
pub fn exact_log_moment(q: f64, sigma: f64, alpha: f64) -> f64 {
    log_moment(q, sigma, alpha, Direction::MixtureOverBase)
        .max(log_moment(q, sigma, alpha, Direction::BaseOverMixture))
}

/// `exact_log_moment / (α·γ(α))`, with `γ` from the closed form.
pub fn closed_form_ratio(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    let cost = rdp_cost_subsampled_gaussian(q, sigma, alpha)?;
    Ok(exact_log_moment(q, sigma, alpha) / (alpha * cost.gamma))
}

/// Small-`q` limit of [`closed_form_ratio`]: `(e^{4/σ²} − 1)·σ²/4`.
///
/// The closed form keeps only `4/σ²` of `e^{4/σ²} − 1`.
pub fn small_q_limit(sigma: f64) -> f64 {
    let x = 4.0 / (sigma * sigma);
    x.exp_m1() / x
}
