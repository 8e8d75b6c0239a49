//! Rényi-DP primitives for the Poisson-subsampled Gaussian mechanism.
//!
//! Neighbouring datasets differ in one record. After clipping to norm `C` the
//! query sensitivity is `2C`, and the noise standard deviation per dimension is
//! `C·σ`, so everything here is expressed through the noise multiplier `σ` alone.
//! All logarithms are natural.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Target `(ε, δ)` for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                value: epsilon,
                reason: "must be positive and finite",
            });
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }

    /// `ln(1/δ)`.
    pub fn log_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }
}

/// Parameters of one user's subsampled Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Per-record Poisson sampling probability.
    pub q: f64,
    /// Noise multiplier; per-dimension noise std is `clip * sigma`.
    pub sigma: f64,
    pub clip: f64,
    pub rounds: u64,
}

impl MechanismParams {
    pub fn new(q: f64, sigma: f64, clip: f64, rounds: u64) -> Result<Self> {
        check_probability("q", q)?;
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter {
                name: "sigma",
                value: sigma,
                reason: "must be positive and finite",
            });
        }
        if !(clip > 0.0) || !clip.is_finite() {
            return Err(Error::InvalidParameter {
                name: "clip",
                value: clip,
                reason: "must be positive and finite",
            });
        }
        if rounds == 0 {
            return Err(Error::InvalidParameter {
                name: "rounds",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(Self {
            q,
            sigma,
            clip,
            rounds,
        })
    }
}

/// An `(α, γ)`-RDP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpCost {
    pub alpha: f64,
    pub gamma: f64,
}

impl RdpCost {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !is_valid_rdp_order(alpha) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                reason: "Rényi order must exceed 1",
            });
        }
        if !(gamma >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                value: gamma,
                reason: "RDP cost must be nonnegative",
            });
        }
        Ok(Self { alpha, gamma })
    }
}

/// Outcome of the three validity conditions attached to every calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// `q < 1/(16σ)`
    pub q_ok: bool,
    /// `σ ≥ 1`
    pub sigma_ok: bool,
    /// `ε > 2 ln(1/δ) · max(δ, 1/(σ² ln(1/(qσ))))`
    pub epsilon_ok: bool,
    pub overall: bool,
}

impl ValidityReport {
    pub fn new(q_ok: bool, sigma_ok: bool, epsilon_ok: bool) -> Self {
        Self {
            q_ok,
            sigma_ok,
            epsilon_ok,
            overall: q_ok && sigma_ok && epsilon_ok,
        }
    }
}

pub fn is_valid_rdp_order(alpha: f64) -> bool {
    alpha > 1.0 && alpha.is_finite()
}

fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value: p,
            reason: "must lie in (0, 1)",
        })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    check_probability("delta", delta)
}

/// Leading-order RDP cost of one round: `γ(α) = 2q²(α+1) / ((1−q)σ²)`.
///
/// Only defined inside the region `q < 1/(16σ)`, `σ ≥ 1`; the dropped
/// remainder is `O(q³α²/σ³)`.
pub fn rdp_cost_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<RdpCost> {
    if !(sigma >= 1.0) || !(q > 0.0) || !(q < 1.0 / (16.0 * sigma)) {
        return Err(Error::OutsideValidityRegion { q, sigma });
    }
    if !is_valid_rdp_order(alpha) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "Rényi order must exceed 1",
        });
    }
    let gamma = 2.0 * q * q * (alpha + 1.0) / ((1.0 - q) * sigma * sigma);
    Ok(RdpCost { alpha, gamma })
}

/// Linear composition over `rounds` releases.
pub fn compose_rdp(cost: RdpCost, rounds: u64) -> RdpCost {
    RdpCost {
        alpha: cost.alpha,
        gamma: rounds as f64 * cost.gamma,
    }
}

/// Classic RDP → DP conversion `ε = γ + ln(1/δ)/(α−1)`.
pub fn rdp_to_dp(cost: RdpCost, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(cost.gamma - delta.ln() / (cost.alpha - 1.0))
}

/// `α = 2 ln(1/δ) / ε`. May return a value ≤ 1; check with [`is_valid_rdp_order`].
pub fn optimal_alpha(budget: &PrivacyBudget) -> f64 {
    2.0 * budget.log_inv_delta() / budget.epsilon
}

/// Right-hand side of the ε condition, `2 ln(1/δ)·max(δ, 1/(σ² ln(1/(qσ))))`.
///
/// Returns `+∞` when `qσ ≥ 1`, where the logarithm is non-positive and the
/// condition cannot be met.
pub fn epsilon_condition_rhs(q: f64, sigma: f64, delta: f64) -> f64 {
    let log_term = -(q * sigma).ln();
    if !(log_term > 0.0) {
        return f64::INFINITY;
    }
    let inner = delta.max(1.0 / (sigma * sigma * log_term));
    -2.0 * delta.ln() * inner
}

/// Evaluates each validity condition independently on an already-known σ.
pub fn check_validity(params: &MechanismParams, budget: &PrivacyBudget) -> ValidityReport {
    validity_of(params.q, params.sigma, budget)
}

pub(crate) fn validity_of(q: f64, sigma: f64, budget: &PrivacyBudget) -> ValidityReport {
    let q_ok = q < 1.0 / (16.0 * sigma);
    let sigma_ok = sigma >= 1.0;
    let epsilon_ok = budget.epsilon > epsilon_condition_rhs(q, sigma, budget.delta);
    ValidityReport::new(q_ok, sigma_ok, epsilon_ok)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact δ achieved by a single Gaussian release at privacy level ε:
/// `Φ(Δ/2s − εs/Δ) − e^ε Φ(−Δ/2s − εs/Δ)`.
pub fn gaussian_delta_at(sensitivity: f64, sigma_abs: f64, epsilon: f64) -> f64 {
    if sensitivity == 0.0 {
        return 0.0;
    }
    let a = sensitivity / (2.0 * sigma_abs);
    let b = epsilon * sigma_abs / sensitivity;
    let tail = std_normal_cdf(-a - b);
    let second = if tail > 0.0 {
        (epsilon + tail.ln()).exp()
    } else {
        0.0
    };
    (std_normal_cdf(a - b) - second).max(0.0)
}

/// Smallest ε for which one Gaussian release with the given L2 sensitivity
/// and absolute noise std is `(ε, δ)`-DP, found by bisection on the exact
/// tail characterisation.
pub fn gaussian_dp_single_round(sensitivity: f64, sigma_abs: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(sensitivity >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "sensitivity",
            value: sensitivity,
            reason: "must be nonnegative",
        });
    }
    if !(sigma_abs > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma_abs",
            value: sigma_abs,
            reason: "must be positive",
        });
    }
    if gaussian_delta_at(sensitivity, sigma_abs, 0.0) <= delta {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while gaussian_delta_at(sensitivity, sigma_abs, hi) > delta {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::SolverFailure(format!(
                "no epsilon below {hi} reaches delta = {delta}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gaussian_delta_at(sensitivity, sigma_abs, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn gamma_reference_values() {
        // 2e-6 * 3 / 0.999 and 2e-4 * 4 / (0.99 * 16)
        let c = rdp_cost_subsampled_gaussian(1e-3, 1.0, 2.0).unwrap();
        assert_relative_eq!(c.gamma, 6.006006006006006e-6, max_relative = 1e-14);
        let c = rdp_cost_subsampled_gaussian(1e-2, 4.0, 3.0).unwrap();
        assert_relative_eq!(c.gamma, 5.050505050505051e-5, max_relative = 1e-14);
    }

    #[test]
    fn gamma_vanishes_with_q() {
        let c = rdp_cost_subsampled_gaussian(1e-12, 1.0, 50.0).unwrap();
        assert!(c.gamma < 1e-20);
    }

    #[test]
    fn gamma_rejects_outside_region() {
        assert!(matches!(
            rdp_cost_subsampled_gaussian(1e-3, 0.5, 2.0),
            Err(Error::OutsideValidityRegion { .. })
        ));
        // q = 1/(16σ) exactly is outside
        assert!(rdp_cost_subsampled_gaussian(1.0 / 64.0, 4.0, 2.0).is_err());
        assert!(rdp_cost_subsampled_gaussian(1e-3, 2.0, 1.0).is_err());
    }

    #[test]
    fn composition_examples() {
        let c = RdpCost::new(2.0, 1e-6).unwrap();
        assert_eq!(compose_rdp(c, 1), c);
        let c7 = compose_rdp(c, 70_000);
        assert_eq!(c7.alpha, 2.0);
        assert_relative_eq!(c7.gamma, 0.07, max_relative = 1e-12);
    }

    #[test]
    fn conversion_examples() {
        let zero = RdpCost::new(2.0, 0.0).unwrap();
        assert_relative_eq!(rdp_to_dp(zero, (-1.0f64).exp()).unwrap(), 1.0, epsilon = 1e-15);
        let c = RdpCost::new(11.0, 0.5).unwrap();
        assert_relative_eq!(rdp_to_dp(c, 1e-4).unwrap(), 1.4210340371976183, max_relative = 1e-14);
        assert!(rdp_to_dp(c, 0.0).is_err());
        assert!(rdp_to_dp(c, 1.0).is_err());
    }

    #[test]
    fn optimal_alpha_examples() {
        let b = PrivacyBudget::new(0.3, 1e-4).unwrap();
        assert_relative_eq!(optimal_alpha(&b), 61.40226914650788, max_relative = 1e-13);

        let b = PrivacyBudget::new(1.0, (-1.0f64).exp()).unwrap();
        assert_relative_eq!(optimal_alpha(&b), 2.0, max_relative = 1e-15);

        let delta = 1e-4;
        let b = PrivacyBudget::new(-2.0 * f64::ln(delta), delta).unwrap();
        let a = optimal_alpha(&b);
        assert_relative_eq!(a, 1.0, max_relative = 1e-15);
        assert!(!is_valid_rdp_order(a));
    }

    #[test]
    fn validity_q_boundary_is_strict() {
        let budget = PrivacyBudget::new(0.3, 1e-4).unwrap();
        // σ² = 1/(16q)² = 3906.25 sits exactly on the boundary
        let p = MechanismParams::new(1e-3, 62.5, 1.0, 1).unwrap();
        assert_eq!(62.5f64 * 62.5, 3906.25);
        assert!(!check_validity(&p, &budget).q_ok);
        let p = MechanismParams::new(1e-3, 62.4, 1.0, 1).unwrap();
        assert!(check_validity(&p, &budget).q_ok);
    }

    #[test]
    fn validity_sigma_below_one() {
        let budget = PrivacyBudget::new(0.3, 1e-4).unwrap();
        let p = MechanismParams::new(1e-3, 0.5, 1.0, 1).unwrap();
        let r = check_validity(&p, &budget);
        assert!(!r.sigma_ok);
        assert!(!r.overall);
    }

    #[test]
    fn validity_epsilon_condition_direct() {
        // 2 ln(1e4) · max(1e-4, 1/ln(1000)) = 2.6666...
        let rhs = epsilon_condition_rhs(1e-3, 1.0, 1e-4);
        assert_relative_eq!(rhs, 2.6666666666666665, max_relative = 1e-13);
        let p = MechanismParams::new(1e-3, 1.0, 1.0, 1).unwrap();
        let r = check_validity(&p, &PrivacyBudget::new(0.3, 1e-4).unwrap());
        assert!(r.q_ok && r.sigma_ok);
        assert!(!r.epsilon_ok);
        let r = check_validity(&p, &PrivacyBudget::new(3.0, 1e-4).unwrap());
        assert!(r.epsilon_ok && r.overall);
    }

    #[test]
    fn epsilon_condition_infinite_when_q_sigma_large() {
        assert_eq!(epsilon_condition_rhs(0.5, 2.0, 1e-4), f64::INFINITY);
    }

    #[test]
    fn single_round_gaussian() {
        assert_eq!(gaussian_dp_single_round(0.0, 1.0, 1e-5).unwrap(), 0.0);
        // bisection on the exact trade-off curve in 40-digit arithmetic
        let eps = gaussian_dp_single_round(2.0, 2.0, 1e-4).unwrap();
        assert_relative_eq!(eps, 3.804435909337386, max_relative = 1e-9);
        let eps = gaussian_dp_single_round(1.0, 1.0, 1e-5).unwrap();
        assert_relative_eq!(eps, 4.377178095681225, max_relative = 1e-9);
        let achieved = gaussian_delta_at(1.0, 1.0, eps);
        assert!(achieved <= 1e-5 && achieved > 0.999e-5);
    }

    #[test]
    fn budget_and_params_validation() {
        assert!(PrivacyBudget::new(0.0, 1e-4).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(MechanismParams::new(1.0, 1.0, 1.0, 1).is_err());
        assert!(MechanismParams::new(0.1, 0.0, 1.0, 1).is_err());
        assert!(MechanismParams::new(0.1, 1.0, 0.0, 1).is_err());
        assert!(MechanismParams::new(0.1, 1.0, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn gamma_monotone(sigma in 1.0f64..8.0, qf in 0.01f64..0.9, alpha in 1.01f64..200.0) {
            let q = qf / (16.0 * sigma);
            let g = rdp_cost_subsampled_gaussian(q, sigma, alpha).unwrap().gamma;
            let g_alpha = rdp_cost_subsampled_gaussian(q, sigma, alpha * 1.1).unwrap().gamma;
            let g_q = rdp_cost_subsampled_gaussian(q * 1.05, sigma, alpha).unwrap().gamma;
            let g_sigma = rdp_cost_subsampled_gaussian(q, sigma * 1.05, alpha).unwrap().gamma;
            prop_assert!(g_alpha > g);
            prop_assert!(g_q > g);
            prop_assert!(g_sigma < g);
        }

        #[test]
        fn composition_additive(gamma in 0.0f64..1.0, a in 0u64..1_000_000, b in 0u64..1_000_000) {
            // exact when γ is a dyadic rational; use a power-of-two scaled cost
            let g = (gamma * 1024.0).floor() / 1024.0;
            let c = RdpCost::new(3.0, g).unwrap();
            prop_assert_eq!(compose_rdp(c, a + b).gamma, compose_rdp(c, a).gamma + compose_rdp(c, b).gamma);
        }

        #[test]
        fn conversion_monotone(alpha in 1.5f64..100.0, gamma in 0.0f64..5.0, delta in 1e-10f64..0.5) {
            let c = RdpCost::new(alpha, gamma).unwrap();
            let e = rdp_to_dp(c, delta).unwrap();
            prop_assert!(rdp_to_dp(c, delta * 1.5).unwrap() < e);
            let c2 = RdpCost::new(alpha, gamma + 0.01).unwrap();
            prop_assert!(rdp_to_dp(c2, delta).unwrap() > e);
        }

        #[test]
        fn single_round_decreasing_in_noise(s in 0.3f64..5.0) {
            let e1 = gaussian_dp_single_round(1.0, s, 1e-5).unwrap();
            let e2 = gaussian_dp_single_round(1.0, s * 1.2, 1e-5).unwrap();
            prop_assert!(e2 < e1);
        }
    }
}
