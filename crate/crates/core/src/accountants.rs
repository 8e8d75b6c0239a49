//! Noise-variance calibration under four composition accountants.
//!
//! Every calibrator returns the smallest admissible `σ²` for a per-user target
//! `(ε, δ)` after `T` rounds, with Poisson sampling probability `q` and query
//! sensitivity `2C`. Remainder terms of the asymptotic bounds are dropped.
//! Results are never clamped: out-of-region values come back with failing
//! validity flags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy_core::{
    compose_rdp, rdp_cost_subsampled_gaussian, rdp_to_dp, validity_of, MechanismParams,
    PrivacyBudget, ValidityReport,
};

pub const DEFAULT_DELTA_TILDE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Tight RDP→DP conversion with the subsampled cost.
    Proposed,
    /// Moments accountant.
    Ma,
    /// Advanced composition.
    Ac1,
    /// Improved advanced composition.
    Ac2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Ma, Method::Ac1, Method::Ac2];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ma => "ma",
            Method::Ac1 => "ac1",
            Method::Ac2 => "ac2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(Method::Proposed),
            "ma" => Ok(Method::Ma),
            "ac1" => Ok(Method::Ac1),
            "ac2" => Ok(Method::Ac2),
            other => Err(format!(
                "unknown method `{other}` (expected proposed, ma, ac1 or ac2)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRequest {
    pub budget: PrivacyBudget,
    pub q: f64,
    pub rounds: u64,
    pub method: Method,
    /// Slack `δ̃` of advanced composition; only read by AC1.
    pub ac1_delta_tilde: f64,
}

impl CalibrationRequest {
    pub fn new(method: Method, budget: PrivacyBudget, q: f64, rounds: u64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter {
                name: "q",
                value: q,
                reason: "must lie in (0, 1)",
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
            budget,
            q,
            rounds,
            method,
            ac1_delta_tilde: DEFAULT_DELTA_TILDE,
        })
    }

    pub fn with_delta_tilde(mut self, delta_tilde: f64) -> Self {
        self.ac1_delta_tilde = delta_tilde;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    /// `4q²/(1−q)`: sensitivity `2C` squared times the sampling amplification.
    pub fn sampling_factor(&self) -> f64 {
        4.0 * self.q * self.q / (1.0 - self.q)
    }
}

/// Per-round `(ε₀, δ₀)` solved for AC1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerRoundBudget {
    pub epsilon0: f64,
    pub delta0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub sigma_sq: f64,
    pub validity: ValidityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_round: Option<PerRoundBudget>,
}

impl CalibrationResult {
    fn new(req: &CalibrationRequest, sigma_sq: f64, per_round: Option<PerRoundBudget>) -> Self {
        Self {
            method: req.method,
            sigma_sq,
            validity: validity_of(req.q, sigma_sq.sqrt(), &req.budget),
            per_round,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

/// Dispatches on `req.method`.
pub fn calibrate(req: &CalibrationRequest) -> Result<CalibrationResult> {
    match req.method {
        Method::Proposed => noise_proposed(req),
        Method::Ma => noise_ma(req),
        Method::Ac1 => noise_ac1(req),
        Method::Ac2 => noise_ac2(req),
    }
}

/// The bracket `2/ε²·ln(1/δ) + 1/ε − 2/ε²·(ln(2 ln(1/δ)) + 1 − ln ε)`.
pub fn proposed_bracket(budget: &PrivacyBudget) -> f64 {
    let eps = budget.epsilon;
    let log_inv_delta = budget.log_inv_delta();
    let w = 2.0 / (eps * eps);
    w * log_inv_delta + 1.0 / eps - w * ((2.0 * log_inv_delta).ln() + 1.0 - eps.ln())
}

pub fn noise_proposed(req: &CalibrationRequest) -> Result<CalibrationResult> {
    let bracket = proposed_bracket(&req.budget);
    let sigma_sq = req.sampling_factor() * req.rounds as f64 * bracket;
    if !(sigma_sq > 0.0) {
        return Err(Error::NonPositiveBound {
            method: "proposed",
            value: sigma_sq,
        });
    }
    Ok(CalibrationResult::new(req, sigma_sq, None))
}

pub fn noise_ma(req: &CalibrationRequest) -> Result<CalibrationResult> {
    let eps = req.budget.epsilon;
    let bracket = 2.0 / (eps * eps) * req.budget.log_inv_delta() + 1.0 / eps;
    let sigma_sq = req.sampling_factor() * req.rounds as f64 * bracket;
    Ok(CalibrationResult::new(req, sigma_sq, None))
}

pub fn noise_ac2(req: &CalibrationRequest) -> Result<CalibrationResult> {
    let eps = req.budget.epsilon;
    let log_term = (std::f64::consts::E + eps / req.budget.delta).ln();
    let sigma_sq = req.sampling_factor() * 8.0 * req.rounds as f64 * log_term / (eps * eps);
    Ok(CalibrationResult::new(req, sigma_sq, None))
}

/// Total `(ε, δ)` of `T` rounds that are each `(ε₀, δ₀)`-DP under advanced
/// composition with slack `δ̃`.
pub fn ac1_compose(per_round: PerRoundBudget, rounds: u64, delta_tilde: f64) -> (f64, f64) {
    let t = rounds as f64;
    let e0 = per_round.epsilon0;
    let eps = (2.0 * t * (1.0 / delta_tilde).ln()).sqrt() * e0 + t * e0 * e0.exp_m1();
    (eps, t * per_round.delta0 + delta_tilde)
}

/// Inverts [`ac1_compose`]: `δ₀ = (δ − δ̃)/T` and `ε₀` by bisection on `[0, ε]`.
pub fn ac1_per_round(budget: &PrivacyBudget, rounds: u64, delta_tilde: f64) -> Result<PerRoundBudget> {
    if !(delta_tilde > 0.0) || budget.delta <= delta_tilde {
        return Err(Error::InfeasibleBudget {
            delta: budget.delta,
            delta_tilde,
        });
    }
    let t = rounds as f64;
    let delta0 = (budget.delta - delta_tilde) / t;
    let slope = (2.0 * t * (1.0 / delta_tilde).ln()).sqrt();
    let excess = |x: f64| slope * x + t * x * x.exp_m1() - budget.epsilon;

    let (mut lo, mut hi) = (0.0, budget.epsilon);
    if !(excess(hi) >= 0.0) {
        return Err(Error::SolverFailure(format!(
            "AC1 composition map does not reach epsilon = {} on [0, epsilon]",
            budget.epsilon
        )));
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(PerRoundBudget {
        epsilon0: 0.5 * (lo + hi),
        delta0,
    })
}

/// Per-round Gaussian mechanism bound `4q²/(1−q) · 2 ln(4/(5δ₀)) / ε₀²`.
pub fn noise_ac1(req: &CalibrationRequest) -> Result<CalibrationResult> {
    let per_round = ac1_per_round(&req.budget, req.rounds, req.ac1_delta_tilde)?;
    let e0 = per_round.epsilon0;
    let sigma_sq = req.sampling_factor() * 2.0 / (e0 * e0) * (4.0 / (5.0 * per_round.delta0)).ln();
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(Error::NonPositiveBound {
            method: "ac1",
            value: sigma_sq,
        });
    }
    Ok(CalibrationResult::new(req, sigma_sq, Some(per_round)))
}

const ALPHA_GRID_POINTS: usize = 512;

/// Forward accountant: the ε reached by `params` at the given δ, minimised over
/// a logarithmic grid of orders in `(1, σ² ln(1/(qσ))]`.
pub fn epsilon_from_noise(params: &MechanismParams, delta: f64) -> Result<f64> {
    epsilon_after_rounds(params.q, params.sigma, params.rounds, delta)
}

/// As [`epsilon_from_noise`] but allows `rounds = 0` (no composition cost).
pub fn epsilon_after_rounds(q: f64, sigma: f64, rounds: u64, delta: f64) -> Result<f64> {
    let upper = sigma * sigma * (1.0 / (q * sigma)).ln();
    if !(upper > 1.0) {
        return Err(Error::Empty("alpha grid: upper order limit is not above 1"));
    }
    let span_max = upper - 1.0;
    let span_min = span_max * 1e-6;
    let ratio = (span_max / span_min).ln() / (ALPHA_GRID_POINTS - 1) as f64;
    let mut best = f64::INFINITY;
    for i in 0..ALPHA_GRID_POINTS {
        let alpha = if i + 1 == ALPHA_GRID_POINTS {
            upper
        } else {
            1.0 + span_min * (ratio * i as f64).exp()
        };
        let cost = compose_rdp(rdp_cost_subsampled_gaussian(q, sigma, alpha)?, rounds);
        best = best.min(rdp_to_dp(cost, delta)?);
    }
    Ok(best)
}
