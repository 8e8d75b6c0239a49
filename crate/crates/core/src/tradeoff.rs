//! Utility and transmission-rate bounds, heterogeneous noise aggregation,
//! validity caps and the ε–T sweep engine.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountants::{calibrate, CalibrationRequest, Method, DEFAULT_DELTA_TILDE};
use crate::error::{Error, Result};
use crate::privacy_core::{PrivacyBudget, ValidityReport};

/// One user's heterogeneous parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub dataset_size: u64,
    pub q: f64,
    pub sigma: f64,
    pub budget: PrivacyBudget,
}

impl UserSpec {
    pub fn new(dataset_size: u64, q: f64, sigma: f64, budget: PrivacyBudget) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::InvalidParameter {
                name: "dataset_size",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter {
                name: "q",
                value: q,
                reason: "must lie in (0, 1)",
            });
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                value: sigma,
                reason: "must be positive",
            });
        }
        Ok(Self {
            dataset_size,
            q,
            sigma,
            budget,
        })
    }
}

/// Regularity of the loss and the gradient-processing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRegularity {
    /// Smoothness constant.
    pub mu: f64,
    /// Strong-convexity constant.
    pub lambda: f64,
    /// `G`, the bound on gradient norms.
    pub grad_bound: f64,
    pub clip: f64,
    pub dim: u64,
}

impl LossRegularity {
    pub fn new(mu: f64, lambda: f64, grad_bound: f64, clip: f64, dim: u64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be positive",
            });
        }
        if !(mu >= lambda) {
            return Err(Error::InvalidParameter {
                name: "mu",
                value: mu,
                reason: "must be at least lambda",
            });
        }
        if !(clip > 0.0) {
            return Err(Error::InvalidParameter {
                name: "clip",
                value: clip,
                reason: "must be positive",
            });
        }
        if !(grad_bound >= clip) {
            return Err(Error::InvalidParameter {
                name: "grad_bound",
                value: grad_bound,
                reason: "must be at least the clipping threshold",
            });
        }
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(Self {
            mu,
            lambda,
            grad_bound,
            clip,
            dim,
        })
    }

    /// `d = 10⁴, μ = λ = C = 1, G = 5`.
    pub fn reference() -> Self {
        Self {
            mu: 1.0,
            lambda: 1.0,
            grad_bound: 5.0,
            clip: 1.0,
            dim: 10_000,
        }
    }
}

/// `σ² = Σ(|D_k| q_k σ_k)² / (Σ |D_k| q_k)²`.
pub fn aggregate_sigma(users: &[UserSpec]) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Empty("user list"));
    }
    Ok(aggregate_noise(users.iter().map(|u| (u.dataset_size as f64, u.q, u.sigma))))
}

/// The aggregation formula over `(|D_k|, q_k, σ_k)` triples.
pub fn aggregate_noise(users: impl IntoIterator<Item = (f64, f64, f64)>) -> f64 {
    let (num, den) = users.into_iter().fold((0.0, 0.0), |(num, den), (size, q, sigma)| {
        let w = size * q;
        (num + (w * sigma).powi(2), den + w)
    });
    num / (den * den)
}

/// `K` identical users with noise multiplier `sigma`; equals `σ²/K`.
pub fn homogeneous_aggregate(users: usize, q: f64, sigma: f64) -> f64 {
    let w = q;
    let k = users as f64;
    k * (w * sigma).powi(2) / (k * w).powi(2)
}

/// Utility lower bound `λ²T/(μG²) · min{1/2, 1/(1 + dσ²)}`.
pub fn utility_lower_bound(rounds: u64, reg: &LossRegularity, sigma_agg_sq: f64) -> f64 {
    let scale = reg.lambda * reg.lambda * rounds as f64 / (reg.mu * reg.grad_bound * reg.grad_bound);
    scale * f64::min(0.5, 1.0 / (1.0 + reg.dim as f64 * sigma_agg_sq))
}

/// Rate upper bound `d·log₂(2πe·C²·σ_k/√d)` in bits per gradient vector.
/// Negative values are returned as-is.
pub fn rate_upper_bound(reg: &LossRegularity, sigma_k: f64) -> f64 {
    let d = reg.dim as f64;
    let arg = 2.0 * std::f64::consts::PI * std::f64::consts::E * reg.clip * reg.clip * sigma_k / d.sqrt();
    d * arg.log2()
}

/// Limits implied by the validity region `q < 1/(16σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityCaps {
    /// `1/(16q)²`
    pub sigma_sq_cap: f64,
    pub utility_cap: f64,
    pub rate_cap: f64,
}

pub fn validity_caps(q: f64, rounds: u64, reg: &LossRegularity, users: usize) -> ValidityCaps {
    let sigma_cap = 1.0 / (16.0 * q);
    let sigma_sq_cap = sigma_cap * sigma_cap;
    ValidityCaps {
        sigma_sq_cap,
        utility_cap: utility_lower_bound(rounds, reg, sigma_sq_cap / users as f64),
        rate_cap: rate_upper_bound(reg, sigma_cap),
    }
}

/// One row of a sweep. Calibration failures keep the row with `error` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: Method,
    pub rounds: u64,
    pub epsilon: f64,
    pub sigma_k_sq: Option<f64>,
    pub sigma_agg_sq: Option<f64>,
    pub utility_lb: Option<f64>,
    pub rate_ub: Option<f64>,
    pub validity: Option<ValidityReport>,
    pub error: Option<String>,
}

impl TradeoffPoint {
    pub fn is_valid(&self) -> bool {
        self.validity.is_some_and(|v| v.overall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub q: f64,
    pub rounds: Vec<u64>,
    /// Number of homogeneous users.
    pub users: usize,
    pub regularity: LossRegularity,
    pub delta_tilde: f64,
}

impl SweepConfig {
    /// Four methods, ε ∈ {0.10, 0.15, …, 1.00}, δ = 10⁻⁴, q = 10⁻³,
    /// T ∈ {7·10⁴, 7·10⁵}, K = 100 and [`LossRegularity::reference`].
    pub fn reference() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            epsilons: epsilon_grid(0.1, 1.0, 0.05),
            delta: 1e-4,
            q: 1e-3,
            rounds: vec![70_000, 700_000],
            users: 100,
            regularity: LossRegularity::reference(),
            delta_tilde: DEFAULT_DELTA_TILDE,
        }
    }
}

/// Inclusive arithmetic grid whose points are the doubles nearest to the
/// decimal values `start + i·step`.
pub fn epsilon_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return Vec::new();
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let x = start + i as f64 * step;
            format!("{x:.12e}").parse::<f64>().unwrap_or(x)
        })
        .collect()
}

/// Calibrates, aggregates over the homogeneous users and evaluates both bounds.
pub fn evaluate_point(cfg: &SweepConfig, method: Method, rounds: u64, epsilon: f64) -> TradeoffPoint {
    let mut point = TradeoffPoint {
        method,
        rounds,
        epsilon,
        sigma_k_sq: None,
        sigma_agg_sq: None,
        utility_lb: None,
        rate_ub: None,
        validity: None,
        error: None,
    };
    let calibrated = PrivacyBudget::new(epsilon, cfg.delta)
        .and_then(|b| CalibrationRequest::new(method, b, cfg.q, rounds))
        .map(|r| r.with_delta_tilde(cfg.delta_tilde))
        .and_then(|r| calibrate(&r));
    match calibrated {
        Ok(res) => {
            let sigma_agg_sq = homogeneous_aggregate(cfg.users, cfg.q, res.sigma());
            point.sigma_k_sq = Some(res.sigma_sq);
            point.sigma_agg_sq = Some(sigma_agg_sq);
            point.utility_lb = Some(utility_lower_bound(rounds, &cfg.regularity, sigma_agg_sq));
            point.rate_ub = Some(rate_upper_bound(&cfg.regularity, res.sigma()));
            point.validity = Some(res.validity);
        }
        Err(e) => point.error = Some(e.kind().to_string()),
    }
    point
}

/// Evaluates every `(method, T, ε)` combination, in that nesting order.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<TradeoffPoint>> {
    if cfg.methods.is_empty() {
        return Err(Error::Empty("method list"));
    }
    if cfg.epsilons.is_empty() {
        return Err(Error::Empty("epsilon grid"));
    }
    if cfg.rounds.is_empty() {
        return Err(Error::Empty("rounds list"));
    }
    if cfg.users == 0 {
        return Err(Error::Empty("user count"));
    }
    let jobs: Vec<(Method, u64, f64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            cfg.rounds
                .iter()
                .flat_map(move |&t| cfg.epsilons.iter().map(move |&e| (m, t, e)))
        })
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(m, t, e)| evaluate_point(cfg, m, t, e))
        .collect())
}

/// Published point values at ε = 0.3, T = 7·10⁴. They cannot be regenerated
/// from the closed forms and are carried as annotations only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub method: Method,
    pub utility: f64,
    pub rate_bits: f64,
}

pub const REFERENCE_EPSILON: f64 = 0.3;
pub const REFERENCE_ROUNDS: u64 = 70_000;
pub const REFERENCE_VALUES: [ReferenceValue; 4] = [
    ReferenceValue {
        method: Method::Proposed,
        utility: 25.83,
        rate_bits: 5.81e3,
    },
    ReferenceValue {
        method: Method::Ma,
        utility: 10.79,
        rate_bits: 6.44e3,
    },
    ReferenceValue {
        method: Method::Ac1,
        utility: 0.22,
        rate_bits: 9.26e3,
    },
    ReferenceValue {
        method: Method::Ac2,
        utility: 1.40,
        rate_bits: 7.91e3,
    },
];
/// Published caps: σ² cap, utility caps at T = 7·10⁴ and 7·10⁵, rate cap.
pub const REFERENCE_CAPS: (f64, [f64; 2], f64) = (3906.25, [0.0072, 0.0717], 9.69e3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub method: Method,
    pub published_utility: f64,
    pub computed_utility: Option<f64>,
    pub published_rate_bits: f64,
    pub computed_rate_bits: Option<f64>,
}

/// Pairs the published ε = 0.3 values with the matching sweep rows.
pub fn reference_comparison(rows: &[TradeoffPoint]) -> Vec<ReferenceComparison> {
    REFERENCE_VALUES
        .iter()
        .map(|r| {
            let row = rows.iter().find(|p| {
                p.method == r.method
                    && p.rounds == REFERENCE_ROUNDS
                    && (p.epsilon - REFERENCE_EPSILON).abs() < 1e-12
            });
            ReferenceComparison {
                method: r.method,
                published_utility: r.utility,
                computed_utility: row.and_then(|p| p.utility_lb),
                published_rate_bits: r.rate_bits,
                computed_rate_bits: row.and_then(|p| p.rate_ub),
            }
        })
        .collect()
}

/// True when the computed values rank the methods the same way the published
/// ones do, for both utility and rate.
pub fn reference_ordering_matches(cmp: &[ReferenceComparison]) -> bool {
    let same_order = |published: &dyn Fn(&ReferenceComparison) -> f64,
                      computed: &dyn Fn(&ReferenceComparison) -> Option<f64>| {
        cmp.iter().all(|a| {
            cmp.iter().all(|b| {
                match (computed(a), computed(b)) {
                    (Some(ca), Some(cb)) => (published(a) < published(b)) == (ca < cb),
                    _ => false,
                }
            })
        })
    };
    same_order(&|c| c.published_utility, &|c| c.computed_utility)
        && same_order(&|c| c.published_rate_bits, &|c| c.computed_rate_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(1.0, 1e-5).unwrap()
    }

    #[test]
    fn homogeneous_users_divide_by_k() {
        let users: Vec<_> = (0..100).map(|_| UserSpec::new(500, 1e-3, 7.0, budget()).unwrap()).collect();
        assert_relative_eq!(aggregate_sigma(&users).unwrap(), 49.0 / 100.0, max_relative = 1e-12);
        assert_relative_eq!(homogeneous_aggregate(100, 1e-3, 7.0), 0.49, max_relative = 1e-12);
    }

    #[test]
    fn single_user_aggregate() {
        let u = UserSpec::new(10, 0.2, 3.0, budget()).unwrap();
        assert_relative_eq!(aggregate_sigma(&[u]).unwrap(), 9.0, max_relative = 1e-14);
        assert!(matches!(aggregate_sigma(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn utility_reference_caps() {
        let reg = LossRegularity::reference();
        assert_relative_eq!(utility_lower_bound(70_000, &reg, 39.0625), 2800.0 / 390_626.0, max_relative = 1e-14);
        assert_relative_eq!(utility_lower_bound(700_000, &reg, 39.0625), 28_000.0 / 390_626.0, max_relative = 1e-14);
        assert_relative_eq!(utility_lower_bound(70_000, &reg, 0.0), 70_000.0 / 50.0, max_relative = 1e-14);
    }

    #[test]
    fn rate_examples() {
        let unit = LossRegularity::new(1.0, 1.0, 1.0, 1.0, 1).unwrap();
        let sigma = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
        assert!(rate_upper_bound(&unit, sigma).abs() < 1e-12);
        assert!(rate_upper_bound(&unit, sigma / 2.0) < 0.0);
        let reg = LossRegularity::reference();
        assert_relative_eq!(rate_upper_bound(&reg, 62.5), 34_161.192_652_486_45, max_relative = 1e-12);
    }

    #[test]
    fn caps_for_reference_q() {
        let caps = validity_caps(1e-3, 70_000, &LossRegularity::reference(), 100);
        assert_eq!(caps.sigma_sq_cap, 3906.25);
        assert_relative_eq!(caps.utility_cap, 0.0072, max_relative = 0.01);
        let far = validity_caps(1e-12, 70_000, &LossRegularity::reference(), 100);
        assert!(far.sigma_sq_cap > 1e20);
    }

    #[test]
    fn regularity_validation() {
        assert!(LossRegularity::new(0.5, 1.0, 5.0, 1.0, 10).is_err());
        assert!(LossRegularity::new(1.0, 1.0, 0.5, 1.0, 10).is_err());
        assert!(LossRegularity::new(1.0, 1.0, 5.0, 1.0, 0).is_err());
    }

    #[test]
    fn reference_sweep_shape() {
        let cfg = SweepConfig::reference();
        assert_eq!(cfg.epsilons.len(), 19);
        assert_eq!(cfg.epsilons[1], 0.15);
        assert_eq!(*cfg.epsilons.last().unwrap(), 1.0);
        let rows = sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 152);
        // (method, T, ε) nesting
        assert_eq!(rows[0].method, Method::Proposed);
        assert_eq!(rows[18].rounds, 70_000);
        assert_eq!(rows[19].rounds, 700_000);
        assert_eq!(rows[38].method, Method::Ma);
    }

    #[test]
    fn sweep_records_errors_in_rows() {
        let mut cfg = SweepConfig::reference();
        cfg.delta = 1e-6; // below δ̃ for AC1
        cfg.epsilons = vec![1e-5, 0.5];
        let rows = sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 16);
        let ac1: Vec<_> = rows.iter().filter(|r| r.method == Method::Ac1).collect();
        assert!(ac1.iter().all(|r| r.error.as_deref() == Some("infeasible_budget")));
        let tiny = rows.iter().find(|r| r.method == Method::Proposed && r.epsilon == 1e-5).unwrap();
        assert_eq!(tiny.error.as_deref(), Some("non_positive_bound"));
        assert!(tiny.utility_lb.is_none());
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        let mut cfg = SweepConfig::reference();
        cfg.epsilons.clear();
        assert!(sweep(&cfg).is_err());
    }

    #[test]
    fn rows_recompute_from_stored_inputs() {
        let cfg = SweepConfig::reference();
        for row in sweep(&cfg).unwrap() {
            let s = row.sigma_k_sq.unwrap();
            let agg = row.sigma_agg_sq.unwrap();
            assert_eq!(row.utility_lb.unwrap(), utility_lower_bound(row.rounds, &cfg.regularity, agg));
            assert_eq!(row.rate_ub.unwrap(), rate_upper_bound(&cfg.regularity, s.sqrt()));
        }
    }

    #[test]
    fn reference_ordering_reproduced() {
        let rows = sweep(&SweepConfig::reference()).unwrap();
        let cmp = reference_comparison(&rows);
        assert!(cmp.iter().all(|c| c.computed_utility.is_some()));
        assert!(reference_ordering_matches(&cmp));
    }

    proptest! {
        #[test]
        fn aggregate_invariant_to_common_scaling(
            sizes in proptest::collection::vec(1u64..1000, 1..8),
            scale in 1u64..50,
        ) {
            let users: Vec<_> = sizes.iter().enumerate()
                .map(|(i, &s)| UserSpec::new(s, 0.01 + 0.01 * i as f64, 1.0 + i as f64, budget()).unwrap())
                .collect();
            let scaled: Vec<_> = users.iter().map(|u| UserSpec { dataset_size: u.dataset_size * scale, ..*u }).collect();
            let a = aggregate_sigma(&users).unwrap();
            let b = aggregate_sigma(&scaled).unwrap();
            prop_assert!((a / b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn homogeneous_matches_general(k in 1usize..300, q in 1e-4f64..0.5, sigma in 0.1f64..100.0) {
            let users: Vec<_> = (0..k).map(|_| UserSpec::new(37, q, sigma, budget()).unwrap()).collect();
            let general = aggregate_sigma(&users).unwrap();
            prop_assert!((general / (sigma * sigma / k as f64) - 1.0).abs() < 1e-12);
            prop_assert!((homogeneous_aggregate(k, q, sigma) / general - 1.0).abs() < 1e-12);
        }

        #[test]
        fn utility_monotonicity(s in 0.0f64..100.0, t in 1u64..1_000_000) {
            let reg = LossRegularity::reference();
            prop_assert!(utility_lower_bound(t, &reg, s * 1.1 + 1e-6) <= utility_lower_bound(t, &reg, s));
            prop_assert!(utility_lower_bound(t + 1, &reg, s) > utility_lower_bound(t, &reg, s));
        }

        #[test]
        fn utility_saturates_iff_noise_small(s in 0.0f64..2e-4) {
            let reg = LossRegularity::reference();
            let noiseless = reg.lambda.powi(2) * 1000.0 / (2.0 * reg.mu * reg.grad_bound.powi(2));
            let saturated = utility_lower_bound(1000, &reg, s) == noiseless;
            prop_assert_eq!(saturated, reg.dim as f64 * s <= 1.0);
        }

        #[test]
        fn rate_increasing_in_sigma(s in 1e-3f64..1e3) {
            let reg = LossRegularity::reference();
            prop_assert!(rate_upper_bound(&reg, s * 1.01) > rate_upper_bound(&reg, s));
        }
    }
}
