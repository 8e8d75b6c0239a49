//! End-to-end checks shared by the `validate` command and the acceptance tests.
//!
//! Every check returns a [`CheckOutcome`]; none of them panic on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::accountants::{ac1_compose, calibrate, CalibrationRequest, CalibrationResult, Method};
use crate::error::Result;
use crate::fedsgd_sim::{
    aggregated_noise, explicit_bound_violations, local_gradient, make_quadratic_problem,
    pilot_grad_norm_max, recurrence_violations, run_simulation_on, PerUser, SimConfig, SimResult,
};
use crate::privacy_core::PrivacyBudget;
use crate::rdp_oracle::closed_form_ratio;
use crate::tradeoff::{
    homogeneous_aggregate, rate_upper_bound, reference_comparison, reference_ordering_matches, sweep,
    utility_lower_bound, validity_caps, SweepConfig, REFERENCE_CAPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

fn relative_error(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

/// σ² cap `1/(16q)²` at `q = 10⁻³` against 3906.25.
pub fn check_sigma_cap() -> CheckOutcome {
    let cfg = SweepConfig::reference();
    let cap = validity_caps(cfg.q, cfg.rounds[0], &cfg.regularity, cfg.users).sigma_sq_cap;
    let err = relative_error(cap, REFERENCE_CAPS.0);
    CheckOutcome::new("sigma_sq_cap", err <= 1e-9, format!("cap = {cap} (relative error {err:.2e})"))
}

/// Utility caps at both reference horizons, within 1% of 0.00717 and 0.0717.
pub fn check_utility_caps() -> CheckOutcome {
    let cfg = SweepConfig::reference();
    let mut passed = true;
    let mut parts = Vec::new();
    for (&t, want) in cfg.rounds.iter().zip([0.00717, 0.0717]) {
        let got = validity_caps(cfg.q, t, &cfg.regularity, cfg.users).utility_cap;
        let err = relative_error(got, want);
        passed &= err <= 0.01;
        parts.push(format!("T={t}: {got:.6} vs {want} ({:.3}%)", 100.0 * err));
    }
    CheckOutcome::new("utility_caps", passed, parts.join("; "))
}

/// Ordering `P ≤ MA ≤ AC2 ≤ AC1` of σ², with utility reversed and rate
/// matching, over the reference grid rows where every method is valid.
///
/// `calibrator` is injectable so that a mutated accountant can be checked.
pub fn accountant_ordering_with<F>(calibrator: F) -> CheckOutcome
where
    F: Fn(&CalibrationRequest) -> Result<CalibrationResult>,
{
    const ORDER: [Method; 4] = [Method::Proposed, Method::Ma, Method::Ac2, Method::Ac1];
    let cfg = SweepConfig::reference();
    let mut rows = 0;
    let mut violations = Vec::new();
    for &t in &cfg.rounds {
        for &eps in &cfg.epsilons {
            let budget = match PrivacyBudget::new(eps, cfg.delta) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let results: Option<Vec<CalibrationResult>> = ORDER
                .iter()
                .map(|&m| {
                    CalibrationRequest::new(m, budget, cfg.q, t)
                        .map(|r| r.with_delta_tilde(cfg.delta_tilde))
                        .and_then(|r| calibrator(&r))
                        .ok()
                        .filter(|c| c.validity.overall)
                })
                .collect();
            let Some(results) = results else { continue };
            rows += 1;
            for pair in results.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let ua = utility_lower_bound(t, &cfg.regularity, homogeneous_aggregate(cfg.users, cfg.q, a.sigma()));
                let ub = utility_lower_bound(t, &cfg.regularity, homogeneous_aggregate(cfg.users, cfg.q, b.sigma()));
                let ra = rate_upper_bound(&cfg.regularity, a.sigma());
                let rb = rate_upper_bound(&cfg.regularity, b.sigma());
                if !(a.sigma_sq <= b.sigma_sq && ua >= ub && ra <= rb) {
                    violations.push(format!("T={t} eps={eps}: {} vs {}", a.method, b.method));
                }
            }
        }
    }
    let passed = rows > 0 && violations.is_empty();
    let detail = if violations.is_empty() {
        format!("{rows} fully valid rows, no violations")
    } else {
        format!("{rows} rows, {} violations: {}", violations.len(), violations.join(", "))
    };
    CheckOutcome::new("accountant_ordering", passed, detail)
}

pub fn check_accountant_ordering() -> CheckOutcome {
    accountant_ordering_with(calibrate)
}

/// Recomposes every solved AC1 per-round budget on the ordering grid.
pub fn check_ac1_round_trip() -> CheckOutcome {
    let cfg = SweepConfig::reference();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for &t in &cfg.rounds {
        for &eps in &cfg.epsilons {
            let solved = PrivacyBudget::new(eps, cfg.delta)
                .and_then(|b| CalibrationRequest::new(Method::Ac1, b, cfg.q, t))
                .map(|r| r.with_delta_tilde(cfg.delta_tilde))
                .and_then(|r| calibrate(&r));
            match solved.ok().and_then(|r| r.per_round) {
                Some(pr) => {
                    let (e, d) = ac1_compose(pr, t, cfg.delta_tilde);
                    worst = worst.max(relative_error(e, eps)).max(relative_error(d, cfg.delta));
                }
                None => failures += 1,
            }
        }
    }
    CheckOutcome::new(
        "ac1_round_trip",
        failures == 0 && worst <= 1e-9,
        format!("max relative error {worst:.2e}, {failures} unsolved points"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpCell {
    pub q: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Exact divergence over the closed-form `α·γ`.
    pub ratio: f64,
}

pub const RDP_ORACLE_QS: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const RDP_ORACLE_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];
pub const RDP_ORACLE_ALPHAS: [f64; 7] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];

/// Quadrature-vs-closed-form ratios over the oracle grid (cells with
/// `q ≥ 1/(16σ)` are skipped).
pub fn rdp_oracle_table() -> Vec<RdpCell> {
    let mut cells = Vec::new();
    for sigma in RDP_ORACLE_SIGMAS {
        for alpha in RDP_ORACLE_ALPHAS {
            for q in RDP_ORACLE_QS {
                if let Ok(ratio) = closed_form_ratio(q, sigma, alpha) {
                    cells.push(RdpCell { q, sigma, alpha, ratio });
                }
            }
        }
    }
    cells
}

/// Within a factor of two at `q = 10⁻³`, and `|ratio − 1|` strictly
/// decreasing as `q` goes 10⁻² → 10⁻³ → 10⁻⁴.
pub fn check_rdp_oracle() -> CheckOutcome {
    let cells = rdp_oracle_table();
    let mut factor = Vec::new();
    let mut monotone = Vec::new();
    for sigma in RDP_ORACLE_SIGMAS {
        for alpha in RDP_ORACLE_ALPHAS {
            let row: Vec<&RdpCell> = cells.iter().filter(|c| c.sigma == sigma && c.alpha == alpha).collect();
            if let Some(c) = row.iter().find(|c| c.q == 1e-3) {
                if !(0.5..=2.0).contains(&c.ratio) {
                    factor.push(format!("sigma={sigma} alpha={alpha}: {:.4}", c.ratio));
                }
            }
            let gaps: Vec<f64> = row.iter().map(|c| (c.ratio - 1.0).abs()).collect();
            if gaps.windows(2).any(|w| w[1] >= w[0]) {
                let ratios: Vec<String> = row.iter().map(|c| format!("{:.4}", c.ratio)).collect();
                monotone.push(format!("sigma={sigma} alpha={alpha}: [{}]", ratios.join(", ")));
            }
        }
    }
    let passed = factor.is_empty() && monotone.is_empty();
    let mut detail = format!("{} cells", cells.len());
    if !factor.is_empty() {
        detail += &format!("; outside factor 2 at q=1e-3: {}", factor.join(", "));
    }
    if !monotone.is_empty() {
        detail += &format!("; not approaching 1 monotonically: {}", monotone.join(", "));
    }
    CheckOutcome::new("rdp_oracle", passed, detail)
}

/// K = 5, d = 10, |D_k| = 200, q = 0.1, C = 1, λ = μ = 1, T = 5000.
pub fn simulation_check_config(sigma: f64, grad_bound: f64, repetitions: usize) -> SimConfig {
    SimConfig {
        users: 5,
        dim: 10,
        per_user_data: PerUser::Uniform(200),
        q: PerUser::Uniform(0.1),
        sigma: PerUser::Uniform(sigma),
        clip: 1.0,
        rounds: 5000,
        lambda: 1.0,
        mu: 1.0,
        grad_bound,
        seed: 20_240_601,
        repetitions,
        data_radius: 1.0,
        init_distance: 2.0,
    }
}

/// Simulation results for each noise level, with `G` set to 1.5 times the
/// realized maximum gradient norm of a noiseless pilot.
pub struct SimulationStudy {
    pub grad_bound: f64,
    pub runs: Vec<(SimConfig, SimResult)>,
}

pub fn simulation_study(sigmas: &[f64], repetitions: usize) -> Result<SimulationStudy> {
    let base = simulation_check_config(0.0, 1.0, repetitions);
    let problem = make_quadratic_problem(&base, base.seed)?;
    let grad_bound = 1.5 * pilot_grad_norm_max(&problem, &base)?;
    let runs = sigmas
        .iter()
        .map(|&s| {
            let cfg = simulation_check_config(s, grad_bound, repetitions);
            run_simulation_on(&problem, &cfg).map(|r| (cfg, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationStudy { grad_bound, runs })
}

/// Utility bound met in at least 95% of repetitions and the explicit MSE
/// bound respected at every round (3 standard errors of slack).
pub fn check_simulation() -> CheckOutcome {
    let study = match simulation_study(&[0.0, 1.0], 100) {
        Ok(s) => s,
        Err(e) => return CheckOutcome::new("simulation_utility", false, e.to_string()),
    };
    let mut passed = true;
    let mut parts = vec![format!("G = {:.4}", study.grad_bound)];
    for (cfg, r) in &study.runs {
        let frac = r.fraction_meeting_bound();
        let explicit = explicit_bound_violations(r, cfg, 3.0).len();
        let recurrence = recurrence_violations(r, cfg, 3.0).len();
        passed &= frac >= 0.95 && explicit == 0;
        parts.push(format!(
            "sigma={}: {:.0}% of runs meet bound {:.4} (utility {:.4}), {explicit} explicit-bound and {recurrence} recurrence violations",
            cfg.sigma.get(0),
            100.0 * frac,
            r.utility_bound,
            r.empirical_utility,
        ));
    }
    CheckOutcome::new("simulation_utility", passed, parts.join("; "))
}

/// Worst relative error between the `|J_k|/|J|`-weighted user gradients and
/// the pooled-sample gradient over random unclipped instances.
pub fn weighted_gradient_identity_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let users = rng.random_range(1..=8);
        let dim = rng.random_range(1..=12);
        let curvature: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let samples: Vec<Vec<Vec<f64>>> = (0..users)
            .map(|_| {
                let n = rng.random_range(0..=25);
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let total: usize = samples.iter().map(Vec::len).sum();
        if total == 0 {
            continue;
        }
        let mut weighted = vec![0.0; dim];
        for s in samples.iter().filter(|s| !s.is_empty()) {
            let refs: Vec<&[f64]> = s.iter().map(Vec::as_slice).collect();
            let g = local_gradient(&curvature, &w, &refs);
            let wk = s.len() as f64 / total as f64;
            weighted.iter_mut().zip(&g).for_each(|(a, gi)| *a += wk * gi);
        }
        let pooled_refs: Vec<&[f64]> = samples.iter().flatten().map(Vec::as_slice).collect();
        let pooled = local_gradient(&curvature, &w, &pooled_refs);
        let diff: f64 = weighted.iter().zip(&pooled).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = pooled.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
    }
    worst
}

pub fn check_weighted_gradient_identity() -> CheckOutcome {
    let err = weighted_gradient_identity_error(100, 5);
    CheckOutcome::new(
        "weighted_gradient_identity",
        err <= 1e-10,
        format!("max relative error {err:.2e} over 100 instances"),
    )
}

/// Empirical per-coordinate variance of the aggregated noise over `draws`
/// rounds of `users` homogeneous users with binomial sample sizes, divided by
/// `C²σ²_agg`.
pub fn aggregated_noise_variance_ratio(draws: usize, seed: u64) -> f64 {
    let (users, size, q, sigma, clip, dim) = (10usize, 1000u64, 0.1, 2.0, 1.5, 10usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = Binomial::new(size, q).expect("valid binomial");
    let sigmas = vec![sigma; users];
    let mut sumsq = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        let n: Vec<usize> = (0..users).map(|_| sizes.sample(&mut rng) as usize).collect();
        if let Some(z) = aggregated_noise(&n, clip, &sigmas, dim, &mut rng) {
            sumsq += z.iter().map(|x| x * x).sum::<f64>();
            count += dim;
        }
    }
    let target = clip * clip * homogeneous_aggregate(users, q, sigma);
    sumsq / count as f64 / target
}

pub fn check_noise_aggregation() -> CheckOutcome {
    let ratio = aggregated_noise_variance_ratio(100_000, 8);
    CheckOutcome::new(
        "noise_aggregation",
        (ratio - 1.0).abs() <= 0.05,
        format!("empirical / predicted variance = {ratio:.4}"),
    )
}

/// The reference sweep reproduces the published cross-method ordering at
/// ε = 0.3, T = 7·10⁴.
pub fn check_reference_annotations() -> CheckOutcome {
    let rows = match sweep(&SweepConfig::reference()) {
        Ok(r) => r,
        Err(e) => return CheckOutcome::new("reference_annotations", false, e.to_string()),
    };
    let cmp = reference_comparison(&rows);
    let detail = cmp
        .iter()
        .map(|c| {
            format!(
                "{}: utility {} (published {}), rate {} (published {})",
                c.method,
                c.computed_utility.map_or("n/a".into(), |u| format!("{u:.4}")),
                c.published_utility,
                c.computed_rate_bits.map_or("n/a".into(), |r| format!("{r:.1}")),
                c.published_rate_bits,
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    CheckOutcome::new("reference_annotations", reference_ordering_matches(&cmp), detail)
}

/// All library-level checks in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_sigma_cap(),
        check_utility_caps(),
        check_accountant_ordering(),
        check_ac1_round_trip(),
        check_rdp_oracle(),
        check_simulation(),
        check_weighted_gradient_identity(),
        check_noise_aggregation(),
        check_reference_annotations(),
    ]
}
