//! Seeded FedSGD simulator with clipped, Gaussian-perturbed user gradients on
//! a synthetic strongly convex loss.
//!
//! The loss is `ℓ(w, x) = ½ Σᵢ aᵢ (wᵢ − xᵢ)²` with curvatures `aᵢ` spaced
//! linearly in `[λ, μ]` (`λ = μ = 1` gives `½‖w − x‖²`). The global optimum is
//! the mean of the pooled data and the optimality gap is `½ Σᵢ aᵢ (wᵢ − w*ᵢ)²`.
//!
//! Randomness: every (repetition, user, round) triple owns a ChaCha8 stream
//! seeded with [`stream_seed`]; data generation uses repetition index
//! [`DATA_STREAM`]. Any component can be replayed in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tradeoff::{aggregate_noise, utility_lower_bound, LossRegularity};

/// A per-user setting given either once for everyone or as one value per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerUser<T> {
    Uniform(T),
    Each(Vec<T>),
}

impl<T: Copy> PerUser<T> {
    pub fn get(&self, user: usize) -> T {
        match self {
            PerUser::Uniform(v) => *v,
            PerUser::Each(v) => v[user],
        }
    }
}

fn default_data_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub users: usize,
    pub dim: usize,
    pub per_user_data: PerUser<usize>,
    pub q: PerUser<f64>,
    pub sigma: PerUser<f64>,
    pub clip: f64,
    pub rounds: u64,
    pub lambda: f64,
    pub mu: f64,
    pub grad_bound: f64,
    pub seed: u64,
    pub repetitions: usize,
    /// Data points are drawn uniformly from the ball of this radius at the origin.
    #[serde(default = "default_data_radius")]
    pub data_radius: f64,
    /// Initial weights are `init_distance · e₁`.
    #[serde(default)]
    pub init_distance: f64,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(invalid("users", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions", "must be at least 1"));
        }
        for (field, len) in [
            ("per_user_data", per_user_len(&self.per_user_data)),
            ("q", per_user_len(&self.q)),
            ("sigma", per_user_len(&self.sigma)),
        ] {
            if let Some(n) = len {
                if n != self.users {
                    return Err(invalid(field, format!("has {n} entries but users = {}", self.users)));
                }
            }
        }
        for k in 0..self.users {
            if self.per_user_data.get(k) == 0 {
                return Err(invalid("per_user_data", "every user needs at least one point"));
            }
            let q = self.q.get(k);
            if !(q > 0.0 && q < 1.0) {
                return Err(invalid("q", format!("{q} is not in (0, 1)")));
            }
            let s = self.sigma.get(k);
            if !(s >= 0.0) || !s.is_finite() {
                return Err(invalid("sigma", format!("{s} is not a nonnegative number")));
            }
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip", "must be positive"));
        }
        if !(self.grad_bound >= self.clip) {
            return Err(invalid("grad_bound", "must be at least clip"));
        }
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda", "must be positive"));
        }
        if !(self.mu >= self.lambda) {
            return Err(invalid("mu", "must be at least lambda"));
        }
        if !(self.data_radius >= 0.0) {
            return Err(invalid("data_radius", "must be nonnegative"));
        }
        if !self.init_distance.is_finite() {
            return Err(invalid("init_distance", "must be finite"));
        }
        Ok(())
    }

    pub fn regularity(&self) -> LossRegularity {
        LossRegularity {
            mu: self.mu,
            lambda: self.lambda,
            grad_bound: self.grad_bound,
            clip: self.clip,
            dim: self.dim as u64,
        }
    }

    /// Aggregated noise multiplier squared over the configured users.
    pub fn aggregated_sigma_sq(&self) -> f64 {
        aggregate_noise((0..self.users).map(|k| (self.per_user_data.get(k) as f64, self.q.get(k), self.sigma.get(k))))
    }

    pub fn is_noiseless(&self) -> bool {
        (0..self.users).all(|k| self.sigma.get(k) == 0.0)
    }

    pub fn initial_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        w[0] = self.init_distance;
        w
    }
}

fn per_user_len<T>(p: &PerUser<T>) -> Option<usize> {
    match p {
        PerUser::Uniform(_) => None,
        PerUser::Each(v) => Some(v.len()),
    }
}

/// Repetition index reserved for data generation.
pub const DATA_STREAM: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `(root, repetition, user, round)` into one 64-bit seed with SplitMix64.
pub fn stream_seed(root: u64, repetition: u64, user: u64, round: u64) -> u64 {
    [repetition, user, round]
        .iter()
        .fold(splitmix64(root), |acc, &x| splitmix64(acc ^ splitmix64(x)))
}

pub fn stream_rng(root: u64, repetition: u64, user: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, repetition, user, round))
}

/// A user's points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    points: Vec<f64>,
    /// Every point has norm at most this.
    pub radius: f64,
}

impl Dataset {
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or(Error::Empty("dataset"))?;
        if points.iter().any(|p| p.len() != dim) {
            return Err(invalid("points", "all points need the same dimension"));
        }
        let radius = points.iter().map(|p| norm(p)).fold(0.0, f64::max);
        Ok(Self {
            dim,
            points: points.concat(),
            radius,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// The quadratic problem: datasets, curvature and analytic optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub datasets: Vec<Dataset>,
    pub curvature: Vec<f64>,
    pub optimum: Vec<f64>,
}

/// Curvatures spaced linearly from `lambda` to `mu`.
pub fn curvature_profile(dim: usize, lambda: f64, mu: f64) -> Vec<f64> {
    if dim == 1 {
        return vec![lambda];
    }
    (0..dim)
        .map(|i| lambda + (mu - lambda) * i as f64 / (dim - 1) as f64)
        .collect()
}

impl QuadraticProblem {
    pub fn new(datasets: Vec<Dataset>, curvature: Vec<f64>) -> Result<Self> {
        let dim = curvature.len();
        if datasets.is_empty() {
            return Err(Error::Empty("dataset list"));
        }
        if datasets.iter().any(|d| d.dim() != dim || d.is_empty()) {
            return Err(invalid("datasets", "every dataset must be nonempty with the curvature's dimension"));
        }
        let total: usize = datasets.iter().map(Dataset::len).sum();
        let mut optimum = vec![0.0; dim];
        for d in &datasets {
            for i in 0..d.len() {
                for (o, x) in optimum.iter_mut().zip(d.point(i)) {
                    *o += x;
                }
            }
        }
        optimum.iter_mut().for_each(|o| *o /= total as f64);
        Ok(Self {
            datasets,
            curvature,
            optimum,
        })
    }

    pub fn dim(&self) -> usize {
        self.curvature.len()
    }

    /// Global loss over the pooled data.
    pub fn loss(&self, w: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for d in &self.datasets {
            for i in 0..d.len() {
                sum += point_loss(&self.curvature, w, d.point(i));
            }
            n += d.len();
        }
        sum / n as f64
    }

    /// `L(w) − L(w*)`, evaluated through the exact quadratic identity.
    pub fn loss_gap(&self, w: &[f64]) -> f64 {
        0.5 * w
            .iter()
            .zip(&self.optimum)
            .zip(&self.curvature)
            .map(|((wi, oi), a)| a * (wi - oi).powi(2))
            .sum::<f64>()
    }

    pub fn squared_error(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.optimum).map(|(a, b)| (a - b).powi(2)).sum()
    }

    /// Gradient of the global loss over all pooled points.
    pub fn full_gradient(&self, w: &[f64]) -> Vec<f64> {
        let points: Vec<&[f64]> = self
            .datasets
            .iter()
            .flat_map(|d| (0..d.len()).map(move |i| d.point(i)))
            .collect();
        local_gradient(&self.curvature, w, &points)
    }

    /// Local gradient of `user` over the sampled indices.
    pub fn user_gradient(&self, w: &[f64], user: usize, sample: &[usize]) -> Vec<f64> {
        let d = &self.datasets[user];
        let points: Vec<&[f64]> = sample.iter().map(|&i| d.point(i)).collect();
        local_gradient(&self.curvature, w, &points)
    }
}

fn point_loss(curvature: &[f64], w: &[f64], x: &[f64]) -> f64 {
    0.5 * curvature
        .iter()
        .zip(w.iter().zip(x))
        .map(|(a, (wi, xi))| a * (wi - xi).powi(2))
        .sum::<f64>()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sample_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    let scale = if n > 0.0 { r / n } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Draws every user's dataset uniformly from the configured ball.
pub fn make_quadratic_problem(cfg: &SimConfig, rng_seed: u64) -> Result<QuadraticProblem> {
    cfg.validate()?;
    let datasets = (0..cfg.users)
        .map(|k| {
            let mut rng = stream_rng(rng_seed, DATA_STREAM, k as u64, 0);
            let points: Vec<Vec<f64>> = (0..cfg.per_user_data.get(k))
                .map(|_| sample_ball(&mut rng, cfg.dim, cfg.data_radius))
                .collect();
            Dataset::from_points(&points)
        })
        .collect::<Result<Vec<_>>>()?;
    QuadraticProblem::new(datasets, curvature_profile(cfg.dim, cfg.lambda, cfg.mu))
}

/// Mean of the per-point gradients `a ⊙ (w − x)` over a nonempty sample.
pub fn local_gradient(curvature: &[f64], w: &[f64], sample: &[&[f64]]) -> Vec<f64> {
    let mut mean = vec![0.0; w.len()];
    for x in sample {
        for (m, xi) in mean.iter_mut().zip(x.iter()) {
            *m += xi;
        }
    }
    let n = sample.len() as f64;
    mean.iter()
        .zip(w)
        .zip(curvature)
        .map(|((m, wi), a)| a * (wi - m / n))
        .collect()
}

/// `g / max{1, ‖g‖/C}`.
pub fn clip_gradient(g: &[f64], clip: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip);
    out
}

/// Clips in place and returns the norm before clipping.
fn clip_in_place(g: &mut [f64], clip: f64) -> f64 {
    let n = norm(g);
    let scale = f64::max(1.0, n / clip);
    if scale > 1.0 {
        g.iter_mut().for_each(|x| *x /= scale);
    }
    n
}

/// Indices included independently with probability `q`, generated by
/// geometric gap skipping.
pub fn poisson_sample<R: Rng>(len: usize, q: f64, rng: &mut R) -> Vec<usize> {
    let gaps = Geometric::new(q).expect("q must lie in (0, 1]");
    let mut out = Vec::with_capacity((len as f64 * q * 1.5) as usize + 4);
    let mut next: u64 = 0;
    loop {
        next = next.saturating_add(gaps.sample(rng));
        if next >= len as u64 {
            break;
        }
        out.push(next as usize);
        next += 1;
    }
    out
}

/// Adds independent `N(0, (Cσ)²)` noise to every coordinate.
pub fn perturb<R: Rng>(g: &[f64], clip: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut out = g.to_vec();
    perturb_in_place(&mut out, clip, sigma, rng);
    out
}

fn perturb_in_place<R: Rng>(g: &mut [f64], clip: f64, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let std = clip * sigma;
    for x in g.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += std * z;
    }
}

/// Server-side noise `Σ (|J_k|/|J|) Z_k` for the given sample sizes, or `None`
/// if every sample is empty.
pub fn aggregated_noise<R: Rng>(
    sample_sizes: &[usize],
    clip: f64,
    sigmas: &[f64],
    dim: usize,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let total: usize = sample_sizes.iter().sum();
    if total == 0 {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for (&n, &s) in sample_sizes.iter().zip(sigmas) {
        if n == 0 {
            continue;
        }
        let z = perturb(&vec![0.0; dim], clip, s, rng);
        let w = n as f64 / total as f64;
        acc.iter_mut().zip(&z).for_each(|(a, zi)| *a += w * zi);
    }
    Some(acc)
}

/// Per-round diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundStats {
    pub max_grad_norm: f64,
    pub sampled: usize,
    pub applied: bool,
}

/// Step size `G/(Cλt)`, `t ≥ 1`.
pub fn learning_rate(cfg: &SimConfig, t: u64) -> f64 {
    cfg.grad_bound / (cfg.clip * cfg.lambda * t as f64)
}

/// One round at index `t ≥ 1`: sample, differentiate, clip and perturb per
/// user, then apply the `|J_k|/|J|`-weighted step. Users are summed in index
/// order. A round where every sample is empty leaves `w` unchanged.
pub fn run_round(
    w: &mut [f64],
    problem: &QuadraticProblem,
    cfg: &SimConfig,
    t: u64,
    repetition: u64,
) -> RoundStats {
    assert!(t >= 1, "round index starts at 1");
    let dim = w.len();
    let mut stats = RoundStats::default();
    let mut weighted = vec![0.0; dim];
    for (k, data) in problem.datasets.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, repetition, k as u64, t);
        let sample = poisson_sample(data.len(), cfg.q.get(k), &mut rng);
        if sample.is_empty() {
            continue;
        }
        let mut g = problem.user_gradient(w, k, &sample);
        let raw = clip_in_place(&mut g, cfg.clip);
        assert!(norm(&g) <= cfg.clip * (1.0 + 1e-12), "clipped norm exceeds C");
        stats.max_grad_norm = stats.max_grad_norm.max(raw);
        perturb_in_place(&mut g, cfg.clip, cfg.sigma.get(k), &mut rng);
        let n = sample.len() as f64;
        weighted.iter_mut().zip(&g).for_each(|(a, gi)| *a += n * gi);
        stats.sampled += sample.len();
    }
    if stats.sampled > 0 {
        let step = learning_rate(cfg, t) / stats.sampled as f64;
        w.iter_mut().zip(&weighted).for_each(|(wi, a)| *wi -= step * a);
        stats.applied = true;
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub rounds: u64,
    pub repetitions: usize,
    /// Entry `t−1` is the optimality gap of `w⁽ᵗ⁾`, `t = 1..=T+1`, averaged over repetitions.
    pub loss_gap_trajectory: Vec<f64>,
    pub loss_gap_stderr: Vec<f64>,
    /// Same indexing as `loss_gap_trajectory`, for `‖w⁽ᵗ⁾ − w*‖²`.
    pub mse_trajectory: Vec<f64>,
    pub mse_stderr: Vec<f64>,
    /// Gap of `w⁽ᵀ⁺¹⁾` for each repetition, in repetition order.
    pub final_loss_gaps: Vec<f64>,
    /// `1 / mean final gap`.
    pub empirical_utility: f64,
    pub realized_grad_norm_max: f64,
    pub grad_bound_exceeded: bool,
    pub sigma_agg_sq: f64,
    /// Utility lower bound at `T` for this configuration.
    pub utility_bound: f64,
}

impl SimResult {
    /// Fraction of repetitions whose own utility `1/gap` reaches the bound.
    pub fn fraction_meeting_bound(&self) -> f64 {
        let hits = self
            .final_loss_gaps
            .iter()
            .filter(|&&g| 1.0 / g >= self.utility_bound)
            .count();
        hits as f64 / self.final_loss_gaps.len() as f64
    }
}

struct Trajectory {
    gaps: Vec<f64>,
    mse: Vec<f64>,
    grad_max: f64,
}

fn run_repetition(problem: &QuadraticProblem, cfg: &SimConfig, repetition: u64) -> Trajectory {
    let len = cfg.rounds as usize + 1;
    let mut gaps = Vec::with_capacity(len);
    let mut mse = Vec::with_capacity(len);
    let mut grad_max: f64 = 0.0;
    let mut w = cfg.initial_weights();
    for t in 1..=cfg.rounds {
        gaps.push(problem.loss_gap(&w));
        mse.push(problem.squared_error(&w));
        grad_max = grad_max.max(run_round(&mut w, problem, cfg, t, repetition).max_grad_norm);
    }
    gaps.push(problem.loss_gap(&w));
    mse.push(problem.squared_error(&w));
    Trajectory { gaps, mse, grad_max }
}

fn mean_and_stderr(runs: &[Trajectory], pick: impl Fn(&Trajectory) -> &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = runs.len() as f64;
    let len = pick(&runs[0]).len();
    let mut mean = vec![0.0; len];
    for r in runs {
        mean.iter_mut().zip(pick(r)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    if runs.len() > 1 {
        for r in runs {
            var.iter_mut()
                .zip(pick(r).iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m).powi(2));
        }
        var.iter_mut().for_each(|v| *v = (*v / (n - 1.0) / n).sqrt());
    }
    (mean, var)
}

/// Runs all repetitions (in parallel) and combines them in repetition order.
///
/// Fails if the configuration is noiseless and a realized gradient norm
/// exceeds `G`; with noise the exceedance is only flagged.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimResult> {
    let problem = make_quadratic_problem(cfg, cfg.seed)?;
    run_simulation_on(&problem, cfg)
}

/// As [`run_simulation`] on an existing problem instance.
pub fn run_simulation_on(problem: &QuadraticProblem, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    if problem.dim() != cfg.dim || problem.datasets.len() != cfg.users {
        return Err(invalid("dim", "problem does not match the configuration"));
    }
    let runs = run_repetitions(problem, cfg);
    let grad_max = runs.iter().map(|r| r.grad_max).fold(0.0, f64::max);
    let exceeded = grad_max > cfg.grad_bound;
    if exceeded && cfg.is_noiseless() {
        return Err(Error::GradBoundExceeded {
            realized: grad_max,
            bound: cfg.grad_bound,
        });
    }
    let (gap_mean, gap_se) = mean_and_stderr(&runs, |r| &r.gaps);
    let (mse_mean, mse_se) = mean_and_stderr(&runs, |r| &r.mse);
    let final_loss_gaps: Vec<f64> = runs.iter().map(|r| *r.gaps.last().unwrap()).collect();
    let sigma_agg_sq = cfg.aggregated_sigma_sq();
    Ok(SimResult {
        rounds: cfg.rounds,
        repetitions: cfg.repetitions,
        empirical_utility: 1.0 / *gap_mean.last().unwrap(),
        loss_gap_trajectory: gap_mean,
        loss_gap_stderr: gap_se,
        mse_trajectory: mse_mean,
        mse_stderr: mse_se,
        final_loss_gaps,
        realized_grad_norm_max: grad_max,
        grad_bound_exceeded: exceeded,
        sigma_agg_sq,
        utility_bound: utility_lower_bound(cfg.rounds, &cfg.regularity(), sigma_agg_sq),
    })
}

fn run_repetitions(problem: &QuadraticProblem, cfg: &SimConfig) -> Vec<Trajectory> {
    (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|rep| run_repetition(problem, cfg, rep))
        .collect()
}

/// Largest pre-clipping gradient norm seen by a noiseless run of `cfg` with
/// `G = C`. Never fails on exceedance; meant for choosing `G`.
pub fn pilot_grad_norm_max(problem: &QuadraticProblem, cfg: &SimConfig) -> Result<f64> {
    let pilot = SimConfig {
        sigma: PerUser::Uniform(0.0),
        grad_bound: cfg.clip,
        ..cfg.clone()
    };
    pilot.validate()?;
    Ok(run_repetitions(problem, &pilot)
        .iter()
        .map(|r| r.grad_max)
        .fold(0.0, f64::max))
}

/// `max{2, 1 + dσ²} · 2G²/(λ²t)`.
pub fn explicit_mse_bound(cfg: &SimConfig, sigma_agg_sq: f64, t: u64) -> f64 {
    let noise = 1.0 + cfg.dim as f64 * sigma_agg_sq;
    f64::max(2.0, noise) * 2.0 * cfg.grad_bound.powi(2) / (cfg.lambda.powi(2) * t as f64)
}

/// Rounds `t` (1-based) where the averaged MSE exceeds the explicit
/// bound by more than `margin_se` standard errors.
pub fn explicit_bound_violations(result: &SimResult, cfg: &SimConfig, margin_se: f64) -> Vec<u64> {
    result
        .mse_trajectory
        .iter()
        .zip(&result.mse_stderr)
        .enumerate()
        .filter_map(|(i, (m, se))| {
            let t = i as u64 + 1;
            (*m > explicit_mse_bound(cfg, result.sigma_agg_sq, t) + margin_se * se).then_some(t)
        })
        .collect()
}

/// Rounds `t ≥ 3` where `mse(t+1) > (1 − 2/t)·mse(t) + G²(1+dσ²)/(λ²t²)` by
/// more than `margin_se` standard errors of `mse(t+1)`.
pub fn recurrence_violations(result: &SimResult, cfg: &SimConfig, margin_se: f64) -> Vec<u64> {
    let noise = 1.0 + cfg.dim as f64 * result.sigma_agg_sq;
    let g2 = cfg.grad_bound.powi(2) / cfg.lambda.powi(2);
    let m = &result.mse_trajectory;
    (3..m.len() as u64)
        .filter(|&t| {
            let tf = t as f64;
            let now = m[t as usize - 1];
            let next = m[t as usize];
            let bound = (1.0 - 2.0 / tf) * now + g2 * noise / (tf * tf);
            next > bound + margin_se * result.mse_stderr[t as usize]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn small_cfg() -> SimConfig {
        SimConfig {
            users: 3,
            dim: 4,
            per_user_data: PerUser::Uniform(50),
            q: PerUser::Uniform(0.2),
            sigma: PerUser::Uniform(0.0),
            clip: 1.0,
            rounds: 200,
            lambda: 1.0,
            mu: 1.0,
            grad_bound: 4.0,
            seed: 11,
            repetitions: 4,
            data_radius: 1.0,
            init_distance: 2.0,
        }
    }

    #[test]
    fn identical_points_give_that_optimum() {
        let x0 = vec![0.3, -1.2, 2.0];
        let d = Dataset::from_points(&vec![x0.clone(); 5]).unwrap();
        let p = QuadraticProblem::new(vec![d.clone(), d], vec![1.0; 3]).unwrap();
        for (a, b) in p.optimum.iter().zip(&x0) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        assert!(p.loss(&x0).abs() < 1e-15);
    }

    #[test]
    fn optimum_is_pooled_mean_and_stationary() {
        let mut cfg = small_cfg();
        cfg.per_user_data = PerUser::Each(vec![10, 40, 77]);
        cfg.mu = 3.0;
        let p = make_quadratic_problem(&cfg, 5).unwrap();
        let mut mean = vec![0.0; cfg.dim];
        let mut n = 0;
        for d in &p.datasets {
            for i in 0..d.len() {
                mean.iter_mut().zip(d.point(i)).for_each(|(m, x)| *m += x);
                n += 1;
            }
        }
        for (m, o) in mean.iter().zip(&p.optimum) {
            assert_relative_eq!(m / n as f64, *o, max_relative = 1e-10);
        }
        assert!(norm(&p.full_gradient(&p.optimum)) <= 1e-10);
        assert!(p.datasets.iter().all(|d| d.radius <= cfg.data_radius));
    }

    #[test]
    fn loss_gap_identity() {
        let mut cfg = small_cfg();
        cfg.mu = 2.5;
        let p = make_quadratic_problem(&cfg, 9).unwrap();
        let w = vec![0.7, -0.1, 0.4, 1.9];
        assert_relative_eq!(p.loss_gap(&w), p.loss(&w) - p.loss(&p.optimum), max_relative = 1e-10);
    }

    #[test]
    fn single_point_gradient() {
        let g = local_gradient(&[1.0, 1.0], &[3.0, -1.0], &[&[1.0, 1.0]]);
        assert_eq!(g, vec![2.0, -2.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SimConfig { mu: 4.0, ..small_cfg() };
        let p = make_quadratic_problem(&cfg, 3).unwrap();
        let sample: Vec<usize> = (0..20).collect();
        let w = vec![0.5, -0.3, 1.1, 0.05];
        let g = p.user_gradient(&w, 1, &sample);
        let d = &p.datasets[1];
        let local_loss = |w: &[f64]| {
            sample.iter().map(|&i| point_loss(&p.curvature, w, d.point(i))).sum::<f64>() / sample.len() as f64
        };
        let h = 1e-5;
        for i in 0..w.len() {
            let mut up = w.clone();
            let mut down = w.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (local_loss(&up) - local_loss(&down)) / (2.0 * h);
            assert_relative_eq!(g[i], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn clipping_cases() {
        let g = vec![0.3, 0.4]; // norm 0.5
        assert_eq!(clip_gradient(&g, 1.0), g);
        let g = vec![1.2, 1.6]; // norm 2
        let c = clip_gradient(&g, 1.0);
        assert_relative_eq!(norm(&c), 1.0, max_relative = 1e-15);
        assert_relative_eq!(c[0] / c[1], 0.75, max_relative = 1e-15);
    }

    #[test]
    fn poisson_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut total = 0usize;
        let mut empty = 0usize;
        for _ in 0..draws {
            let s = poisson_sample(100, 0.3, &mut rng);
            assert!(s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&i| i < 100));
            total += s.len();
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - 30.0).abs() < 0.3, "mean {mean}");

        // (1 − 0.05)^20 ≈ 0.358
        for _ in 0..draws {
            empty += poisson_sample(20, 0.05, &mut rng).is_empty() as usize;
        }
        let freq = empty as f64 / draws as f64;
        let p0 = 0.95f64.powi(20);
        assert!((freq - p0).abs() < 4.0 * (p0 * (1.0 - p0) / draws as f64).sqrt(), "freq {freq}");
    }

    #[test]
    fn near_certain_inclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(poisson_sample(500, 1.0 - 1e-15, &mut rng).len(), 500);
    }

    #[test]
    fn perturb_variance_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = vec![0.1, -0.2, 0.3];
        assert_eq!(perturb(&g, 2.0, 0.0, &mut rng), g);
        let (clip, sigma) = (1.5, 0.8);
        let n = 100_000;
        let mut sumsq = 0.0;
        for _ in 0..n {
            sumsq += perturb(&[0.0], clip, sigma, &mut rng)[0].powi(2);
        }
        let var = sumsq / n as f64;
        let target = (clip * sigma).powi(2);
        assert!((var / target - 1.0).abs() < 0.05);
    }

    #[test]
    fn plain_gradient_descent_reduction() {
        // K = 1, full inclusion, no noise, clipping inactive
        let x0 = vec![1.0, -2.0];
        let d = Dataset::from_points(&vec![x0.clone(); 3]).unwrap();
        let p = QuadraticProblem::new(vec![d], vec![1.0, 1.0]).unwrap();
        let cfg = SimConfig {
            users: 1,
            dim: 2,
            per_user_data: PerUser::Uniform(3),
            q: PerUser::Uniform(1.0 - 1e-15),
            sigma: PerUser::Uniform(0.0),
            clip: 10.0,
            grad_bound: 10.0,
            init_distance: 0.5,
            ..small_cfg()
        };
        let mut w = vec![0.5, 0.0];
        let eta = learning_rate(&cfg, 3);
        let expected: Vec<f64> = w.iter().zip(&x0).map(|(wi, xi)| wi - eta * (wi - xi)).collect();
        let stats = run_round(&mut w, &p, &cfg, 3, 0);
        assert!(stats.applied);
        for (a, b) in w.iter().zip(&expected) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn empty_round_applies_no_update() {
        let d = Dataset::from_points(&[vec![1.0]]).unwrap();
        let p = QuadraticProblem::new(vec![d], vec![1.0]).unwrap();
        let cfg = SimConfig {
            users: 1,
            dim: 1,
            per_user_data: PerUser::Uniform(1),
            q: PerUser::Uniform(1e-12),
            ..small_cfg()
        };
        let mut w = vec![3.0];
        let stats = run_round(&mut w, &p, &cfg, 1, 0);
        assert!(!stats.applied);
        assert_eq!(w, vec![3.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = small_cfg();
        cfg.sigma = PerUser::Uniform(0.5);
        let a = run_simulation(&cfg).unwrap();
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        assert_ne!(run_simulation(&cfg).unwrap(), a);
    }

    #[test]
    fn noiseless_run_fails_when_g_too_small() {
        let cfg = SimConfig {
            grad_bound: 1.0,
            ..small_cfg()
        };
        assert!(matches!(run_simulation(&cfg), Err(Error::GradBoundExceeded { .. })));
    }

    #[test]
    fn noisy_run_flags_exceedance() {
        let cfg = SimConfig {
            grad_bound: 1.0,
            sigma: PerUser::Uniform(1.0),
            ..small_cfg()
        };
        let r = run_simulation(&cfg).unwrap();
        assert!(r.grad_bound_exceeded);
    }

    #[test]
    fn noiseless_final_gap_within_bound() {
        let cfg = SimConfig {
            rounds: 10_000,
            repetitions: 2,
            ..small_cfg()
        };
        let r = run_simulation(&cfg).unwrap();
        let bound = 2.0 * cfg.mu * cfg.grad_bound.powi(2) / (cfg.lambda.powi(2) * cfg.rounds as f64);
        assert!(r.final_loss_gaps.iter().all(|&g| g <= bound));
        assert!(r.empirical_utility >= r.utility_bound);
    }

    #[test]
    fn config_validation_names_field() {
        let mut cfg = small_cfg();
        cfg.q = PerUser::Each(vec![0.1, 0.2]);
        match cfg.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "q"),
            other => panic!("{other:?}"),
        }
        let cfg = SimConfig {
            grad_bound: 0.5,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field: "grad_bound", .. })));
    }

    #[test]
    fn stream_seeds_distinct() {
        let a = stream_seed(1, 0, 0, 1);
        assert_ne!(a, stream_seed(1, 0, 1, 0));
        assert_ne!(a, stream_seed(1, 1, 0, 0));
        assert_ne!(a, stream_seed(2, 0, 0, 1));
        assert_eq!(a, stream_seed(1, 0, 0, 1));
    }
}
