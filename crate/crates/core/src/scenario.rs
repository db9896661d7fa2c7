//! Scenario-approach certificates and seeded scenario generation.
//!
//! All binomial quantities are evaluated in log space through `ln_gamma`, so sample
//! counts in the thousands do not overflow.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Upper limit for sample-count searches.
const MAX_SAMPLES: usize = 100_000_000;

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidBudget(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// `ln C(n, k)`.
pub fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `sum_{i < dim} C(samples, i) eps^i (1 - eps)^(samples - i)`: the probability that
/// the scenario solution violates more than `eps` of the mass.
pub fn binomial_tail(epsilon: f64, samples: usize, dim: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    if samples < dim {
        return 1.0;
    }
    let le = epsilon.ln();
    let l1 = (-epsilon).ln_1p();
    let terms: Vec<f64> = (0..dim).map(|i| ln_choose(samples, i) + i as f64 * le + (samples - i) as f64 * l1).collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    /// Smallest `S` with binomial tail at most `beta`.
    Implicit,
    /// Closed-form `e/(e-1) (d + ln(1/beta)) / eps`.
    Explicit,
}

/// Certificate tuple of one scenario program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub beta: f64,
    pub dimension: usize,
    pub sample_count: usize,
    pub method: BoundMethod,
}

impl Budget {
    pub fn implicit(epsilon: f64, beta: f64, dimension: usize) -> Result<Self> {
        Ok(Self {
            epsilon,
            beta,
            dimension,
            sample_count: sample_count(epsilon, beta, dimension)?,
            method: BoundMethod::Implicit,
        })
    }

    pub fn explicit(epsilon: f64, beta: f64, dimension: usize) -> Result<Self> {
        Ok(Self {
            epsilon,
            beta,
            dimension,
            sample_count: explicit_sample_count(epsilon, beta, dimension)?,
            method: BoundMethod::Explicit,
        })
    }

    /// Binomial tail at the stored sample count; at most `beta` for a valid budget.
    pub fn tail(&self) -> f64 {
        binomial_tail(self.epsilon, self.sample_count, self.dimension)
    }
}

/// Smallest `S >= d` whose binomial tail is at most `beta`.
pub fn sample_count(epsilon: f64, beta: f64, dim: usize) -> Result<usize> {
    check_unit("epsilon", epsilon)?;
    check_unit("beta", beta)?;
    if dim == 0 {
        return Err(Error::InvalidBudget("dimension must be at least 1".into()));
    }
    if binomial_tail(epsilon, dim, dim) <= beta {
        return Ok(dim);
    }
    let mut lo = dim; // tail(lo) > beta
    let mut hi = dim.max(1) * 2;
    while binomial_tail(epsilon, hi, dim) > beta {
        lo = hi;
        hi = hi.saturating_mul(2);
        if hi > MAX_SAMPLES {
            return Err(Error::InvalidBudget("required sample count is out of range".into()));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if binomial_tail(epsilon, mid, dim) <= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `ceil(e/(e-1) * (1/eps) * (d + ln(1/beta)))`.
pub fn explicit_sample_count(epsilon: f64, beta: f64, dim: usize) -> Result<usize> {
    check_unit("epsilon", epsilon)?;
    check_unit("beta", beta)?;
    if dim == 0 {
        return Err(Error::InvalidBudget("dimension must be at least 1".into()));
    }
    let e = std::f64::consts::E;
    let s = e / (e - 1.0) / epsilon * (dim as f64 + (1.0 / beta).ln());
    Ok(s.ceil() as usize)
}

/// Uniform split `eps_i = eps / n`, `beta_i = beta / n`.
pub fn split_budget(epsilon: f64, beta: f64, agents: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if agents == 0 {
        return Err(Error::InvalidBudget("cannot split over zero agents".into()));
    }
    split_budget_weighted(epsilon, beta, &vec![1.0 / agents as f64; agents])
}

/// Proportional split; `weights` must be positive and sum to one.
pub fn split_budget_weighted(epsilon: f64, beta: f64, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_unit("epsilon", epsilon)?;
    check_unit("beta", beta)?;
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidBudget("weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::WeightsDontSum(total));
    }
    let n = weights.len();
    if weights.iter().all(|w| *w == weights[0]) {
        let n_f = n as f64;
        return Ok((vec![epsilon / n_f; n], vec![beta / n_f; n]));
    }
    Ok((weights.iter().map(|w| w * epsilon).collect(), weights.iter().map(|w| w * beta).collect()))
}

/// `alpha = (beta / C(S, dim))^(1 / (S - dim))`.
pub fn reliability_level(beta_tilde: f64, samples: usize, dim: usize) -> Result<f64> {
    check_unit("beta_tilde", beta_tilde)?;
    if samples <= dim {
        return Err(Error::InsufficientSamples { samples, dim });
    }
    let degree = (samples - dim) as f64;
    Ok(((beta_tilde.ln() - ln_choose(samples, dim)) / degree).exp())
}

/// Smallest `S > dim` whose reliability level reaches `alpha_target`.
pub fn samples_for_reliability(alpha_target: f64, beta_tilde: f64, dim: usize) -> Result<usize> {
    check_unit("alpha_target", alpha_target)?;
    check_unit("beta_tilde", beta_tilde)?;
    let mut s = dim + 1;
    while s < MAX_SAMPLES {
        if reliability_level(beta_tilde, s, dim)? >= alpha_target {
            return Ok(s);
        }
        s += 1;
    }
    Err(Error::InvalidBudget("reliability target needs too many samples".into()))
}

/// Feasibility level `1 - (1 - alpha_i) / prod_j alpha_j` of an agent that plans
/// against neighbor sets of reliability `alpha_j`.
pub fn composed_feasibility(alpha_i: f64, neighbor_reliability: &[f64]) -> Result<f64> {
    let in_range = |v: f64| v.is_finite() && v > 0.0 && v <= 1.0;
    if !in_range(alpha_i) || !neighbor_reliability.iter().all(|a| in_range(*a)) {
        return Err(Error::InvalidBudget("feasibility levels must lie in (0, 1]".into()));
    }
    let product: f64 = neighbor_reliability.iter().product();
    let violation = 1.0 - alpha_i;
    if product <= violation {
        return Err(Error::VacuousBound { product, violation });
    }
    Ok(1.0 - violation / product)
}

/// Global violation level as the sum of per-agent levels (union bound).
pub fn global_violation(per_agent: &[f64]) -> f64 {
    per_agent.iter().sum()
}

// ---------------------------------------------------------------------------
// Scenario generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamRole {
    /// Scenarios entering the constraints.
    Constraint,
    /// Scenarios averaging the cost.
    Cost,
    /// Trajectory samples for reliability boxes.
    BoxFit,
    /// Realizations driving the simulated plant.
    Plant,
    /// Out-of-sample draws for a-posteriori validation.
    Validation,
}

impl StreamRole {
    fn tag(self) -> u64 {
        match self {
            StreamRole::Constraint => 1,
            StreamRole::Cost => 2,
            StreamRole::BoxFit => 3,
            StreamRole::Plant => 4,
            StreamRole::Validation => 5,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named substream `(root, agent, time, role, attempt)`.
pub fn stream_seed(root: u64, agent: usize, time: usize, role: StreamRole, attempt: usize) -> u64 {
    let mut h = splitmix(root);
    for part in [agent as u64, time as u64, role.tag(), attempt as u64] {
        h = splitmix(h ^ part);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceModel {
    Zero,
    /// `w_t = nominal_t + fraction |nominal_t| U(-1, 1)` elementwise; the nominal
    /// trajectory repeats periodically.
    UniformBand {
        nominal: Vec<Vec<f64>>,
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintyModel {
    Zero,
    /// Gaussian conditioned on `|d| <= cap`, drawn by rejection.
    TruncatedGaussian {
        mean: f64,
        std_dev: f64,
        cap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProcess {
    pub nw: usize,
    pub delta_dim: usize,
    pub disturbance: DisturbanceModel,
    pub uncertainty: UncertaintyModel,
}

/// One realization of disturbance and uncertainty over a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub w: Vec<DVector<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn zero(nw: usize, delta_dim: usize, horizon: usize) -> Self {
        Self { w: vec![DVector::zeros(nw); horizon], delta: vec![vec![0.0; delta_dim]; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.w.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub agent: usize,
    pub time: usize,
    pub role: StreamRole,
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

fn truncated_gaussian<R: Rng>(rng: &mut R, mean: f64, std_dev: f64, cap: f64) -> f64 {
    if cap <= 0.0 {
        return 0.0;
    }
    if std_dev <= 0.0 {
        return mean.clamp(-cap, cap);
    }
    if cap <= std_dev {
        // Uniform proposal on the support; acceptance relative to the density peak.
        let peak = mean.clamp(-cap, cap);
        let inv = 1.0 / (2.0 * std_dev * std_dev);
        loop {
            let x = -cap + 2.0 * cap * rng.random::<f64>();
            let ratio = (-((x - mean).powi(2) - (peak - mean).powi(2)) * inv).exp();
            if rng.random::<f64>() <= ratio {
                return x;
            }
        }
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = mean + std_dev * z;
        if x.abs() <= cap {
            return x;
        }
    }
}

impl NoiseProcess {
    pub fn zero(nw: usize, delta_dim: usize) -> Self {
        Self { nw, delta_dim, disturbance: DisturbanceModel::Zero, uncertainty: UncertaintyModel::Zero }
    }

    pub fn nominal_disturbance(&self, time: usize) -> DVector<f64> {
        match &self.disturbance {
            DisturbanceModel::Zero => DVector::zeros(self.nw),
            DisturbanceModel::UniformBand { nominal, .. } => {
                if nominal.is_empty() {
                    DVector::zeros(self.nw)
                } else {
                    DVector::from_column_slice(&nominal[time % nominal.len()])
                }
            }
        }
    }

    /// Noise-free scenario: nominal disturbance and `d = 0` (or the clamped mean).
    pub fn nominal_scenario(&self, start: usize, horizon: usize) -> Scenario {
        let d0 = match self.uncertainty {
            UncertaintyModel::Zero => 0.0,
            UncertaintyModel::TruncatedGaussian { mean, cap, .. } => mean.clamp(-cap, cap),
        };
        Scenario {
            w: (0..horizon).map(|l| self.nominal_disturbance(start + l)).collect(),
            delta: vec![vec![d0; self.delta_dim]; horizon],
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, start: usize, horizon: usize) -> Scenario {
        let mut w = Vec::with_capacity(horizon);
        let mut delta = Vec::with_capacity(horizon);
        for l in 0..horizon {
            let nom = self.nominal_disturbance(start + l);
            let wl = match &self.disturbance {
                DisturbanceModel::Zero => nom,
                DisturbanceModel::UniformBand { fraction, .. } => DVector::from_fn(self.nw, |i, _| {
                    let u = 2.0 * rng.random::<f64>() - 1.0;
                    nom[i] + fraction * nom[i].abs() * u
                }),
            };
            w.push(wl);
            let dl = match self.uncertainty {
                UncertaintyModel::Zero => vec![0.0; self.delta_dim],
                UncertaintyModel::TruncatedGaussian { mean, std_dev, cap } => {
                    (0..self.delta_dim).map(|_| truncated_gaussian(rng, mean, std_dev, cap)).collect()
                }
            };
            delta.push(dl);
        }
        Scenario { w, delta }
    }
}

/// Draws `count` i.i.d. scenarios for `agent` from the substream
/// `(seed, agent, time, role, attempt)`.
pub fn draw_scenarios(
    process: &NoiseProcess,
    agent: usize,
    count: usize,
    horizon: usize,
    time: usize,
    role: StreamRole,
    seed: u64,
    attempt: usize,
) -> ScenarioSet {
    let stream = stream_seed(seed, agent, time, role, attempt);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let scenarios = (0..count).map(|_| process.sample(&mut rng, time, horizon)).collect();
    ScenarioSet { agent, time, role, seed: stream, scenarios }
}

/// Joins per-agent scenarios with the same index into global scenarios; `channels[i]`
/// maps agent `i`'s local uncertainty channels to global ones.
pub fn combine_scenarios(per_agent: &[&[Scenario]], channels: &[Vec<usize>], delta_dim: usize) -> Vec<Scenario> {
    let count = per_agent.iter().map(|s| s.len()).min().unwrap_or(0);
    (0..count)
        .map(|s| {
            let horizon = per_agent[0][s].horizon();
            let w = (0..horizon)
                .map(|l| {
                    let parts: Vec<DVector<f64>> = per_agent.iter().map(|set| set[s].w[l].clone()).collect();
                    crate::model::stack(&parts)
                })
                .collect();
            let delta = (0..horizon)
                .map(|l| {
                    let mut d = vec![0.0; delta_dim];
                    for (i, set) in per_agent.iter().enumerate() {
                        for (local, &global) in channels[i].iter().enumerate() {
                            d[global] = set[s].delta[l][local];
                        }
                    }
                    d
                })
                .collect();
            Scenario { w, delta }
        })
        .collect()
}
