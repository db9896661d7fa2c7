//! A-posteriori Monte Carlo validation and mode comparison.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::step_agent;
use crate::mpc::{simulate, ControllerMode, ControllerSettings, Network, VIOLATION_TOL};
use crate::program::NeighborTrajectories;
use crate::scenario::{stream_seed, StreamRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub mode: String,
    pub draws: usize,
    pub per_agent_counts: Vec<usize>,
    pub per_agent: Vec<f64>,
    pub per_agent_intervals: Vec<(f64, f64)>,
    /// Draws violating in any agent.
    pub global_count: usize,
    pub global: f64,
    /// Exact 95% interval of the global rate.
    pub interval: (f64, f64),
    pub target: Option<f64>,
}

impl ViolationReport {
    fn from_counts(mode: &str, draws: usize, per_agent_counts: Vec<usize>, global_count: usize) -> Self {
        let rate = |c: usize| if draws == 0 { 0.0 } else { c as f64 / draws as f64 };
        Self {
            mode: mode.to_string(),
            draws,
            per_agent: per_agent_counts.iter().map(|&c| rate(c)).collect(),
            per_agent_intervals: per_agent_counts.iter().map(|&c| clopper_pearson(c, draws, 0.95)).collect(),
            per_agent_counts,
            global: rate(global_count),
            interval: clopper_pearson(global_count, draws, 0.95),
            global_count,
            target: None,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = Some(target);
        self
    }

    /// Largest distance from the global rate to an end of its interval.
    pub fn half_width(&self) -> f64 {
        (self.global - self.interval.0).max(self.interval.1 - self.global)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,count,draws,rate,lower,upper\n");
        for (i, (&c, r)) in self.per_agent_counts.iter().zip(&self.per_agent).enumerate() {
            let (lo, hi) = self.per_agent_intervals[i];
            out += &format!(
                "agent{i},{c},{},{},{},{}\n",
                self.draws,
                crate::mpc::format_sig(*r),
                crate::mpc::format_sig(lo),
                crate::mpc::format_sig(hi)
            );
        }
        out += &format!(
            "global,{},{},{},{},{}\n",
            self.global_count,
            self.draws,
            crate::mpc::format_sig(self.global),
            crate::mpc::format_sig(self.interval.0),
            crate::mpc::format_sig(self.interval.1)
        );
        out
    }
}

/// Exact binomial interval for `successes` out of `trials` at the given confidence.
pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let a = 1.0 - confidence;
    let (x, n) = (successes as f64, trials as f64);
    let lower = if successes == 0 { 0.0 } else { Beta::new(x, n - x + 1.0).map_or(0.0, |b| b.inverse_cdf(a / 2.0)) };
    let upper =
        if successes >= trials { 1.0 } else { Beta::new(x + 1.0, n - x).map_or(1.0, |b| b.inverse_cdf(1.0 - a / 2.0)) };
    (lower.min(x / n), upper.max(x / n))
}

/// Violation flags of each agent for one draw of the coupled rollout.
fn rollout_flags(
    network: &Network,
    x0: &[DVector<f64>],
    v: &[DVector<f64>],
    time: usize,
    seed: u64,
    draw: usize,
) -> Result<Vec<bool>> {
    let t = network.horizon();
    let real: Vec<_> = (0..network.len())
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(seed, network.ids[i], time, StreamRole::Validation, draw));
            network.noise[i].sample(&mut rng, time, t)
        })
        .collect();
    let mut xs = x0.to_vec();
    let mut flags = vec![false; network.len()];
    for l in 0..t {
        let mut next = Vec::with_capacity(xs.len());
        for (i, ag) in network.agents.iter().enumerate() {
            let u = &ag.k * &xs[i] + v[i].rows(l * ag.nu, ag.nu);
            let nb: NeighborTrajectories = ag.couplings.iter().map(|c| (c.neighbor, xs[c.neighbor].clone())).collect();
            let x = step_agent(ag, &xs[i], &u, &nb, &real[i].w[l], &real[i].delta[l])?;
            if !ag.state_set.contains(&x, VIOLATION_TOL) {
                flags[i] = true;
            }
            next.push(x);
        }
        xs = next;
    }
    Ok(flags)
}

/// Applies the plans `v` from the measured states `x0` at sampling time `time` to
/// `draws` fresh realizations of the coupled network and counts trajectories that
/// leave the constraint sets at any step of the horizon.
pub fn estimate_violation(
    network: &Network,
    x0: &[DVector<f64>],
    v: &[DVector<f64>],
    time: usize,
    draws: usize,
    seed: u64,
) -> Result<ViolationReport> {
    let n = network.len();
    if x0.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch("one state and one plan per agent".into()));
    }
    for (i, ag) in network.agents.iter().enumerate() {
        if v[i].len() != ag.decision_dim() || x0[i].len() != ag.nx {
            return Err(Error::DimensionMismatch(format!("state or plan of agent {i}")));
        }
    }
    let flags =
        (0..draws).into_par_iter().map(|m| rollout_flags(network, x0, v, time, seed, m)).collect::<Result<Vec<_>>>()?;
    let mut per_agent = vec![0; n];
    let mut global = 0;
    for f in &flags {
        for (i, &b) in f.iter().enumerate() {
            per_agent[i] += usize::from(b);
        }
        global += usize::from(f.iter().any(|&b| b));
    }
    Ok(ViolationReport::from_counts("", draws, per_agent, global))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub mode: String,
    pub seeds: usize,
    /// Seeds aborted because no feasible scenario draw was found.
    pub failures: usize,
    /// Mean over steps and seeds of the a-posteriori violation probability of the plan.
    pub one_shot_violation: f64,
    /// Fraction of agent-steps whose realized next state violated the constraints.
    pub closed_loop_violation: f64,
    pub mean_cost: f64,
    pub messages_per_step: f64,
    pub iterations_per_step: f64,
    pub epsilon_bar: Vec<f64>,
    /// One-shot counts pooled over every step and seed.
    pub pooled: ViolationReport,
}

/// Runs every mode on the same seeds. Plant realizations depend only on the seed, so
/// the modes see identical disturbances.
pub fn compare_modes(
    network: &Network,
    x0: &[DVector<f64>],
    modes: &[ControllerMode],
    settings: &ControllerSettings,
    steps: usize,
    seeds: &[u64],
    draws: usize,
) -> Result<Vec<ModeComparison>> {
    let mut out = Vec::with_capacity(modes.len());
    for mode in modes {
        let (mut one_shot, mut closed, mut cost, mut messages, mut iterations) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut runs, mut failures, mut step_count) = (0usize, 0usize, 0usize);
        let mut eps_bar = Vec::new();
        let (mut pooled_agents, mut pooled_global, mut pooled_draws) = (vec![0; network.len()], 0, 0);
        for &seed in seeds {
            let trace = match simulate(network, x0, mode, settings, steps, seed, &[]) {
                Ok(t) => t,
                Err(Error::Infeasible { step, attempts }) => {
                    log::warn!("{}: seed {seed} infeasible at step {step} after {attempts} draws", mode.label());
                    failures += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let summary = trace.summary(network);
            for rec in &trace.steps {
                let rep = estimate_violation(network, &rec.states, &rec.plans, rec.k, draws, seed)?;
                one_shot += rep.global;
                for (acc, c) in pooled_agents.iter_mut().zip(&rep.per_agent_counts) {
                    *acc += c;
                }
                pooled_global += rep.global_count;
                pooled_draws += rep.draws;
                messages += rec.messages as f64;
                iterations += rec.iterations as f64;
                step_count += 1;
            }
            closed += summary.violation_rate;
            cost += summary.mean_stage_cost;
            eps_bar = summary.epsilon_bar;
            runs += 1;
        }
        let target = match mode {
            ControllerMode::SoftComm(_) if !eps_bar.is_empty() => eps_bar.iter().sum(),
            _ => network.epsilon,
        };
        let pooled =
            ViolationReport::from_counts(&mode.label(), pooled_draws, pooled_agents, pooled_global).with_target(target);
        let per = |x: f64, d: usize| if d == 0 { 0.0 } else { x / d as f64 };
        out.push(ModeComparison {
            mode: mode.label(),
            seeds: seeds.len(),
            failures,
            one_shot_violation: per(one_shot, step_count),
            closed_loop_violation: per(closed, runs),
            mean_cost: per(cost, runs),
            messages_per_step: per(messages, step_count),
            iterations_per_step: per(iterations, step_count),
            epsilon_bar: eps_bar,
            pooled,
        });
    }
    Ok(out)
}

/// CSV table of a comparison, one row per mode.
pub fn comparison_csv(rows: &[ModeComparison]) -> String {
    use crate::mpc::format_sig;
    let mut out = String::from(
        "mode,seeds,failures,one_shot_violation,closed_loop_violation,mean_cost,messages_per_step,iterations_per_step\n",
    );
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.seeds,
            r.failures,
            format_sig(r.one_shot_violation),
            format_sig(r.closed_loop_violation),
            format_sig(r.mean_cost),
            format_sig(r.messages_per_step),
            format_sig(r.iterations_per_step)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineMatrix, AgentModel, Polytope};
    use crate::scenario::{DisturbanceModel, NoiseProcess, UncertaintyModel};
    use nalgebra::DMatrix;

    /// `x+ = w` with `w ~ U[0, 1]` and `x <= hi`.
    fn toy(hi: f64) -> Network {
        let one = |v: f64| AffineMatrix::constant(DMatrix::from_element(1, 1, v), 0);
        let ag = AgentModel {
            index: 0,
            nx: 1,
            nu: 1,
            nw: 1,
            a_self: one(0.0),
            b: one(0.0),
            c: one(1.0),
            couplings: Vec::new(),
            k: DMatrix::zeros(1, 1),
            q: DMatrix::zeros(1, 1),
            r: DMatrix::identity(1, 1),
            p: DMatrix::zeros(1, 1),
            state_set: Polytope::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, hi)).unwrap(),
            input_set: Polytope::from_box(&[-1.0], &[1.0]),
            horizon: 1,
        };
        let noise = NoiseProcess {
            nw: 1,
            delta_dim: 0,
            disturbance: DisturbanceModel::UniformBand { nominal: vec![vec![0.5]], fraction: 1.0 },
            uncertainty: UncertaintyModel::Zero,
        };
        Network::new(vec![ag], vec![noise], 0.1, 0.01).unwrap()
    }

    #[test]
    fn uniform_tail_rate() {
        let net = toy(0.9);
        let rep = estimate_violation(&net, &[DVector::zeros(1)], &[DVector::zeros(1)], 0, 10_000, 3).unwrap();
        assert!(rep.interval.0 <= 0.1 && 0.1 <= rep.interval.1, "{rep:?}");
    }

    #[test]
    fn whole_space_never_violates() {
        let net = toy(f64::INFINITY);
        let rep = estimate_violation(&net, &[DVector::zeros(1)], &[DVector::zeros(1)], 0, 500, 3).unwrap();
        assert_eq!(rep.global_count, 0);
        assert_eq!(rep.interval.0, 0.0);
    }

    #[test]
    fn clopper_pearson_reference_values() {
        // Closed forms at the edges: (alpha/2)^(1/n) and 1 - (alpha/2)^(1/n).
        let (lo, hi) = clopper_pearson(0, 10, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-9);
        let (lo, hi) = clopper_pearson(10, 10, 0.95);
        assert!((lo - 0.025f64.powf(0.1)).abs() < 1e-9);
        assert_eq!(hi, 1.0);
        let (lo, hi) = clopper_pearson(5, 10, 0.95);
        assert!((lo - 0.187086).abs() < 1e-5 && (hi - 0.812914).abs() < 1e-5);
    }

    #[test]
    fn estimator_mean_is_unbiased() {
        let net = toy(0.9);
        let reps = 100;
        let m = 400;
        let mean: f64 = (0..reps)
            .map(|s| estimate_violation(&net, &[DVector::zeros(1)], &[DVector::zeros(1)], 0, m, s).unwrap().global)
            .sum::<f64>()
            / reps as f64;
        let se = (0.1 * 0.9 / (m * reps as usize) as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * se, "mean {mean}");
    }
}
