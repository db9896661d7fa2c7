//! Receding-horizon drivers.
//!
//! Every mode follows the same loop: measure the states, plan over the horizon,
//! apply the first input of each agent and advance the true coupled plant with a
//! realization drawn from a stream no controller ever reads.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{run_exchange, ExchangeConfig, InProcessTransport};
use crate::model::{
    reassemble, stack, step_agent, AffineMatrix, AgentModel, BlockSize, Coupling, Partition, UncertainSystem,
};
use crate::program::{
    build_centralized, build_robust_local, condense, empirical_cost, predicted_cost, NeighborTrajectories,
};
use crate::qp::QpStatus;
use crate::scenario::{
    combine_scenarios, composed_feasibility, draw_scenarios, sample_count, samples_for_reliability, split_budget,
    split_budget_weighted, stream_seed, Budget, NoiseProcess, Scenario, StreamRole,
};
use crate::softcomm::{Centering, CertificateDimension, ReliabilityBox};

pub const DEFAULT_MAX_RETRIES: usize = 5;

/// Tolerance when checking measured states against their constraint sets.
pub const VIOLATION_TOL: f64 = 1e-9;

/// Coupled agents with their noise processes and chance-constraint budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub agents: Vec<AgentModel>,
    pub noise: Vec<NoiseProcess>,
    /// Stable labels; they seed the random streams and survive plug events.
    pub ids: Vec<usize>,
    pub epsilon: f64,
    pub beta: f64,
    pub budgets: Vec<Budget>,
}

impl Network {
    pub fn new(agents: Vec<AgentModel>, noise: Vec<NoiseProcess>, epsilon: f64, beta: f64) -> Result<Self> {
        let ids = (0..agents.len()).collect();
        Self::assemble(agents, noise, ids, epsilon, beta, None)
    }

    /// Budgets split in proportion to `weights`.
    pub fn with_weights(
        agents: Vec<AgentModel>,
        noise: Vec<NoiseProcess>,
        epsilon: f64,
        beta: f64,
        weights: &[f64],
    ) -> Result<Self> {
        let ids = (0..agents.len()).collect();
        Self::assemble(agents, noise, ids, epsilon, beta, Some(weights))
    }

    fn assemble(
        agents: Vec<AgentModel>,
        noise: Vec<NoiseProcess>,
        ids: Vec<usize>,
        epsilon: f64,
        beta: f64,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let n = agents.len();
        if n == 0 {
            return Err(Error::InvalidModel("network has no agents".into()));
        }
        if noise.len() != n || ids.len() != n {
            return Err(Error::DimensionMismatch("one noise process and id per agent".into()));
        }
        let horizon = agents[0].horizon;
        for (i, ag) in agents.iter().enumerate() {
            if ag.index != i {
                return Err(Error::InvalidModel(format!("agent at position {i} has index {}", ag.index)));
            }
            if ag.horizon != horizon {
                return Err(Error::InvalidModel("agents disagree on the horizon".into()));
            }
            if noise[i].nw != ag.nw || noise[i].delta_dim != ag.delta_dim() {
                return Err(Error::DimensionMismatch(format!("noise process of agent {i}")));
            }
            for c in &ag.couplings {
                if c.neighbor >= n || c.neighbor == i {
                    return Err(Error::DisconnectedCouplingSpec(format!("agent {i} reads agent {}", c.neighbor)));
                }
                if c.matrix.nrows() != ag.nx || c.matrix.ncols() != agents[c.neighbor].nx {
                    return Err(Error::DimensionMismatch(format!("coupling {i} <- {}", c.neighbor)));
                }
            }
        }
        let (eps, bet) = match weights {
            Some(w) => split_budget_weighted(epsilon, beta, w)?,
            None => split_budget(epsilon, beta, n)?,
        };
        let budgets = agents
            .iter()
            .enumerate()
            .map(|(i, ag)| Budget::implicit(eps[i], bet[i], ag.decision_dim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { agents, noise, ids, epsilon, beta, budgets })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.agents[0].horizon
    }

    /// Agents that read agent `i`'s state.
    pub fn followers(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.agents[k].coupling(i).is_some()).collect()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Shared scenario count of the exchange: the largest per-agent requirement.
    pub fn exchange_samples(&self) -> usize {
        self.budgets.iter().map(|b| b.sample_count).max().unwrap_or(0)
    }

    /// Block layout with consecutive uncertainty channels and constraint rows.
    pub fn partition(&self) -> Partition {
        let mut channels = Vec::with_capacity(self.len());
        let mut state_rows = Vec::with_capacity(self.len());
        let mut input_rows = Vec::with_capacity(self.len());
        let (mut c, mut g, mut h) = (0, 0, 0);
        for ag in &self.agents {
            channels.push((c..c + ag.delta_dim()).collect());
            state_rows.push((g..g + ag.state_set.rows()).collect());
            input_rows.push((h..h + ag.input_set.rows()).collect());
            c += ag.delta_dim();
            g += ag.state_set.rows();
            h += ag.input_set.rows();
        }
        Partition {
            blocks: self.agents.iter().map(|a| BlockSize::new(a.nx, a.nu, a.nw)).collect(),
            neighbors: self.agents.iter().map(|a| a.neighbors()).collect(),
            channels,
            state_rows,
            input_rows,
            delta_dim: c,
        }
    }

    pub fn system(&self) -> Result<UncertainSystem> {
        reassemble(&self.agents, &self.partition())
    }

    fn rebuilt(&self, agents: Vec<AgentModel>, noise: Vec<NoiseProcess>, ids: Vec<usize>) -> Result<Self> {
        Self::assemble(agents, noise, ids, self.epsilon, self.beta, None)
    }
}

/// Adds `agent` at the end of the network. Its own couplings name existing positions;
/// `followers` lists existing agents that start reading the new agent's state, with
/// the coupling matrix they apply to it. Budgets are split again over the new size.
pub fn plug_in(
    network: &Network,
    mut agent: AgentModel,
    noise: NoiseProcess,
    followers: Vec<(usize, AffineMatrix)>,
) -> Result<Network> {
    let n = network.len();
    agent.index = n;
    if agent.horizon != network.horizon() {
        return Err(Error::InvalidModel("new agent uses a different horizon".into()));
    }
    for c in &agent.couplings {
        if c.neighbor >= n {
            return Err(Error::DisconnectedCouplingSpec(format!("new agent reads unknown agent {}", c.neighbor)));
        }
    }
    let mut agents = network.agents.clone();
    for (k, m) in followers {
        let Some(host) = agents.get_mut(k) else {
            return Err(Error::DisconnectedCouplingSpec(format!("follower {k} is not in the network")));
        };
        if m.nrows() != host.nx || m.ncols() != agent.nx || m.channels() != host.delta_dim() {
            return Err(Error::DimensionMismatch(format!("coupling of follower {k} to the new agent")));
        }
        host.couplings.retain(|c| c.neighbor != n);
        host.couplings.push(Coupling { neighbor: n, matrix: m });
    }
    agents.push(agent);
    let mut noises = network.noise.clone();
    noises.push(noise);
    let mut ids = network.ids.clone();
    ids.push(network.ids.iter().max().map_or(0, |m| m + 1));
    network.rebuilt(agents, noises, ids)
}

/// Removes the agent labelled `id`; couplings to it are dropped and positions close up.
pub fn plug_out(network: &Network, id: usize) -> Result<Network> {
    let p = network.position(id).ok_or(Error::UnknownAgent(id))?;
    if network.len() == 1 {
        return Err(Error::InvalidModel("cannot remove the last agent".into()));
    }
    let mut agents = Vec::with_capacity(network.len() - 1);
    for (i, ag) in network.agents.iter().enumerate() {
        if i == p {
            continue;
        }
        let mut ag = ag.clone();
        ag.index = if i > p { i - 1 } else { i };
        ag.couplings = ag
            .couplings
            .into_iter()
            .filter(|c| c.neighbor != p)
            .map(|c| Coupling { neighbor: if c.neighbor > p { c.neighbor - 1 } else { c.neighbor }, matrix: c.matrix })
            .collect();
        agents.push(ag);
    }
    let mut noise = network.noise.clone();
    noise.remove(p);
    let mut ids = network.ids.clone();
    ids.remove(p);
    network.rebuilt(agents, noise, ids)
}

/// How many trajectory samples a box is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityTarget {
    Samples(usize),
    /// Smallest sample count reaching this reliability level.
    Alpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftCommConfig {
    /// Confidence of the box certificate.
    pub beta: f64,
    pub reliability: ReliabilityTarget,
    #[serde(default)]
    pub centering: Centering,
    #[serde(default)]
    pub certificate: CertificateDimension,
}

impl SoftCommConfig {
    pub fn with_alpha(alpha: f64, beta: f64) -> Self {
        Self {
            beta,
            reliability: ReliabilityTarget::Alpha(alpha),
            centering: Centering::default(),
            certificate: CertificateDimension::default(),
        }
    }

    /// Dimension used in the certificate of a box around a `nx`-state trajectory.
    pub fn certificate_dim(&self, nx: usize, horizon: usize) -> usize {
        match self.certificate {
            CertificateDimension::Trajectory => nx * horizon,
            CertificateDimension::State => nx,
        }
    }

    pub fn samples(&self, cert_dim: usize) -> Result<usize> {
        match self.reliability {
            ReliabilityTarget::Samples(s) if s > cert_dim => Ok(s),
            ReliabilityTarget::Samples(s) => Err(Error::InsufficientSamples { samples: s, dim: cert_dim }),
            ReliabilityTarget::Alpha(a) => samples_for_reliability(a, self.beta, cert_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerMode {
    Centralized,
    Distributed,
    SoftComm(SoftCommConfig),
    Decoupled,
}

impl ControllerMode {
    pub fn label(&self) -> String {
        match self {
            ControllerMode::Centralized => "csmpc".into(),
            ControllerMode::Distributed => "dsmpc".into(),
            ControllerMode::SoftComm(c) => match c.reliability {
                ReliabilityTarget::Alpha(a) => format!("dsmpcs-{a:.2}"),
                ReliabilityTarget::Samples(s) => format!("dsmpcs-s{s}"),
            },
            ControllerMode::Decoupled => "desmpc".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub exchange: ExchangeConfig,
    /// Scenarios averaged in each agent's cost.
    pub cost_samples: usize,
    pub max_retries: usize,
    /// Sampling time of the first simulated step.
    pub start_time: usize,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self { exchange: ExchangeConfig::default(), cost_samples: 20, max_retries: DEFAULT_MAX_RETRIES, start_time: 0 }
    }
}

/// Topology change applied before the controllers plan at `step`, counted from the
/// first simulated step.
#[derive(Debug, Clone, PartialEq)]
pub enum PlugEvent {
    In { agent: AgentModel, noise: NoiseProcess, followers: Vec<(usize, AffineMatrix)>, x0: DVector<f64> },
    Out { id: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent {
    pub step: usize,
    pub event: PlugEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub ids: Vec<usize>,
    /// Measured states at the start of the step.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Planned corrections `v_i` over the horizon.
    pub plans: Vec<DVector<f64>>,
    /// Predicted cost of each agent's plan.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub redraws: usize,
    pub messages: usize,
    /// Whether each agent's next state leaves its constraint set.
    pub violations: Vec<bool>,
    /// Certified reliability of each agent's outgoing box (soft communication only).
    pub reliability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub mode: String,
    pub seed: u64,
    pub fingerprint: Option<String>,
    pub steps: Vec<StepRecord>,
    pub final_ids: Vec<usize>,
    pub final_states: Vec<DVector<f64>>,
    /// Per-agent composed violation level of the final network (soft communication).
    pub epsilon_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mode: String,
    pub seed: u64,
    pub fingerprint: Option<String>,
    pub steps: usize,
    /// Fraction of agent-steps whose next state violated the constraints.
    pub violation_rate: f64,
    /// Fraction of steps with a violation in any agent.
    pub step_violation_rate: f64,
    pub mean_stage_cost: f64,
    pub messages: usize,
    pub iterations: usize,
    pub redraws: usize,
    pub unconverged_steps: usize,
    pub epsilon_bar: Vec<f64>,
}

/// Formats with ten significant digits.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-5..10).contains(&e) {
        let prec = (9 - e).max(0) as usize;
        let s = format!("{x:.prec$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.9e}")
    }
}

impl ClosedLoopTrace {
    /// One row per step and agent.
    pub fn to_csv(&self) -> String {
        let nx = self.steps.iter().flat_map(|s| s.states.iter().map(|x| x.len())).max().unwrap_or(0);
        let nu = self.steps.iter().flat_map(|s| s.inputs.iter().map(|u| u.len())).max().unwrap_or(0);
        let mut out = String::new();
        let mut header = vec!["k".to_string(), "agent".to_string()];
        header.extend((0..nx).map(|d| format!("x{d}")));
        header.extend((0..nu).map(|d| format!("u{d}")));
        header.extend(
            ["mode", "objective", "residual", "iterations", "redraws", "violated", "seed", "fingerprint"]
                .map(String::from),
        );
        let _ = writeln!(out, "{}", header.join(","));
        let fp = self.fingerprint.as_deref().unwrap_or("");
        for st in &self.steps {
            for (a, id) in st.ids.iter().enumerate() {
                let mut row = vec![st.k.to_string(), id.to_string()];
                row.extend((0..nx).map(|d| st.states[a].get(d).map_or(String::new(), |v| format_sig(*v))));
                row.extend((0..nu).map(|d| st.inputs[a].get(d).map_or(String::new(), |v| format_sig(*v))));
                row.push(self.mode.clone());
                row.push(format_sig(st.objectives[a]));
                row.push(format_sig(st.residual));
                row.push(st.iterations.to_string());
                row.push(st.redraws.to_string());
                row.push(u8::from(st.violations[a]).to_string());
                row.push(self.seed.to_string());
                row.push(fp.to_string());
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        out
    }

    pub fn summary(&self, network: &Network) -> TraceSummary {
        let agent_steps: usize = self.steps.iter().map(|s| s.violations.len()).sum();
        let violated: usize = self.steps.iter().map(|s| s.violations.iter().filter(|&&v| v).count()).sum();
        let bad_steps = self.steps.iter().filter(|s| s.violations.iter().any(|&v| v)).count();
        let mut cost = 0.0;
        for st in &self.steps {
            for (a, id) in st.ids.iter().enumerate() {
                // Stage weights of the agent if it is still present, else of position a.
                let ag =
                    network.position(*id).map_or(&network.agents[a.min(network.len() - 1)], |p| &network.agents[p]);
                let (x, u) = (&st.states[a], &st.inputs[a]);
                if x.len() == ag.nx && u.len() == ag.nu {
                    cost += x.dot(&(&ag.q * x)) + u.dot(&(&ag.r * u));
                }
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        TraceSummary {
            mode: self.mode.clone(),
            seed: self.seed,
            fingerprint: self.fingerprint.clone(),
            steps: self.steps.len(),
            violation_rate: ratio(violated, agent_steps),
            step_violation_rate: ratio(bad_steps, self.steps.len()),
            mean_stage_cost: if self.steps.is_empty() { 0.0 } else { cost / self.steps.len() as f64 },
            messages: self.steps.iter().map(|s| s.messages).sum(),
            iterations: self.steps.iter().map(|s| s.iterations).sum(),
            redraws: self.steps.iter().map(|s| s.redraws).sum(),
            unconverged_steps: self.steps.iter().filter(|s| !s.converged).count(),
            epsilon_bar: self.epsilon_bar.clone(),
        }
    }
}

/// Violation level `epsilon / prod(alphas)` of an agent with level `epsilon` planning
/// against neighbor boxes of reliability `alphas`.
pub fn composed_violation(epsilon: f64, alphas: &[f64]) -> Result<f64> {
    Ok(1.0 - composed_feasibility(1.0 - epsilon, alphas)?)
}

struct Plan {
    v: Vec<DVector<f64>>,
    objectives: Vec<f64>,
    iterations: usize,
    residual: f64,
    converged: bool,
    redraws: usize,
    messages: usize,
    reliability: Vec<f64>,
}

fn neighbor_states(agent: &AgentModel, xs: &[DVector<f64>]) -> NeighborTrajectories {
    agent.couplings.iter().map(|c| (c.neighbor, xs[c.neighbor].clone())).collect()
}

fn draw(net: &Network, i: usize, count: usize, k: usize, role: StreamRole, seed: u64, attempt: usize) -> Vec<Scenario> {
    draw_scenarios(&net.noise[i], net.ids[i], count, net.horizon(), k, role, seed, attempt).scenarios
}

fn is_infeasible(e: &Error) -> bool {
    matches!(e, Error::SubproblemInfeasible { .. } | Error::EmptyTightenedSet { .. })
}

fn plan_exchange(
    net: &Network,
    agents: &[AgentModel],
    xs: &[DVector<f64>],
    counts: &[usize],
    settings: &ControllerSettings,
    k: usize,
    seed: u64,
) -> Result<Plan> {
    let t = net.horizon();
    for attempt in 0..=settings.max_retries {
        let mut preds = Vec::with_capacity(agents.len());
        let mut costs = Vec::with_capacity(agents.len());
        let mut initial = Vec::with_capacity(agents.len());
        for (i, ag) in agents.iter().enumerate() {
            let nb = neighbor_states(ag, xs);
            let cs = draw(net, i, counts[i], k, StreamRole::Constraint, seed, attempt);
            let cc = draw(net, i, settings.cost_samples, k, StreamRole::Cost, seed, attempt);
            preds.push(condense(ag, &xs[i], &nb, &cs)?);
            costs.push(condense(ag, &xs[i], &nb, &cc)?);
            let guess: NeighborTrajectories =
                nb.iter().map(|(&j, x)| (j, DVector::from_fn(t * x.len(), |r, _| x[r % x.len()]))).collect();
            initial.push(guess);
        }
        let mut transport = InProcessTransport::new();
        match run_exchange(agents, &preds, &costs, &initial, &settings.exchange, &mut transport) {
            Ok(out) => {
                let mut objectives = Vec::with_capacity(agents.len());
                for (i, ag) in agents.iter().enumerate() {
                    let st = &out.state.agents[i];
                    let sets: Vec<NeighborTrajectories> = if st.estimates.is_empty() {
                        Vec::new()
                    } else {
                        (0..preds[i].len()).map(|s| st.estimates_of(s)).collect()
                    };
                    objectives.push(predicted_cost(ag, &costs[i], &out.v[i], &sets)?);
                }
                return Ok(Plan {
                    residual: out.final_residual(),
                    iterations: out.iterations,
                    converged: out.converged,
                    messages: out.messages,
                    v: out.v,
                    objectives,
                    redraws: attempt,
                    reliability: Vec::new(),
                });
            }
            Err(e) if is_infeasible(&e) => {
                log::info!("step {k}: exchange infeasible on draw {attempt} ({e}), redrawing");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible { step: k, attempts: settings.max_retries + 1 })
}

fn plan_centralized(
    net: &Network,
    xs: &[DVector<f64>],
    settings: &ControllerSettings,
    k: usize,
    seed: u64,
) -> Result<Plan> {
    let sys = net.system()?;
    let part = net.partition();
    let nu_total: usize = net.agents.iter().map(|a| a.nu).sum();
    let s_c = sample_count(net.epsilon, net.beta, net.horizon() * nu_total)?;
    let x0 = stack(xs);
    for attempt in 0..=settings.max_retries {
        let per_agent: Vec<Vec<Scenario>> =
            (0..net.len()).map(|i| draw(net, i, s_c, k, StreamRole::Constraint, seed, attempt)).collect();
        let per_cost: Vec<Vec<Scenario>> =
            (0..net.len()).map(|i| draw(net, i, settings.cost_samples, k, StreamRole::Cost, seed, attempt)).collect();
        let refs: Vec<&[Scenario]> = per_agent.iter().map(|s| s.as_slice()).collect();
        let crefs: Vec<&[Scenario]> = per_cost.iter().map(|s| s.as_slice()).collect();
        let cs = combine_scenarios(&refs, &part.channels, part.delta_dim);
        let cc = combine_scenarios(&crefs, &part.channels, part.delta_dim);
        let prog = build_centralized(&sys, &x0, &cs, &cc)?;
        let sol = prog.solve(&settings.exchange.qp)?;
        match sol.status {
            QpStatus::Optimal | QpStatus::MaxIterations => {
                if sol.status == QpStatus::MaxIterations {
                    log::warn!("step {k}: centralized program stopped at the iteration cap");
                }
                let v = split_decision(&part, &sol.x, net.horizon());
                let objectives = centralized_costs(net, &sys, &x0, &cc, &sol.x)?;
                return Ok(Plan {
                    v,
                    objectives,
                    iterations: sol.iterations,
                    residual: sol.primal_residual,
                    converged: sol.status == QpStatus::Optimal,
                    redraws: attempt,
                    messages: 0,
                    reliability: Vec::new(),
                });
            }
            QpStatus::Infeasible => log::info!("step {k}: centralized program infeasible on draw {attempt}, redrawing"),
            QpStatus::Unbounded => return Err(Error::Numerical("centralized program is unbounded".into())),
        }
    }
    Err(Error::Infeasible { step: k, attempts: settings.max_retries + 1 })
}

/// Splits a step-major global decision into per-agent decisions.
fn split_decision(part: &Partition, v: &DVector<f64>, horizon: usize) -> Vec<DVector<f64>> {
    let nu: usize = part.blocks.iter().map(|b| b.nu).sum();
    let mut out: Vec<DVector<f64>> = part.blocks.iter().map(|b| DVector::zeros(horizon * b.nu)).collect();
    for l in 0..horizon {
        let step = v.rows(l * nu, nu).into_owned();
        for (i, u) in part.split_input(&step).into_iter().enumerate() {
            let m = u.len();
            out[i].rows_mut(l * m, m).copy_from(&u);
        }
    }
    out
}

fn centralized_costs(
    net: &Network,
    sys: &UncertainSystem,
    x0: &DVector<f64>,
    cost_scenarios: &[Scenario],
    v: &DVector<f64>,
) -> Result<Vec<f64>> {
    let part = net.partition();
    let whole = AgentModel::from_system(sys);
    let pred = condense(&whole, x0, &NeighborTrajectories::new(), cost_scenarios)?;
    let (nx, nu, t) = (sys.nx(), sys.nu(), net.horizon());
    let x0s = part.split_state(x0);
    let empty = NeighborTrajectories::new();
    let mut per_agent: Vec<Vec<(DVector<f64>, DVector<f64>)>> = vec![Vec::new(); net.len()];
    for sp in &pred.scenarios {
        let xs = sp.states(v, &empty)?;
        let us = sp.inputs(v, &empty)?;
        let mut ax: Vec<DVector<f64>> = net.agents.iter().map(|a| DVector::zeros(t * a.nx)).collect();
        let mut au: Vec<DVector<f64>> = net.agents.iter().map(|a| DVector::zeros(t * a.nu)).collect();
        for l in 0..t {
            let xl = part.split_state(&xs.rows(l * nx, nx).into_owned());
            let ul = part.split_input(&us.rows(l * nu, nu).into_owned());
            for i in 0..net.len() {
                let (n, m) = (xl[i].len(), ul[i].len());
                ax[i].rows_mut(l * n, n).copy_from(&xl[i]);
                au[i].rows_mut(l * m, m).copy_from(&ul[i]);
            }
        }
        for i in 0..net.len() {
            per_agent[i].push((ax[i].clone(), au[i].clone()));
        }
    }
    Ok(net.agents.iter().enumerate().map(|(i, a)| empirical_cost(&a.q, &a.r, &a.p, &x0s[i], &per_agent[i])).collect())
}

/// Box a follower plans against one step later: the trajectory advanced by one step,
/// with the last block repeated.
fn shift_box(bx: &ReliabilityBox, nx: usize) -> ReliabilityBox {
    let d = bx.dim();
    let shift = |v: &DVector<f64>| DVector::from_fn(d, |r, _| v[(r + nx).min(d - nx + r % nx)]);
    ReliabilityBox {
        center: shift(&bx.center),
        half_width: shift(&bx.half_width),
        samples: bx.samples,
        beta: bx.beta,
        alpha: bx.alpha,
    }
}

/// Point boxes at the measured neighbor states, held over the horizon.
fn point_boxes(net: &Network, xs: &[DVector<f64>]) -> Vec<BTreeMap<usize, ReliabilityBox>> {
    let t = net.horizon();
    net.agents
        .iter()
        .map(|ag| {
            ag.neighbors()
                .into_iter()
                .map(|j| {
                    let x = &xs[j];
                    (j, ReliabilityBox::point(DVector::from_fn(t * x.len(), |r, _| x[r % x.len()])))
                })
                .collect()
        })
        .collect()
}

struct SoftOutcome {
    v: DVector<f64>,
    objective: f64,
    iterations: usize,
    redraws: usize,
    outgoing: ReliabilityBox,
}

#[allow(clippy::too_many_arguments)]
fn plan_soft_agent(
    net: &Network,
    i: usize,
    xs: &[DVector<f64>],
    boxes: &BTreeMap<usize, ReliabilityBox>,
    soft: &SoftCommConfig,
    settings: &ControllerSettings,
    k: usize,
    seed: u64,
) -> Result<SoftOutcome> {
    let ag = &net.agents[i];
    let nb = neighbor_states(ag, xs);
    let s_i = net.budgets[i].sample_count;
    for attempt in 0..=settings.max_retries {
        let cs = draw(net, i, s_i, k, StreamRole::Constraint, seed, attempt);
        let cc = draw(net, i, settings.cost_samples, k, StreamRole::Cost, seed, attempt);
        let pred = condense(ag, &xs[i], &nb, &cs)?;
        let cost = condense(ag, &xs[i], &nb, &cc)?;
        let prog = match build_robust_local(ag, &pred, &cost, boxes) {
            Ok(p) => p,
            Err(e) if is_infeasible(&e) => {
                log::info!("step {k}: agent {i} tightened set empty on draw {attempt}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let sol = prog.solve(&settings.exchange.qp)?;
        match sol.status {
            QpStatus::Optimal | QpStatus::MaxIterations => {
                let t = net.horizon();
                let cert_dim = soft.certificate_dim(ag.nx, t);
                let count = soft.samples(cert_dim)?;
                let fit = draw(net, i, count, k, StreamRole::BoxFit, seed, attempt);
                let fit_pred = condense(ag, &xs[i], &nb, &fit)?;
                let centers: NeighborTrajectories = boxes.iter().map(|(&j, b)| (j, b.center.clone())).collect();
                let samples =
                    fit_pred.scenarios.iter().map(|sp| sp.states(&sol.x, &centers)).collect::<Result<Vec<_>>>()?;
                let outgoing = ReliabilityBox::fit(&samples, soft.centering, soft.beta, cert_dim)?;
                return Ok(SoftOutcome {
                    objective: prog.objective(&sol.x),
                    v: sol.x,
                    iterations: sol.iterations,
                    redraws: attempt,
                    outgoing,
                });
            }
            QpStatus::Infeasible => log::info!("step {k}: agent {i} robust program infeasible on draw {attempt}"),
            QpStatus::Unbounded => return Err(Error::Numerical(format!("robust program of agent {i} is unbounded"))),
        }
    }
    Err(Error::Infeasible { step: k, attempts: settings.max_retries + 1 })
}

fn plan_soft(
    net: &Network,
    xs: &[DVector<f64>],
    boxes: &mut Vec<BTreeMap<usize, ReliabilityBox>>,
    soft: &SoftCommConfig,
    settings: &ControllerSettings,
    k: usize,
    seed: u64,
) -> Result<Plan> {
    let outcomes = (0..net.len())
        .into_par_iter()
        .map(|i| plan_soft_agent(net, i, xs, &boxes[i], soft, settings, k, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut messages = 0;
    let mut next: Vec<BTreeMap<usize, ReliabilityBox>> = vec![BTreeMap::new(); net.len()];
    for (j, o) in outcomes.iter().enumerate() {
        for f in net.followers(j) {
            next[f].insert(j, shift_box(&o.outgoing, net.agents[j].nx));
            messages += 1;
        }
    }
    *boxes = next;
    Ok(Plan {
        objectives: outcomes.iter().map(|o| o.objective).collect(),
        iterations: outcomes.iter().map(|o| o.iterations).max().unwrap_or(0),
        residual: 0.0,
        converged: true,
        redraws: outcomes.iter().map(|o| o.redraws).max().unwrap_or(0),
        messages,
        reliability: outcomes.iter().map(|o| o.outgoing.alpha).collect(),
        v: outcomes.into_iter().map(|o| o.v).collect(),
    })
}

/// One step of the true plant under independently drawn noise.
fn advance_plant(
    net: &Network,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let mut next = Vec::with_capacity(net.len());
    for (i, ag) in net.agents.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, net.ids[i], k, StreamRole::Plant, 0));
        let real = net.noise[i].sample(&mut rng, k, 1);
        next.push(step_agent(ag, &xs[i], &us[i], &neighbor_states(ag, xs), &real.w[0], &real.delta[0])?);
    }
    Ok(next)
}

fn epsilon_bar(net: &Network, reliability: &[f64]) -> Vec<f64> {
    net.agents
        .iter()
        .enumerate()
        .map(|(i, ag)| {
            let alphas: Vec<f64> = ag.neighbors().iter().map(|&j| reliability.get(j).copied().unwrap_or(1.0)).collect();
            composed_violation(net.budgets[i].epsilon, &alphas).unwrap_or(1.0)
        })
        .collect()
}

/// Closed loop over `steps` sampling times starting from `x0` (one state per agent),
/// applying `events` before planning at their step.
pub fn simulate(
    network: &Network,
    x0: &[DVector<f64>],
    mode: &ControllerMode,
    settings: &ControllerSettings,
    steps: usize,
    seed: u64,
    events: &[ScheduledEvent],
) -> Result<ClosedLoopTrace> {
    if x0.len() != network.len() {
        return Err(Error::DimensionMismatch("one initial state per agent".into()));
    }
    for (i, x) in x0.iter().enumerate() {
        if x.len() != network.agents[i].nx {
            return Err(Error::DimensionMismatch(format!("initial state of agent {i}")));
        }
    }
    let mut net = network.clone();
    let mut xs = x0.to_vec();
    let mut boxes = point_boxes(&net, &xs);
    let mut records = Vec::with_capacity(steps);
    let mut last_reliability = Vec::new();
    for step in 0..steps {
        let k = settings.start_time + step;
        let mut changed = false;
        for ev in events.iter().filter(|e| e.step == step) {
            match &ev.event {
                PlugEvent::In { agent, noise, followers, x0 } => {
                    if x0.len() != agent.nx {
                        return Err(Error::DimensionMismatch("initial state of the new agent".into()));
                    }
                    net = plug_in(&net, agent.clone(), noise.clone(), followers.clone())?;
                    xs.push(x0.clone());
                }
                PlugEvent::Out { id } => {
                    let p = net.position(*id).ok_or(Error::UnknownAgent(*id))?;
                    net = plug_out(&net, *id)?;
                    xs.remove(p);
                }
            }
            changed = true;
        }
        if changed {
            boxes = point_boxes(&net, &xs);
            log::info!("step {k}: network now has {} agents", net.len());
        }

        let plan = match mode {
            ControllerMode::Distributed => {
                let counts = vec![net.exchange_samples(); net.len()];
                plan_exchange(&net, &net.agents, &xs, &counts, settings, k, seed)?
            }
            ControllerMode::Decoupled => {
                let agents: Vec<AgentModel> = net.agents.iter().map(|a| a.decoupled()).collect();
                let counts: Vec<usize> = net.budgets.iter().map(|b| b.sample_count).collect();
                plan_exchange(&net, &agents, &xs, &counts, settings, k, seed)?
            }
            ControllerMode::Centralized => plan_centralized(&net, &xs, settings, k, seed)?,
            ControllerMode::SoftComm(soft) => plan_soft(&net, &xs, &mut boxes, soft, settings, k, seed)?,
        };
        let us: Vec<DVector<f64>> =
            net.agents.iter().enumerate().map(|(i, ag)| &ag.k * &xs[i] + plan.v[i].rows(0, ag.nu)).collect();
        let next = advance_plant(&net, &xs, &us, k, seed)?;
        let violations = net.agents.iter().zip(&next).map(|(ag, x)| !ag.state_set.contains(x, VIOLATION_TOL)).collect();
        if !plan.reliability.is_empty() {
            last_reliability = plan.reliability.clone();
        }
        records.push(StepRecord {
            k,
            ids: net.ids.clone(),
            states: xs.clone(),
            inputs: us,
            plans: plan.v,
            objectives: plan.objectives,
            iterations: plan.iterations,
            residual: plan.residual,
            converged: plan.converged,
            redraws: plan.redraws,
            messages: plan.messages,
            violations,
            reliability: plan.reliability,
        });
        xs = next;
    }
    let eps_bar = match mode {
        ControllerMode::SoftComm(_) => epsilon_bar(&net, &last_reliability),
        _ => Vec::new(),
    };
    Ok(ClosedLoopTrace {
        mode: mode.label(),
        seed,
        fingerprint: None,
        steps: records,
        final_ids: net.ids.clone(),
        final_states: xs,
        epsilon_bar: eps_bar,
    })
}

pub fn run_dsmpc(
    network: &Network,
    x0: &[DVector<f64>],
    settings: &ControllerSettings,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    simulate(network, x0, &ControllerMode::Distributed, settings, steps, seed, &[])
}

pub fn run_dsmpcs(
    network: &Network,
    x0: &[DVector<f64>],
    soft: &SoftCommConfig,
    settings: &ControllerSettings,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    simulate(network, x0, &ControllerMode::SoftComm(*soft), settings, steps, seed, &[])
}

pub fn run_centralized(
    network: &Network,
    x0: &[DVector<f64>],
    settings: &ControllerSettings,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    simulate(network, x0, &ControllerMode::Centralized, settings, steps, seed, &[])
}

pub fn run_decoupled(
    network: &Network,
    x0: &[DVector<f64>],
    settings: &ControllerSettings,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    simulate(network, x0, &ControllerMode::Decoupled, settings, steps, seed, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casestudy::{agents, ThreeRoomConfig};
    use crate::model::{AffineMatrix, Polytope};
    use nalgebra::DMatrix;

    fn three_rooms() -> Network {
        let cfg = ThreeRoomConfig::default();
        let (ags, _) = agents(&cfg).unwrap();
        Network::new(ags, vec![cfg.noise(); 3], 0.05, 0.03).unwrap()
    }

    fn scalar_agent(a: f64) -> AgentModel {
        AgentModel {
            index: 0,
            nx: 1,
            nu: 1,
            nw: 1,
            a_self: AffineMatrix::constant(DMatrix::from_element(1, 1, a), 1),
            b: AffineMatrix::constant(DMatrix::from_element(1, 1, 0.1), 1),
            c: AffineMatrix::constant(DMatrix::from_element(1, 1, 0.02), 1),
            couplings: Vec::new(),
            k: DMatrix::zeros(1, 1),
            q: DMatrix::zeros(1, 1),
            r: DMatrix::identity(1, 1),
            p: DMatrix::zeros(1, 1),
            state_set: Polytope::from_box(&[-0.5], &[0.5]),
            input_set: Polytope::from_box(&[-1.5], &[1.5]),
            horizon: 4,
        }
    }

    #[test]
    fn budgets_split_over_agents() {
        let net = three_rooms();
        for b in &net.budgets {
            assert!((b.epsilon - 0.05 / 3.0).abs() < 1e-15);
            assert_eq!(b.dimension, 4);
        }
        let p = net.partition();
        assert_eq!(p.delta_dim, 3);
        assert_eq!(p.neighbors, vec![vec![1], vec![0, 2], vec![0]]);
    }

    #[test]
    fn plug_round_trip_restores_budgets() {
        let net = three_rooms();
        let newcomer = scalar_agent(0.3);
        let noise = ThreeRoomConfig::default().noise();
        let coupling = AffineMatrix::constant(DMatrix::from_element(1, 1, 0.1), 1);
        let bigger = plug_in(&net, newcomer, noise, vec![(2, coupling)]).unwrap();
        assert_eq!(bigger.len(), 4);
        assert!((bigger.budgets[0].epsilon - 0.0125).abs() < 1e-15);
        assert!(bigger.budgets[0].sample_count > net.budgets[0].sample_count);
        assert_eq!(bigger.agents[2].neighbors(), vec![0, 3]);
        let back = plug_out(&bigger, 3).unwrap();
        assert_eq!(back.budgets, net.budgets);
        assert_eq!(back.agents, net.agents);
        assert_eq!(plug_out(&net, 9), Err(Error::UnknownAgent(9)));
    }

    #[test]
    fn plug_out_reindexes_couplings() {
        let net = three_rooms();
        let smaller = plug_out(&net, 0).unwrap();
        assert_eq!(smaller.ids, vec![1, 2]);
        assert_eq!(smaller.agents[0].neighbors(), vec![1]);
        assert!(smaller.agents[1].couplings.is_empty());
        let sum: f64 = smaller.budgets.iter().map(|b| b.epsilon).sum();
        assert!((sum - 0.05).abs() < 1e-15);
    }

    #[test]
    fn plug_in_rejects_unknown_neighbors() {
        let net = three_rooms();
        let mut newcomer = scalar_agent(0.3);
        newcomer.couplings.push(Coupling { neighbor: 7, matrix: AffineMatrix::constant(DMatrix::zeros(1, 1), 1) });
        let noise = ThreeRoomConfig::default().noise();
        assert!(matches!(plug_in(&net, newcomer, noise, vec![]), Err(Error::DisconnectedCouplingSpec(_))));
    }

    #[test]
    fn shift_drops_first_step() {
        let bx = ReliabilityBox {
            center: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            half_width: DVector::from_vec(vec![0.1, 0.2, 0.3]),
            samples: 5,
            beta: 0.1,
            alpha: 0.5,
        };
        let s = shift_box(&bx, 1);
        assert_eq!(s.center, DVector::from_vec(vec![2.0, 3.0, 3.0]));
        assert_eq!(s.half_width, DVector::from_vec(vec![0.2, 0.3, 0.3]));
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.1), "0.1");
        assert_eq!(format_sig(1.0 / 3.0), "0.3333333333");
        assert_eq!(format_sig(-21.5), "-21.5");
        assert_eq!(format_sig(1.0e-7), "1.000000000e-7");
        assert_eq!(format_sig(0.0), "0");
    }

    #[test]
    fn composed_violation_levels() {
        let e = composed_violation(0.05 / 3.0, &[0.85, 0.85]).unwrap();
        assert!((e - 0.0231).abs() < 5e-5);
    }
}
