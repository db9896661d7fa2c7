//! Distributed scenario exchange by ADMM.
//!
//! Two variants share the message types and the transport:
//!
//! * [`ExchangeVariant::Consensus`] (default) keeps private per-scenario copies of each
//!   agent's decision and neighbor estimates and reaches the centralized optimum.
//! * [`ExchangeVariant::Projection`] alternates a primal step in `v_i`, the scenario
//!   updating steps (SUS) with a broadcast of the refreshed trajectories to followers,
//!   projections of the neighbor estimates onto the local constraints, multiplier
//!   updates, and a broadcast of estimates and multipliers back to the neighbors.
//!
//! Both run bulk-synchronously and agents only see each other's data through
//! [`Transport`] messages.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentModel;
use crate::program::{
    build_local_primal, build_projection, solve_projection, Incoming, NeighborTrajectories, PredictionOperator,
};
use crate::qp::{QpSettings, QpStatus};

mod arrow;
mod consensus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeVariant {
    #[default]
    Consensus,
    Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeConfig {
    pub variant: ExchangeVariant,
    /// Penalty parameter. The consensus variant scales it by the ratio of cost
    /// curvature to squared input-to-state gain, per scenario.
    pub mu: f64,
    /// Per-agent residual tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub qp: QpSettings,
    /// Evaluate agents concurrently within each phase.
    pub parallel: bool,
    /// Sequential evaluation order of the agents (identity when `None`).
    pub order: Option<Vec<usize>>,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self {
            variant: ExchangeVariant::Consensus,
            mu: 1.0,
            tolerance: 1e-4,
            max_iterations: 500,
            qp: QpSettings::default(),
            parallel: false,
            order: None,
        }
    }
}

impl ExchangeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidModel(format!("exchange step size {} must be positive", self.mu)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidModel("exchange tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    ScenarioSetBroadcast,
    EstimateBroadcast,
    MultiplierBroadcast,
}

impl MessageKind {
    fn code(self) -> u8 {
        match self {
            MessageKind::ScenarioSetBroadcast => 0,
            MessageKind::EstimateBroadcast => 1,
            MessageKind::MultiplierBroadcast => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(MessageKind::ScenarioSetBroadcast),
            1 => Ok(MessageKind::EstimateBroadcast),
            2 => Ok(MessageKind::MultiplierBroadcast),
            _ => Err(Error::Codec(format!("unknown message kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeMessage {
    pub kind: MessageKind,
    pub sender: u16,
    pub receiver: u16,
    pub iteration: u32,
    /// One trajectory per scenario, all of the same length.
    pub payload: Vec<DVector<f64>>,
}

const HEADER: usize = 1 + 2 + 2 + 4 + 4 + 4;

impl ExchangeMessage {
    pub fn dim(&self) -> usize {
        self.payload.first().map_or(0, |p| p.len())
    }

    /// Little-endian: `kind u8, sender u16, receiver u16, iteration u32, count u32,
    /// dim u32`, then `count * dim` doubles.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.dim();
        if self.payload.iter().any(|p| p.len() != dim) {
            return Err(Error::Codec("payload trajectories differ in length".into()));
        }
        let mut out = Vec::with_capacity(HEADER + 8 * dim * self.payload.len());
        out.push(self.kind.code());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for p in &self.payload {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Codec(format!("message header needs {HEADER} bytes, got {}", bytes.len())));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let kind = MessageKind::from_code(bytes[0])?;
        let count = u32_at(9) as usize;
        let dim = u32_at(13) as usize;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER))
            .ok_or_else(|| Error::Codec("payload size overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Codec(format!("message needs {expected} bytes, got {}", bytes.len())));
        }
        let payload = (0..count)
            .map(|s| {
                DVector::from_fn(dim, |k, _| {
                    let o = HEADER + 8 * (s * dim + k);
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
            })
            .collect();
        Ok(Self { kind, sender: u16_at(1), receiver: u16_at(3), iteration: u32_at(5), payload })
    }
}

/// Reliable, iteration-ordered message delivery between agents.
pub trait Transport {
    fn send(&mut self, message: ExchangeMessage) -> Result<()>;
    /// Removes and returns every pending message of `kind` for `receiver`, sorted by
    /// sender. Fails if one of them is tagged with another iteration.
    fn receive(&mut self, receiver: usize, kind: MessageKind, iteration: u32) -> Result<Vec<ExchangeMessage>>;
    fn pending(&self) -> usize;
    /// Messages handed out so far.
    fn delivered(&self) -> usize;
    /// Bytes on the wire so far (0 for in-process delivery).
    fn bytes(&self) -> usize {
        0
    }
}

fn take_matching<T>(
    queue: &mut VecDeque<T>,
    pick: impl Fn(&T) -> Option<(MessageKind, u32)>,
    kind: MessageKind,
    iteration: u32,
) -> Result<Vec<T>> {
    let mut taken = Vec::new();
    let mut rest = VecDeque::with_capacity(queue.len());
    while let Some(m) = queue.pop_front() {
        match pick(&m) {
            Some((k, it)) if k == kind => {
                if it != iteration {
                    return Err(Error::Protocol(format!("{kind:?} tagged {it} read at iteration {iteration}")));
                }
                taken.push(m);
            }
            _ => rest.push_back(m),
        }
    }
    *queue = rest;
    Ok(taken)
}

/// Synchronous in-memory delivery.
#[derive(Debug, Default)]
pub struct InProcessTransport {
    queues: BTreeMap<usize, VecDeque<ExchangeMessage>>,
    delivered: usize,
}

impl InProcessTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, message: ExchangeMessage) -> Result<()> {
        self.queues.entry(message.receiver as usize).or_default().push_back(message);
        Ok(())
    }

    fn receive(&mut self, receiver: usize, kind: MessageKind, iteration: u32) -> Result<Vec<ExchangeMessage>> {
        let q = self.queues.entry(receiver).or_default();
        let mut got = take_matching(q, |m| Some((m.kind, m.iteration)), kind, iteration)?;
        got.sort_by_key(|m| m.sender);
        self.delivered += got.len();
        Ok(got)
    }

    fn pending(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    fn delivered(&self) -> usize {
        self.delivered
    }
}

/// Serializes every message through the binary codec.
#[derive(Debug, Default)]
pub struct WireTransport {
    queues: BTreeMap<usize, VecDeque<Vec<u8>>>,
    delivered: usize,
    bytes: usize,
}

impl WireTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for WireTransport {
    fn send(&mut self, message: ExchangeMessage) -> Result<()> {
        let bytes = message.to_bytes()?;
        self.bytes += bytes.len();
        self.queues.entry(message.receiver as usize).or_default().push_back(bytes);
        Ok(())
    }

    fn receive(&mut self, receiver: usize, kind: MessageKind, iteration: u32) -> Result<Vec<ExchangeMessage>> {
        let q = self.queues.entry(receiver).or_default();
        let raw = take_matching(
            q,
            |b| {
                let k = MessageKind::from_code(*b.first()?).ok()?;
                let it = u32::from_le_bytes(b.get(5..9)?.try_into().ok()?);
                Some((k, it))
            },
            kind,
            iteration,
        )?;
        let mut got = raw.iter().map(|b| ExchangeMessage::from_bytes(b)).collect::<Result<Vec<_>>>()?;
        got.sort_by_key(|m| m.sender);
        self.delivered += got.len();
        Ok(got)
    }

    fn pending(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    fn delivered(&self) -> usize {
        self.delivered
    }

    fn bytes(&self) -> usize {
        self.bytes
    }
}

/// ADMM variables of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentExchangeState {
    pub v: DVector<f64>,
    /// `z_ij^s` per neighbor `j`, one entry per scenario.
    pub estimates: BTreeMap<usize, Vec<DVector<f64>>>,
    /// `Lambda_ij^s`, same shape as `estimates`.
    pub multipliers: BTreeMap<usize, Vec<DVector<f64>>>,
    /// Own predicted trajectories after the latest SUS.
    pub trajectories: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
}

impl AgentExchangeState {
    /// Estimates of scenario `s` keyed by neighbor.
    pub fn estimates_of(&self, s: usize) -> NeighborTrajectories {
        self.estimates.iter().map(|(&j, z)| (j, z[s].clone())).collect()
    }

    fn estimate_sets(&self, scenarios: usize) -> Vec<NeighborTrajectories> {
        if self.estimates.is_empty() {
            return Vec::new();
        }
        (0..scenarios).map(|s| self.estimates_of(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeState {
    pub agents: Vec<AgentExchangeState>,
    pub iteration: usize,
}

/// Initial state: `z_ij^s` set to `initial[i][j]` for every scenario, multipliers zero.
pub fn initial_state(
    agents: &[AgentModel],
    predictions: &[PredictionOperator],
    initial: &[NeighborTrajectories],
) -> Result<ExchangeState> {
    let mut out = Vec::with_capacity(agents.len());
    for (i, ag) in agents.iter().enumerate() {
        let s = predictions[i].len();
        let mut estimates = BTreeMap::new();
        let mut multipliers = BTreeMap::new();
        for j in ag.neighbors() {
            let z0 = initial[i].get(&j).ok_or(Error::MissingNeighborState(j))?;
            estimates.insert(j, vec![z0.clone(); s]);
            multipliers.insert(j, vec![DVector::zeros(z0.len()); s]);
        }
        out.push(AgentExchangeState {
            v: DVector::zeros(predictions[i].decision_dim()),
            estimates,
            multipliers,
            trajectories: Vec::new(),
            residuals: Vec::new(),
        });
    }
    Ok(ExchangeState { agents: out, iteration: 0 })
}

/// Primal update: minimizes the local augmented Lagrangian over `v_i`.
pub fn primal_update(
    agent: &AgentModel,
    prediction: &PredictionOperator,
    cost: &PredictionOperator,
    state: &AgentExchangeState,
    incoming: &[Incoming],
    mu: f64,
    settings: &QpSettings,
) -> Result<DVector<f64>> {
    let est = state.estimate_sets(prediction.len());
    let program = build_local_primal(agent, prediction, cost, &est, incoming, mu)?;
    let sol = program.solve(settings)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.x),
        QpStatus::MaxIterations => {
            log::warn!(
                "primal update of agent {} stopped at the iteration cap (residual {:.2e})",
                agent.index,
                sol.primal_residual
            );
            Ok(sol.x)
        }
        QpStatus::Infeasible | QpStatus::Unbounded => Err(Error::SubproblemInfeasible { agent: agent.index }),
    }
}

/// Scenario updating steps: one rollout per scenario with the estimates held fixed.
pub fn sus_update(
    prediction: &PredictionOperator,
    v: &DVector<f64>,
    estimates: &BTreeMap<usize, Vec<DVector<f64>>>,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(prediction.len());
    for (s, sp) in prediction.scenarios.iter().enumerate() {
        let z: NeighborTrajectories = estimates.iter().map(|(&j, zz)| (j, zz[s].clone())).collect();
        out.push(sp.states(v, &z)?);
    }
    Ok(out)
}

/// Projection of every scenario's estimates onto the agent's feasible set.
pub fn projection_update(
    agent: &AgentModel,
    prediction: &PredictionOperator,
    v: &DVector<f64>,
    received: &BTreeMap<usize, Vec<DVector<f64>>>,
    multipliers: &BTreeMap<usize, Vec<DVector<f64>>>,
    mu: f64,
    settings: &QpSettings,
) -> Result<BTreeMap<usize, Vec<DVector<f64>>>> {
    let mut out: BTreeMap<usize, Vec<DVector<f64>>> =
        prediction.neighbor_dims.keys().map(|&j| (j, Vec::with_capacity(prediction.len()))).collect();
    for s in 0..prediction.len() {
        let mut xj = NeighborTrajectories::new();
        let mut lam = NeighborTrajectories::new();
        for &j in prediction.neighbor_dims.keys() {
            xj.insert(j, received.get(&j).ok_or(Error::MissingNeighborState(j))?[s].clone());
            lam.insert(j, multipliers.get(&j).ok_or(Error::MissingNeighborState(j))?[s].clone());
        }
        let program = build_projection(agent, prediction, s, v, &xj, &lam, mu)?;
        let z = solve_projection(&program, settings)?;
        for (blk, j) in program.layout.iter().zip(prediction.neighbor_dims.keys()) {
            out.get_mut(j).unwrap().push(z.rows(blk.start, blk.len).into_owned());
        }
    }
    Ok(out)
}

/// `Lambda + mu (z - x)`.
pub fn dual_update(
    multiplier: &DVector<f64>,
    estimate: &DVector<f64>,
    trajectory: &DVector<f64>,
    mu: f64,
) -> DVector<f64> {
    multiplier + (estimate - trajectory) * mu
}

/// `sum_j sum_s (mu/2) ||z_j^s - x_j^s||^2`.
pub fn residual(
    estimates: &BTreeMap<usize, Vec<DVector<f64>>>,
    trajectories: &BTreeMap<usize, Vec<DVector<f64>>>,
    mu: f64,
) -> f64 {
    let mut total = 0.0;
    for (j, zs) in estimates {
        if let Some(xs) = trajectories.get(j) {
            for (z, x) in zs.iter().zip(xs) {
                total += 0.5 * mu * (z - x).norm_squared();
            }
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct ExchangeOutcome {
    pub v: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Per iteration, the residual of every agent.
    pub residual_history: Vec<Vec<f64>>,
    pub state: ExchangeState,
    pub messages: usize,
    pub bytes: usize,
    /// Penalty used in the augmented Lagrangian.
    pub penalty: f64,
}

impl ExchangeOutcome {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().map_or(0.0, |r| r.iter().sum())
    }

    /// Largest `|z_ij^s - x_j^s|` over all agents, neighbors and scenarios.
    pub fn max_consensus_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for a in &self.state.agents {
            for (j, zs) in &a.estimates {
                for (z, x) in zs.iter().zip(&self.state.agents[*j].trajectories) {
                    gap = gap.max((z - x).amax());
                }
            }
        }
        gap
    }
}

fn map_agents<T: Send>(
    order: &[usize],
    parallel: bool,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let mut slots: Vec<Option<T>> = (0..order.len()).map(|_| None).collect();
    if parallel {
        let res: Vec<(usize, Result<T>)> = order.par_iter().map(|&i| (i, f(i))).collect();
        for (i, r) in res {
            slots[i] = Some(r?);
        }
    } else {
        for &i in order {
            slots[i] = Some(f(i)?);
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("every agent evaluated")).collect())
}

fn followers(agents: &[AgentModel], i: usize) -> Vec<usize> {
    (0..agents.len()).filter(|&k| agents[k].coupling(i).is_some()).collect()
}

fn payload_map(messages: Vec<ExchangeMessage>) -> BTreeMap<usize, Vec<DVector<f64>>> {
    messages.into_iter().map(|m| (m.sender as usize, m.payload)).collect()
}

/// Runs the scenario exchange until every agent's residual is below the tolerance or
/// the iteration cap is reached.
///
/// `agents[i].index` must equal `i`; coupled agents must hold the same number of
/// constraint scenarios.
pub fn run_exchange(
    agents: &[AgentModel],
    predictions: &[PredictionOperator],
    costs: &[PredictionOperator],
    initial: &[NeighborTrajectories],
    config: &ExchangeConfig,
    transport: &mut dyn Transport,
) -> Result<ExchangeOutcome> {
    config.validate()?;
    let n = agents.len();
    if predictions.len() != n || costs.len() != n || initial.len() != n {
        return Err(Error::DimensionMismatch("one prediction, cost set and initial estimate per agent".into()));
    }
    for (i, ag) in agents.iter().enumerate() {
        if ag.index != i {
            return Err(Error::InvalidModel(format!("agent at position {i} has index {}", ag.index)));
        }
        for j in ag.neighbors() {
            if j >= n {
                return Err(Error::UnknownAgent(j));
            }
            if predictions[j].len() != predictions[i].len() {
                return Err(Error::DimensionMismatch(format!(
                    "agents {i} and {j} hold {} and {} scenarios",
                    predictions[i].len(),
                    predictions[j].len()
                )));
            }
        }
    }
    let order: Vec<usize> = match &config.order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::InvalidModel("evaluation order must be a permutation of the agents".into()));
            }
            o.clone()
        }
        None => (0..n).collect(),
    };
    let follower_sets: Vec<Vec<usize>> = (0..n).map(|i| followers(agents, i)).collect();
    match config.variant {
        ExchangeVariant::Consensus => {
            consensus::run(agents, predictions, costs, initial, config, transport, &order, &follower_sets)
        }
        ExchangeVariant::Projection => {
            run_projection(agents, predictions, costs, initial, config, transport, &order, &follower_sets)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_projection(
    agents: &[AgentModel],
    predictions: &[PredictionOperator],
    costs: &[PredictionOperator],
    initial: &[NeighborTrajectories],
    config: &ExchangeConfig,
    transport: &mut dyn Transport,
    order: &[usize],
    follower_sets: &[Vec<usize>],
) -> Result<ExchangeOutcome> {
    let n = agents.len();
    let mu = config.mu;
    let mut state = initial_state(agents, predictions, initial)?;
    let sent_before = transport.delivered();

    // Followers announce their initial estimates and multipliers.
    for &k in order {
        for (&j, z) in &state.agents[k].estimates {
            transport.send(ExchangeMessage {
                kind: MessageKind::EstimateBroadcast,
                sender: k as u16,
                receiver: j as u16,
                iteration: 0,
                payload: z.clone(),
            })?;
            transport.send(ExchangeMessage {
                kind: MessageKind::MultiplierBroadcast,
                sender: k as u16,
                receiver: j as u16,
                iteration: 0,
                payload: state.agents[k].multipliers[&j].clone(),
            })?;
        }
    }

    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut last_total = f64::INFINITY;
    for l in 0..config.max_iterations {
        let tag = l as u32;

        // Primal updates.
        let mut incoming: Vec<Vec<Incoming>> = Vec::with_capacity(n);
        for i in 0..n {
            let est = payload_map(transport.receive(i, MessageKind::EstimateBroadcast, tag)?);
            let mut lam = payload_map(transport.receive(i, MessageKind::MultiplierBroadcast, tag)?);
            let mut inc = Vec::with_capacity(est.len());
            for (k, z) in est {
                let m = lam.remove(&k).ok_or_else(|| Error::Protocol(format!("no multipliers from {k}")))?;
                inc.push(Incoming { follower: k, estimates: z, multipliers: m });
            }
            incoming.push(inc);
        }
        let vs = map_agents(order, config.parallel, |i| {
            primal_update(&agents[i], &predictions[i], &costs[i], &state.agents[i], &incoming[i], mu, &config.qp)
        })?;

        // SUS and scenario broadcast.
        let trajs =
            map_agents(order, config.parallel, |i| sus_update(&predictions[i], &vs[i], &state.agents[i].estimates))?;
        for &i in order {
            state.agents[i].v = vs[i].clone();
            state.agents[i].trajectories = trajs[i].clone();
            for &k in &follower_sets[i] {
                transport.send(ExchangeMessage {
                    kind: MessageKind::ScenarioSetBroadcast,
                    sender: i as u16,
                    receiver: k as u16,
                    iteration: tag,
                    payload: trajs[i].clone(),
                })?;
            }
        }

        // Projections and multiplier updates.
        let mut received = Vec::with_capacity(n);
        for i in 0..n {
            received.push(payload_map(transport.receive(i, MessageKind::ScenarioSetBroadcast, tag)?));
        }
        let projected = map_agents(order, config.parallel, |i| {
            let st = &state.agents[i];
            projection_update(&agents[i], &predictions[i], &st.v, &received[i], &st.multipliers, mu, &config.qp)
        })?;
        let mut etas = vec![0.0; n];
        for &i in order {
            let st = &mut state.agents[i];
            let before = residual(&st.estimates, &received[i], mu);
            let after = residual(&projected[i], &received[i], mu);
            for (j, zs) in &projected[i] {
                let lams = st.multipliers.get_mut(j).unwrap();
                for (s, z) in zs.iter().enumerate() {
                    lams[s] = dual_update(&lams[s], z, &received[i][j][s], mu);
                }
            }
            st.estimates = projected[i].clone();
            etas[i] = before.max(after);
            st.residuals.push(etas[i]);
        }
        let total: f64 = etas.iter().sum();
        if total > 1.1 * last_total && last_total > 0.0 {
            log::debug!("exchange residual rose from {last_total:.3e} to {total:.3e} at iteration {l}");
        }
        last_total = total;
        history.push(etas.clone());
        state.iteration = l + 1;
        if etas.iter().all(|&e| e <= config.tolerance) {
            converged = true;
            break;
        }

        // Estimates and multipliers go back to the neighbors for the next primal step.
        for &i in order {
            for (&j, z) in &state.agents[i].estimates {
                transport.send(ExchangeMessage {
                    kind: MessageKind::EstimateBroadcast,
                    sender: i as u16,
                    receiver: j as u16,
                    iteration: tag + 1,
                    payload: z.clone(),
                })?;
                transport.send(ExchangeMessage {
                    kind: MessageKind::MultiplierBroadcast,
                    sender: i as u16,
                    receiver: j as u16,
                    iteration: tag + 1,
                    payload: state.agents[i].multipliers[&j].clone(),
                })?;
            }
        }
    }
    if !converged {
        // Drain the messages staged for an iteration that never ran.
        let tag = state.iteration as u32;
        for i in 0..n {
            transport.receive(i, MessageKind::EstimateBroadcast, tag)?;
            transport.receive(i, MessageKind::MultiplierBroadcast, tag)?;
        }
        log::warn!("scenario exchange stopped after {} iterations with residual {:.3e}", state.iteration, last_total);
    }
    let messages = transport.delivered() - sent_before;
    if transport.pending() != 0 {
        return Err(Error::Protocol(format!("{} messages left unconsumed", transport.pending())));
    }
    Ok(ExchangeOutcome {
        v: state.agents.iter().map(|a| a.v.clone()).collect(),
        iterations: state.iteration,
        converged,
        residual_history: history,
        state,
        messages,
        bytes: transport.bytes(),
        penalty: config.mu,
    })
}
