//! Condensed predictions and the QP instances built from them.
//!
//! Trajectories are stacked as `x_1 .. x_T` (states) and `u_0 .. u_{T-1}` (inputs) with
//! `u_l = K x_l + v_l`. A neighbor trajectory `z_j` holds `x_{j,1} .. x_{j,T}`; the
//! measured `x_{j,0}` is fixed when the prediction is condensed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentModel, UncertainSystem, ZERO_TOL};
use crate::qp::{self, QpSettings, QpSolution, QuadraticProgram};
use crate::scenario::Scenario;
use crate::softcomm::{self, ReliabilityBox};

/// Neighbor trajectories (or estimates) of one scenario, keyed by neighbor index.
pub type NeighborTrajectories = BTreeMap<usize, DVector<f64>>;

/// Affine prediction of one scenario: `X = states_v v + sum_j states_z[j] z_j + states_0`,
/// and likewise for the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPrediction {
    pub states_v: DMatrix<f64>,
    pub states_z: BTreeMap<usize, DMatrix<f64>>,
    pub states_0: DVector<f64>,
    pub inputs_v: DMatrix<f64>,
    pub inputs_z: BTreeMap<usize, DMatrix<f64>>,
    pub inputs_0: DVector<f64>,
}

impl ScenarioPrediction {
    fn check_z(&self, z: &NeighborTrajectories) -> Result<()> {
        for (j, m) in &self.states_z {
            match z.get(j) {
                Some(zj) if zj.len() == m.ncols() => {}
                Some(_) => return Err(Error::DimensionMismatch(format!("trajectory of neighbor {j}"))),
                None => return Err(Error::MissingNeighborState(*j)),
            }
        }
        Ok(())
    }

    /// State offset with neighbor trajectories fixed.
    pub fn state_offset(&self, z: &NeighborTrajectories) -> Result<DVector<f64>> {
        self.check_z(z)?;
        let mut c = self.states_0.clone();
        for (j, m) in &self.states_z {
            c.gemv(1.0, m, &z[j], 1.0);
        }
        Ok(c)
    }

    pub fn input_offset(&self, z: &NeighborTrajectories) -> Result<DVector<f64>> {
        self.check_z(z)?;
        let mut c = self.inputs_0.clone();
        for (j, m) in &self.inputs_z {
            c.gemv(1.0, m, &z[j], 1.0);
        }
        Ok(c)
    }

    pub fn states(&self, v: &DVector<f64>, z: &NeighborTrajectories) -> Result<DVector<f64>> {
        Ok(&self.states_v * v + self.state_offset(z)?)
    }

    pub fn inputs(&self, v: &DVector<f64>, z: &NeighborTrajectories) -> Result<DVector<f64>> {
        Ok(&self.inputs_v * v + self.input_offset(z)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOperator {
    pub agent: usize,
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub x0: DVector<f64>,
    /// Neighbor state dimension per neighbor.
    pub neighbor_dims: BTreeMap<usize, usize>,
    pub scenarios: Vec<ScenarioPrediction>,
}

impl PredictionOperator {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn decision_dim(&self) -> usize {
        self.horizon * self.nu
    }
}

/// Unrolls the agent dynamics over each scenario.
///
/// `neighbor_x0` must hold the measured state of every coupled neighbor.
pub fn condense(
    agent: &AgentModel,
    x0: &DVector<f64>,
    neighbor_x0: &NeighborTrajectories,
    scenarios: &[Scenario],
) -> Result<PredictionOperator> {
    let (nx, nu, t) = (agent.nx, agent.nu, agent.horizon);
    if x0.len() != nx {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries, agent {} has {nx} states",
            x0.len(),
            agent.index
        )));
    }
    for cpl in &agent.couplings {
        match neighbor_x0.get(&cpl.neighbor) {
            Some(x) if x.len() == cpl.matrix.ncols() => {}
            Some(_) => return Err(Error::DimensionMismatch(format!("initial state of neighbor {}", cpl.neighbor))),
            None => return Err(Error::MissingNeighborState(cpl.neighbor)),
        }
    }
    let neighbor_dims: BTreeMap<usize, usize> =
        agent.couplings.iter().map(|c| (c.neighbor, c.matrix.ncols())).collect();
    let mut out = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        if sc.horizon() != t || sc.delta.len() != t {
            return Err(Error::DimensionMismatch(format!("scenario horizon {} differs from {t}", sc.horizon())));
        }
        let mut sv = DMatrix::zeros(t * nx, t * nu);
        let mut s0 = DVector::zeros(t * nx);
        let mut iv = DMatrix::zeros(t * nu, t * nu);
        let mut i0 = DVector::zeros(t * nu);
        let mut sz: BTreeMap<usize, DMatrix<f64>> =
            neighbor_dims.iter().map(|(&j, &n)| (j, DMatrix::zeros(t * nx, t * n))).collect();
        let mut iz: BTreeMap<usize, DMatrix<f64>> =
            neighbor_dims.iter().map(|(&j, &n)| (j, DMatrix::zeros(t * nu, t * n))).collect();

        let mut mv = DMatrix::zeros(nx, t * nu);
        let mut m0 = x0.clone();
        let mut mz: BTreeMap<usize, DMatrix<f64>> =
            neighbor_dims.iter().map(|(&j, &n)| (j, DMatrix::zeros(nx, t * n))).collect();
        for l in 0..t {
            let d = &sc.delta[l];
            if d.len() != agent.delta_dim() || sc.w[l].len() != agent.nw {
                return Err(Error::DimensionMismatch(format!("scenario step {l} sizes")));
            }
            let a = agent.a_self.eval(d);
            let b = agent.b.eval(d);

            // Inputs at step l.
            let mut uv = &agent.k * &mv;
            for c in 0..nu {
                uv[(c, l * nu + c)] += 1.0;
            }
            let u0 = &agent.k * &m0;
            iv.rows_mut(l * nu, nu).copy_from(&uv);
            i0.rows_mut(l * nu, nu).copy_from(&u0);
            let mut uz = BTreeMap::new();
            for (j, m) in &mz {
                let k = &agent.k * m;
                iz.get_mut(j).unwrap().rows_mut(l * nu, nu).copy_from(&k);
                uz.insert(*j, k);
            }

            // State at step l + 1.
            mv = &a * &mv + &b * &uv;
            m0 = &a * &m0 + &b * &u0 + agent.c.apply(d, &sc.w[l]);
            for cpl in &agent.couplings {
                let j = cpl.neighbor;
                let nj = neighbor_dims[&j];
                let aij = cpl.matrix.eval(d);
                let mut next = &a * &mz[&j] + &b * &uz[&j];
                if l == 0 {
                    m0 += &aij * &neighbor_x0[&j];
                } else {
                    let mut blk = next.columns_mut((l - 1) * nj, nj);
                    blk += &aij;
                }
                mz.insert(j, next);
            }
            sv.rows_mut(l * nx, nx).copy_from(&mv);
            s0.rows_mut(l * nx, nx).copy_from(&m0);
            for (j, m) in &mz {
                sz.get_mut(j).unwrap().rows_mut(l * nx, nx).copy_from(m);
            }
        }
        out.push(ScenarioPrediction {
            states_v: sv,
            states_z: sz,
            states_0: s0,
            inputs_v: iv,
            inputs_z: iz,
            inputs_0: i0,
        });
    }
    Ok(PredictionOperator { agent: agent.index, nx, nu, horizon: t, x0: x0.clone(), neighbor_dims, scenarios: out })
}

/// Step-by-step rollout of one scenario; the reference for [`condense`].
pub fn rollout(
    agent: &AgentModel,
    x0: &DVector<f64>,
    neighbor_x0: &NeighborTrajectories,
    scenario: &Scenario,
    v: &DVector<f64>,
    z: &NeighborTrajectories,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (nx, nu, t) = (agent.nx, agent.nu, agent.horizon);
    let mut xs = DVector::zeros(t * nx);
    let mut us = DVector::zeros(t * nu);
    let mut x = x0.clone();
    for l in 0..t {
        let u = &agent.k * &x + v.rows(l * nu, nu);
        let mut nb = BTreeMap::new();
        for cpl in &agent.couplings {
            let j = cpl.neighbor;
            let n = cpl.matrix.ncols();
            let xj = if l == 0 {
                neighbor_x0.get(&j).cloned().ok_or(Error::MissingNeighborState(j))?
            } else {
                z.get(&j).ok_or(Error::MissingNeighborState(j))?.rows((l - 1) * n, n).into_owned()
            };
            nb.insert(j, xj);
        }
        let next = crate::model::step_agent(agent, &x, &u, &nb, &scenario.w[l], &scenario.delta[l])?;
        us.rows_mut(l * nu, nu).copy_from(&u);
        xs.rows_mut(l * nx, nx).copy_from(&next);
        x = next;
    }
    Ok((xs, us))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgramKind {
    Centralized,
    LocalPrimal,
    Projection,
    RobustLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    State,
    Input,
}

/// Provenance of one inequality row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub kind: RowKind,
    /// `None` for rows shared by all scenarios.
    pub scenario: Option<usize>,
    /// Prediction step the row constrains (`x_step` or `u_step`).
    pub step: usize,
    /// Row of the agent's polytope.
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ProgramInstance {
    pub kind: ProgramKind,
    pub agent: Option<usize>,
    pub qp: QuadraticProgram,
    /// Added to the QP objective to recover the program's cost.
    pub constant: f64,
    pub layout: Vec<Block>,
    pub labels: Vec<RowLabel>,
    pub constraint_scenarios: usize,
    pub cost_scenarios: usize,
}

impl ProgramInstance {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.qp.objective(x) + self.constant
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution> {
        qp::solve(&self.qp, settings)
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Dense human-readable dump.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "program {:?} agent {:?}", self.kind, self.agent);
        let _ = writeln!(
            s,
            "variables {}  rows {}  constraint scenarios {}  cost scenarios {}",
            self.qp.dim(),
            self.rows(),
            self.constraint_scenarios,
            self.cost_scenarios
        );
        for b in &self.layout {
            let _ = writeln!(s, "block {} [{}..{})", b.name, b.start, b.start + b.len);
        }
        let _ = writeln!(s, "constant {:.10e}", self.constant);
        let _ = writeln!(s, "hessian");
        for r in 0..self.qp.hessian.nrows() {
            let row: Vec<String> = self.qp.hessian.row(r).iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "  {}", row.join(" "));
        }
        let lin: Vec<String> = self.qp.linear.iter().map(|v| format!("{v:.6e}")).collect();
        let _ = writeln!(s, "linear\n  {}", lin.join(" "));
        let _ = writeln!(s, "inequalities");
        for (r, label) in self.labels.iter().enumerate() {
            let coef: Vec<String> = self.qp.a_in.row(r).iter().map(|v| format!("{v:.6e}")).collect();
            let sc = label.scenario.map_or("*".to_string(), |s| s.to_string());
            let _ = writeln!(
                s,
                "  {:?} s={} l={} r={} : {} <= {:.6e}",
                label.kind,
                sc,
                label.step,
                label.row,
                coef.join(" "),
                self.qp.b_in[r]
            );
        }
        s
    }
}

/// Accumulates `1/2 x' H x + f' x + c`.
struct QuadForm {
    h: DMatrix<f64>,
    f: DVector<f64>,
    c: f64,
}

impl QuadForm {
    fn new(n: usize) -> Self {
        Self { h: DMatrix::zeros(n, n), f: DVector::zeros(n), c: 0.0 }
    }

    /// Adds `scale (M x + r)' W (M x + r)`.
    fn add_weighted(&mut self, m: &DMatrix<f64>, r: &DVector<f64>, w: &DMatrix<f64>, scale: f64) {
        let wm = w * m;
        self.h.gemm_tr(2.0 * scale, m, &wm, 1.0);
        self.f.gemv_tr(2.0 * scale, &wm, r, 1.0);
        self.c += scale * r.dot(&(w * r));
    }

    /// Adds `scale ||M x + r||^2`.
    fn add_squares(&mut self, m: &DMatrix<f64>, r: &DVector<f64>, scale: f64) {
        self.h.gemm_tr(2.0 * scale, m, m, 1.0);
        self.f.gemv_tr(2.0 * scale, m, r, 1.0);
        self.c += scale * r.norm_squared();
    }

    fn symmetrized(mut self) -> Self {
        let ht = self.h.transpose();
        self.h = (&self.h + ht) * 0.5;
        self
    }
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut m = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        m.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    m
}

fn state_weight(agent: &AgentModel) -> DMatrix<f64> {
    let mut blocks: Vec<&DMatrix<f64>> = vec![&agent.q; agent.horizon];
    blocks[agent.horizon - 1] = &agent.p;
    block_diag(&blocks)
}

fn input_weight(agent: &AgentModel) -> DMatrix<f64> {
    block_diag(&vec![&agent.r; agent.horizon])
}

/// `(1/S) sum_s [ sum_{l<T} (x_l' Q x_l + u_l' R u_l) + x_T' P x_T ]` over the given
/// `(states, inputs)` trajectories, all starting at `x0`.
pub fn empirical_cost(
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
    trajectories: &[(DVector<f64>, DVector<f64>)],
) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let nx = q.nrows();
    let nu = r.nrows();
    let mut total = 0.0;
    for (xs, us) in trajectories {
        let t = xs.len() / nx;
        let mut j = x0.dot(&(q * x0));
        for l in 0..t {
            let x = xs.rows(l * nx, nx);
            let w = if l + 1 == t { p } else { q };
            j += x.dot(&(w * x));
            let u = us.rows(l * nu, nu);
            j += u.dot(&(r * u));
        }
        total += j;
    }
    total / trajectories.len() as f64
}

/// Empirical cost of `v` over the cost scenarios of `pred`, pairing cost scenario `s`
/// with `estimates[s % len]`.
pub fn predicted_cost(
    agent: &AgentModel,
    pred: &PredictionOperator,
    v: &DVector<f64>,
    estimates: &[NeighborTrajectories],
) -> Result<f64> {
    let empty = NeighborTrajectories::new();
    let mut trajs = Vec::with_capacity(pred.len());
    for (s, sp) in pred.scenarios.iter().enumerate() {
        let z = if estimates.is_empty() { &empty } else { &estimates[s % estimates.len()] };
        trajs.push((sp.states(v, z)?, sp.inputs(v, z)?));
    }
    Ok(empirical_cost(&agent.q, &agent.r, &agent.p, &pred.x0, &trajs))
}

fn cost_form(agent: &AgentModel, cost: &PredictionOperator, estimates: &[NeighborTrajectories]) -> Result<QuadForm> {
    let n = cost.decision_dim();
    let mut form = QuadForm::new(n);
    if cost.is_empty() {
        return Ok(form);
    }
    let wx = state_weight(agent);
    let wu = input_weight(agent);
    let scale = 1.0 / cost.len() as f64;
    let empty = NeighborTrajectories::new();
    for (s, sp) in cost.scenarios.iter().enumerate() {
        let z = if estimates.is_empty() { &empty } else { &estimates[s % estimates.len()] };
        form.add_weighted(&sp.states_v, &sp.state_offset(z)?, &wx, scale);
        form.add_weighted(&sp.inputs_v, &sp.input_offset(z)?, &wu, scale);
    }
    form.c += cost.x0.dot(&(&agent.q * &cost.x0));
    Ok(form)
}

fn k_is_zero(agent: &AgentModel) -> bool {
    agent.k.amax() < ZERO_TOL
}

/// Inequality rows of the agent's scenario program in `v`.
///
/// `estimates[s]` fixes the neighbor trajectories of scenario `s`; `state_tightening[s]`
/// (when given) is subtracted from the right-hand side of each state row, ordered as
/// the rows are emitted (step-major, then polytope row).
fn local_rows(
    agent: &AgentModel,
    pred: &PredictionOperator,
    estimates: &[NeighborTrajectories],
    state_tightening: Option<&[DVector<f64>]>,
    input_tightening: Option<&[DVector<f64>]>,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<RowLabel>)> {
    let (nx, nu, t) = (pred.nx, pred.nu, pred.horizon);
    let g = &agent.state_set;
    let h = &agent.input_set;
    let shared_inputs = k_is_zero(agent);
    let per_state = t * g.rows();
    let per_input = if t > 1 { (t - 1) * h.rows() } else { 0 };
    let scen = pred.len();
    let rows = scen * per_state + h.rows() + if shared_inputs { per_input } else { scen * per_input };
    let mut a = DMatrix::zeros(rows, t * nu);
    let mut b = DVector::zeros(rows);
    let mut labels = Vec::with_capacity(rows);
    let mut r = 0;

    // Time-0 input: u_0 = K x0 + v_0, shared by every scenario.
    let u00 = &agent.k * &pred.x0;
    for hr in 0..h.rows() {
        for c in 0..nu {
            a[(r, c)] = h.a[(hr, c)];
        }
        b[r] = h.b[hr] - h.a.row(hr).dot(&u00.transpose());
        labels.push(RowLabel { kind: RowKind::Input, scenario: None, step: 0, row: hr });
        r += 1;
    }
    if shared_inputs {
        for l in 1..t {
            for hr in 0..h.rows() {
                for c in 0..nu {
                    a[(r, l * nu + c)] = h.a[(hr, c)];
                }
                b[r] = h.b[hr];
                labels.push(RowLabel { kind: RowKind::Input, scenario: None, step: l, row: hr });
                r += 1;
            }
        }
    }
    let empty = NeighborTrajectories::new();
    for (s, sp) in pred.scenarios.iter().enumerate() {
        let z = if estimates.is_empty() { &empty } else { &estimates[s] };
        let off = sp.state_offset(z)?;
        let mut k = 0;
        for l in 0..t {
            let phi = sp.states_v.rows(l * nx, nx);
            let c = off.rows(l * nx, nx);
            let ga = &g.a * phi;
            let gc = &g.a * c;
            for gr in 0..g.rows() {
                a.row_mut(r).copy_from(&ga.row(gr));
                let tight = state_tightening.map_or(0.0, |tt| tt[s][k]);
                b[r] = g.b[gr] - gc[gr] - tight;
                labels.push(RowLabel { kind: RowKind::State, scenario: Some(s), step: l + 1, row: gr });
                r += 1;
                k += 1;
            }
        }
        if !shared_inputs {
            let uoff = sp.input_offset(z)?;
            let mut k = 0;
            for l in 1..t {
                let psi = sp.inputs_v.rows(l * nu, nu);
                let c = uoff.rows(l * nu, nu);
                let ha = &h.a * psi;
                let hc = &h.a * c;
                for hr in 0..h.rows() {
                    a.row_mut(r).copy_from(&ha.row(hr));
                    let tight = input_tightening.map_or(0.0, |tt| tt[s][k]);
                    b[r] = h.b[hr] - hc[hr] - tight;
                    labels.push(RowLabel { kind: RowKind::Input, scenario: Some(s), step: l, row: hr });
                    r += 1;
                    k += 1;
                }
            }
        }
    }
    debug_assert_eq!(r, rows);
    Ok((a, b, labels))
}

fn v_layout(pred: &PredictionOperator) -> Vec<Block> {
    (0..pred.horizon).map(|l| Block { name: format!("v_{l}"), start: l * pred.nu, len: pred.nu }).collect()
}

/// Centralized scenario program in `v` for the whole system.
pub fn build_centralized(
    system: &UncertainSystem,
    x0: &DVector<f64>,
    constraint_scenarios: &[Scenario],
    cost_scenarios: &[Scenario],
) -> Result<ProgramInstance> {
    let agent = AgentModel::from_system(system);
    let none = NeighborTrajectories::new();
    let pred = condense(&agent, x0, &none, constraint_scenarios)?;
    let cost = condense(&agent, x0, &none, cost_scenarios)?;
    let (a, b, labels) = local_rows(&agent, &pred, &[], None, None)?;
    let form = cost_form(&agent, &cost, &[])?.symmetrized();
    Ok(ProgramInstance {
        kind: ProgramKind::Centralized,
        agent: None,
        qp: QuadraticProgram::new(form.h, form.f).with_inequalities(a, b),
        constant: form.c,
        layout: v_layout(&pred),
        labels,
        constraint_scenarios: constraint_scenarios.len(),
        cost_scenarios: cost_scenarios.len(),
    })
}

/// Estimates and multipliers one follower holds about this agent's trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Incoming {
    pub follower: usize,
    /// `z_ji^s` per constraint scenario.
    pub estimates: Vec<DVector<f64>>,
    /// `Lambda_ji^s` per constraint scenario.
    pub multipliers: Vec<DVector<f64>>,
}

/// Primal subproblem of the scenario exchange: local empirical cost plus the
/// augmented-Lagrangian penalty of every follower's estimate of this agent.
pub fn build_local_primal(
    agent: &AgentModel,
    pred: &PredictionOperator,
    cost: &PredictionOperator,
    estimates: &[NeighborTrajectories],
    incoming: &[Incoming],
    mu: f64,
) -> Result<ProgramInstance> {
    if !agent.couplings.is_empty() && estimates.len() != pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimate sets for {} scenarios",
            estimates.len(),
            pred.len()
        )));
    }
    let (a, b, labels) = local_rows(agent, pred, estimates, None, None)?;
    let mut form = cost_form(agent, cost, estimates)?;
    let empty = NeighborTrajectories::new();
    for inc in incoming {
        if inc.estimates.len() != pred.len() || inc.multipliers.len() != pred.len() {
            return Err(Error::DimensionMismatch(format!("messages from follower {}", inc.follower)));
        }
        for (s, sp) in pred.scenarios.iter().enumerate() {
            let z = if estimates.is_empty() { &empty } else { &estimates[s] };
            // (mu/2) || X v + c - z + Lambda/mu ||^2
            let r = sp.state_offset(z)? - &inc.estimates[s] - &inc.multipliers[s] / mu;
            form.add_squares(&sp.states_v, &r, 0.5 * mu);
        }
    }
    let form = form.symmetrized();
    Ok(ProgramInstance {
        kind: ProgramKind::LocalPrimal,
        agent: Some(agent.index),
        qp: QuadraticProgram::new(form.h, form.f).with_inequalities(a, b),
        constant: form.c,
        layout: v_layout(pred),
        labels,
        constraint_scenarios: pred.len(),
        cost_scenarios: cost.len(),
    })
}

/// Projection of scenario `s`: the agent's estimates `z_ij^s` of all its neighbors,
/// pulled toward `x_j^s - Lambda_ij^s / mu` subject to the agent's own constraints
/// with `v` fixed.
pub fn build_projection(
    agent: &AgentModel,
    pred: &PredictionOperator,
    s: usize,
    v: &DVector<f64>,
    neighbor_trajectories: &NeighborTrajectories,
    multipliers: &NeighborTrajectories,
    mu: f64,
) -> Result<ProgramInstance> {
    let sp = pred.scenarios.get(s).ok_or_else(|| Error::DimensionMismatch(format!("scenario {s}")))?;
    let (nx, nu, t) = (pred.nx, pred.nu, pred.horizon);
    let mut layout = Vec::new();
    let mut start = 0;
    for (&j, &nj) in &pred.neighbor_dims {
        layout.push(Block { name: format!("z_{}{}^{}", agent.index, j, s), start, len: t * nj });
        start += t * nj;
    }
    let n = start;
    let mut h = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    let mut constant = 0.0;
    for (blk, &j) in layout.iter().zip(pred.neighbor_dims.keys()) {
        let xj = neighbor_trajectories.get(&j).ok_or(Error::MissingNeighborState(j))?;
        let lam = multipliers.get(&j).ok_or(Error::MissingNeighborState(j))?;
        if xj.len() != blk.len || lam.len() != blk.len {
            return Err(Error::DimensionMismatch(format!("trajectory of neighbor {j}")));
        }
        let target = xj - lam / mu;
        for k in 0..blk.len {
            h[(blk.start + k, blk.start + k)] = mu;
            f[blk.start + k] = -mu * target[k];
        }
        constant += 0.5 * mu * target.norm_squared();
    }

    // Local rows as functions of z with v fixed.
    let g = &agent.state_set;
    let hs = &agent.input_set;
    let with_inputs = !k_is_zero(agent);
    let rows = t * g.rows() + if with_inputs && t > 1 { (t - 1) * hs.rows() } else { 0 };
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    let mut labels = Vec::with_capacity(rows);
    let xv = &sp.states_v * v + &sp.states_0;
    let uv = &sp.inputs_v * v + &sp.inputs_0;
    let mut r = 0;
    for l in 0..t {
        let gx = &g.a * xv.rows(l * nx, nx);
        for gr in 0..g.rows() {
            for (bi, (j, _)) in pred.neighbor_dims.iter().enumerate() {
                let coef = g.a.row(gr) * sp.states_z[j].rows(l * nx, nx);
                a.view_mut((r, layout[bi].start), (1, layout[bi].len)).copy_from(&coef);
            }
            b[r] = g.b[gr] - gx[gr];
            labels.push(RowLabel { kind: RowKind::State, scenario: Some(s), step: l + 1, row: gr });
            r += 1;
        }
    }
    if with_inputs {
        for l in 1..t {
            let hu = &hs.a * uv.rows(l * nu, nu);
            for hr in 0..hs.rows() {
                for (bi, (j, _)) in pred.neighbor_dims.iter().enumerate() {
                    let coef = hs.a.row(hr) * sp.inputs_z[j].rows(l * nu, nu);
                    a.view_mut((r, layout[bi].start), (1, layout[bi].len)).copy_from(&coef);
                }
                b[r] = hs.b[hr] - hu[hr];
                labels.push(RowLabel { kind: RowKind::Input, scenario: Some(s), step: l, row: hr });
                r += 1;
            }
        }
    }
    Ok(ProgramInstance {
        kind: ProgramKind::Projection,
        agent: Some(agent.index),
        qp: QuadraticProgram::new(h, f).with_inequalities(a, b),
        constant,
        layout,
        labels,
        constraint_scenarios: 1,
        cost_scenarios: 0,
    })
}

/// Solves a projection, skipping the QP when the unconstrained minimizer already
/// satisfies every row.
pub fn solve_projection(program: &ProgramInstance, settings: &QpSettings) -> Result<DVector<f64>> {
    let h = &program.qp.hessian;
    let z = DVector::from_fn(program.qp.dim(), |k, _| -program.qp.linear[k] / h[(k, k)]);
    if program.qp.max_violation(&z) <= 0.0 {
        return Ok(z);
    }
    let sol = program.solve(settings)?;
    if sol.is_optimal() {
        Ok(sol.x)
    } else {
        Err(Error::SubproblemInfeasible { agent: program.agent.unwrap_or(0) })
    }
}

/// Robust local scenario program: neighbor trajectories are only known to lie in the
/// given boxes; the box centers enter the prediction and every row is tightened by
/// the support function of the boxes.
pub fn build_robust_local(
    agent: &AgentModel,
    pred: &PredictionOperator,
    cost: &PredictionOperator,
    boxes: &BTreeMap<usize, ReliabilityBox>,
) -> Result<ProgramInstance> {
    let mut centers = NeighborTrajectories::new();
    for (&j, &nj) in &pred.neighbor_dims {
        let bx = boxes.get(&j).ok_or(Error::MissingNeighborState(j))?;
        if bx.dim() != pred.horizon * nj {
            return Err(Error::DimensionMismatch(format!("box of neighbor {j} has dimension {}", bx.dim())));
        }
        centers.insert(j, bx.center.clone());
    }
    let estimates = vec![centers.clone(); pred.len()];
    let (mut st, mut it) = (Vec::with_capacity(pred.len()), Vec::with_capacity(pred.len()));
    for sp in &pred.scenarios {
        let (s_off, i_off) = softcomm::tighten_constraints(agent, sp, boxes)?;
        st.push(s_off);
        it.push(i_off);
    }
    let inputs = if k_is_zero(agent) { None } else { Some(it.as_slice()) };
    let (a, b, labels) = local_rows(agent, pred, &estimates, Some(&st), inputs)?;
    for r in 0..a.nrows() {
        if a.row(r).amax() < ZERO_TOL && b[r] < -1e-9 {
            return Err(Error::EmptyTightenedSet { row: r });
        }
    }
    let form = cost_form(agent, cost, &[centers])?.symmetrized();
    Ok(ProgramInstance {
        kind: ProgramKind::RobustLocal,
        agent: Some(agent.index),
        qp: QuadraticProgram::new(form.h, form.f).with_inequalities(a, b),
        constant: form.c,
        layout: v_layout(pred),
        labels,
        constraint_scenarios: pred.len(),
        cost_scenarios: cost.len(),
    })
}
