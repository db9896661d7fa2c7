//! Consensus form of the exchange.
//!
//! Each agent solves for its decision `v_i` together with its own estimates `z_ij^s`
//! of every neighbor trajectory, subject to all of its scenario constraints. Owners
//! average their predicted trajectory with the followers' estimates of it into the
//! agreed trajectory `X_j^s`. Scaled multipliers enforce `x_i^s = X_i^s` and
//! `z_ij^s = X_j^s`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::arrow::{ArrowQp, ArrowRow};
use super::{
    map_agents, payload_map, AgentExchangeState, ExchangeConfig, ExchangeMessage, ExchangeOutcome, ExchangeState,
    MessageKind, Transport,
};
use crate::error::{Error, Result};
use crate::model::{AgentModel, ZERO_TOL};
use crate::program::{build_local_primal, NeighborTrajectories, PredictionOperator, ScenarioPrediction};

type Trajectories = BTreeMap<usize, Vec<DVector<f64>>>;

/// `[M_z(j) ...]` in neighbor order.
fn stacked(mz: &BTreeMap<usize, DMatrix<f64>>, rows: usize, nz: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(rows, nz);
    let mut c = 0;
    for m in mz.values() {
        e.columns_mut(c, m.ncols()).copy_from(m);
        c += m.ncols();
    }
    e
}

fn weights(agent: &AgentModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nx, nu, t) = (agent.nx, agent.nu, agent.horizon);
    let mut wx = DMatrix::zeros(t * nx, t * nx);
    let mut wu = DMatrix::zeros(t * nu, t * nu);
    for l in 0..t {
        let q = if l + 1 == t { &agent.p } else { &agent.q };
        wx.view_mut((l * nx, l * nx), (nx, nx)).copy_from(q);
        wu.view_mut((l * nu, l * nu), (nu, nu)).copy_from(&agent.r);
    }
    (wx, wu)
}

/// Mean squared spectral norm of the state response to `v`.
fn input_gain(predictions: &[PredictionOperator], coupled: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (p, _) in predictions.iter().zip(coupled).filter(|(_, &c)| c) {
        for sp in &p.scenarios {
            total += sp.states_v.singular_values().max().powi(2);
            count += 1;
        }
    }
    if count == 0 || total <= ZERO_TOL {
        1.0
    } else {
        total / count as f64
    }
}

/// Mean largest eigenvalue of the cost Hessian in `v` over the coupled agents.
fn cost_curvature(agents: &[AgentModel], costs: &[PredictionOperator], coupled: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, cost) in costs.iter().enumerate() {
        if !coupled[i] || cost.is_empty() {
            continue;
        }
        let (wx, wu) = weights(&agents[i]);
        let nv = cost.decision_dim();
        let mut h = DMatrix::zeros(nv, nv);
        for sp in &cost.scenarios {
            h += sp.states_v.transpose() * &wx * &sp.states_v + sp.inputs_v.transpose() * &wu * &sp.inputs_v;
        }
        h *= 2.0 / cost.len() as f64;
        let h = (&h + h.transpose()) * 0.5;
        total += h.symmetric_eigenvalues().max();
        count += 1;
    }
    if count == 0 || total <= ZERO_TOL {
        1.0
    } else {
        total / count as f64
    }
}

/// Local program of one coupled agent with the penalty curvature fixed.
struct LocalProgram {
    nv: usize,
    nz: usize,
    /// `(neighbor, offset, len)` inside a scenario block.
    z_layout: Vec<(usize, usize, usize)>,
    e_v: Vec<DMatrix<f64>>,
    e_z: Vec<DMatrix<f64>>,
    f_x: Vec<DVector<f64>>,
    /// Linear term with zero targets.
    base_v: DVector<f64>,
    base_s: Vec<DVector<f64>>,
    qp: ArrowQp,
}

fn add_cost(
    sp: &ScenarioPrediction,
    nz: usize,
    wx: &DMatrix<f64>,
    wu: &DMatrix<f64>,
    scale: f64,
    h: (&mut DMatrix<f64>, &mut DMatrix<f64>, &mut DMatrix<f64>),
    f: (&mut DVector<f64>, &mut DVector<f64>),
) {
    let (hvv, hvs, hss) = h;
    let (fv, fs) = f;
    for (mv, mz, c, w) in
        [(&sp.states_v, &sp.states_z, &sp.states_0, wx), (&sp.inputs_v, &sp.inputs_z, &sp.inputs_0, wu)]
    {
        let mz = stacked(mz, mv.nrows(), nz);
        let wv = w * mv;
        let wz = w * &mz;
        hvv.gemm_tr(2.0 * scale, mv, &wv, 1.0);
        hvs.gemm_tr(2.0 * scale, mv, &wz, 1.0);
        hss.gemm_tr(2.0 * scale, &mz, &wz, 1.0);
        fv.gemv_tr(2.0 * scale, &wv, c, 1.0);
        fs.gemv_tr(2.0 * scale, &wz, c, 1.0);
    }
}

fn build_local(
    agent: &AgentModel,
    pred: &PredictionOperator,
    cost: &PredictionOperator,
    mu: f64,
) -> Result<LocalProgram> {
    let (nx, nu, t) = (pred.nx, pred.nu, pred.horizon);
    if cost.neighbor_dims != pred.neighbor_dims {
        return Err(Error::DimensionMismatch("cost and constraint predictions see different neighbors".into()));
    }
    let nv = t * nu;
    let mut z_layout = Vec::new();
    let mut nz = 0;
    for (&j, &nj) in &pred.neighbor_dims {
        z_layout.push((j, nz, t * nj));
        nz += t * nj;
    }
    let s_count = pred.len();
    let g = &agent.state_set;
    let h = &agent.input_set;
    let shared_inputs = agent.k.amax() < ZERO_TOL;
    let (wx, wu) = weights(agent);
    let cost_scale = if cost.is_empty() { 0.0 } else { 1.0 / cost.len() as f64 };

    let mut hvv = DMatrix::zeros(nv, nv);
    let mut base_v = DVector::zeros(nv);
    let mut hvs = Vec::with_capacity(s_count);
    let mut hss = Vec::with_capacity(s_count);
    let mut base_s = Vec::with_capacity(s_count);
    let (mut e_v, mut e_z, mut f_x) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = Vec::new();

    // Rows on v alone: the time-0 input, and every input when K = 0.
    let hu00 = &h.a * (&agent.k * &pred.x0);
    for l in 0..(if shared_inputs { t } else { 1 }) {
        for hr in 0..h.rows() {
            let mut cv = DVector::zeros(nv);
            cv.rows_mut(l * nu, nu).copy_from(&h.a.row(hr).transpose());
            let b = h.b[hr] - if l == 0 { hu00[hr] } else { 0.0 };
            rows.push(ArrowRow { scenario: None, cv, cz: DVector::zeros(0), b });
        }
    }

    for (s, sp) in pred.scenarios.iter().enumerate() {
        let ev = sp.states_v.clone();
        let ez = stacked(&sp.states_z, t * nx, nz);
        let mut hs_v = ev.transpose() * &ez * mu;
        let mut hs_s = DMatrix::identity(nz, nz) * mu;
        hs_s.gemm_tr(mu, &ez, &ez, 1.0);
        hvv.gemm_tr(mu, &ev, &ev, 1.0);
        base_v.gemv_tr(mu, &ev, &sp.states_0, 1.0);
        let mut bs = ez.transpose() * &sp.states_0 * mu;
        for cp in cost.scenarios.iter().skip(s).step_by(s_count) {
            add_cost(cp, nz, &wx, &wu, cost_scale, (&mut hvv, &mut hs_v, &mut hs_s), (&mut base_v, &mut bs));
        }

        for l in 0..t {
            let gv = &g.a * ev.rows(l * nx, nx);
            let gz = &g.a * ez.rows(l * nx, nx);
            let gc = &g.a * sp.states_0.rows(l * nx, nx);
            for gr in 0..g.rows() {
                rows.push(ArrowRow {
                    scenario: Some(s),
                    cv: gv.row(gr).transpose(),
                    cz: gz.row(gr).transpose(),
                    b: g.b[gr] - gc[gr],
                });
            }
        }
        if !shared_inputs {
            let iz = stacked(&sp.inputs_z, t * nu, nz);
            for l in 1..t {
                let hv = &h.a * sp.inputs_v.rows(l * nu, nu);
                let hz = &h.a * iz.rows(l * nu, nu);
                let hc = &h.a * sp.inputs_0.rows(l * nu, nu);
                for hr in 0..h.rows() {
                    rows.push(ArrowRow {
                        scenario: Some(s),
                        cv: hv.row(hr).transpose(),
                        cz: hz.row(hr).transpose(),
                        b: h.b[hr] - hc[hr],
                    });
                }
            }
        }
        hvs.push(hs_v);
        hss.push(hs_s);
        base_s.push(bs);
        e_v.push(ev);
        e_z.push(ez);
        f_x.push(sp.states_0.clone());
    }
    let qp = ArrowQp::new(hvv, hvs, hss, rows)?;
    Ok(LocalProgram { nv, nz, z_layout, e_v, e_z, f_x, base_v, base_s, qp })
}

/// Scaled multipliers and the warm-start active set of one coupled agent.
struct Duals {
    yx: Vec<DVector<f64>>,
    yz: Trajectories,
    active: Vec<usize>,
}

struct LocalUpdate {
    v: DVector<f64>,
    x: Vec<DVector<f64>>,
    z: Trajectories,
    active: Vec<usize>,
}

fn local_update(
    agent: usize,
    prog: &LocalProgram,
    duals: &Duals,
    own: &[DVector<f64>],
    agreed: &Trajectories,
    mu: f64,
) -> Result<LocalUpdate> {
    let s_count = prog.e_v.len();
    let mut f = DVector::zeros(prog.qp.dim());
    let mut fv = prog.base_v.clone();
    for s in 0..s_count {
        let tx = &own[s] - &duals.yx[s];
        fv.gemv_tr(-mu, &prog.e_v[s], &tx, 1.0);
        let mut fs = prog.base_s[s].clone();
        fs.gemv_tr(-mu, &prog.e_z[s], &tx, 1.0);
        for &(j, off, len) in &prog.z_layout {
            let xj = agreed.get(&j).ok_or(Error::MissingNeighborState(j))?;
            let tz = &xj[s] - &duals.yz[&j][s];
            let mut blk = fs.rows_mut(off, len);
            blk.axpy(-mu, &tz, 1.0);
        }
        f.rows_mut(prog.nv + s * prog.nz, prog.nz).copy_from(&fs);
    }
    f.rows_mut(0, prog.nv).copy_from(&fv);
    let (p, active) = prog.qp.solve(&f, &duals.active).ok_or(Error::SubproblemInfeasible { agent })?;
    let v = p.rows(0, prog.nv).into_owned();
    let mut out = LocalUpdate {
        x: Vec::with_capacity(s_count),
        z: prog.z_layout.iter().map(|&(j, _, _)| (j, Vec::with_capacity(s_count))).collect(),
        v,
        active,
    };
    for s in 0..s_count {
        let zs = p.rows(prog.nv + s * prog.nz, prog.nz);
        out.x.push(&prog.e_v[s] * &out.v + &prog.e_z[s] * zs + &prog.f_x[s]);
        for &(j, off, len) in &prog.z_layout {
            out.z.get_mut(&j).unwrap().push(zs.rows(off, len).into_owned());
        }
    }
    Ok(out)
}

fn sq(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn send_to(
    transport: &mut dyn Transport,
    kind: MessageKind,
    sender: usize,
    receivers: impl IntoIterator<Item = usize>,
    tag: u32,
    payload: &[DVector<f64>],
) -> Result<()> {
    for k in receivers {
        transport.send(ExchangeMessage {
            kind,
            sender: sender as u16,
            receiver: k as u16,
            iteration: tag,
            payload: payload.to_vec(),
        })?;
    }
    Ok(())
}

fn zeros_like(m: &Trajectories) -> Trajectories {
    m.iter().map(|(&j, zs)| (j, zs.iter().map(|q| DVector::zeros(q.len())).collect())).collect()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn run(
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
    let sent_before = transport.delivered();
    let coupled: Vec<bool> = (0..n).map(|i| !agents[i].couplings.is_empty() || !follower_sets[i].is_empty()).collect();
    for i in 0..n {
        if coupled[i] && predictions[i].is_empty() {
            return Err(Error::DimensionMismatch(format!("coupled agent {i} holds no constraint scenarios")));
        }
    }
    let scenarios_per_agent = {
        let c: Vec<usize> = (0..n).filter(|&i| coupled[i]).map(|i| predictions[i].len()).collect();
        if c.is_empty() {
            1.0
        } else {
            c.iter().sum::<usize>() as f64 / c.len() as f64
        }
    };
    // Penalty in units of the cost curvature, seen through the input-to-state gain and
    // shared out over the scenarios.
    let mu =
        config.mu * cost_curvature(agents, costs, &coupled) / (input_gain(predictions, &coupled) * scenarios_per_agent);

    // Agents without couplings in either direction solve their scenario program once.
    let standalone = map_agents(order, config.parallel, |i| {
        if coupled[i] {
            return Ok(None);
        }
        let program = build_local_primal(&agents[i], &predictions[i], &costs[i], &[], &[], config.mu)?;
        let sol = program.solve(&config.qp)?;
        if !sol.is_optimal() {
            return Err(Error::SubproblemInfeasible { agent: i });
        }
        let empty = NeighborTrajectories::new();
        let xs = predictions[i].scenarios.iter().map(|sp| sp.states(&sol.x, &empty)).collect::<Result<Vec<_>>>()?;
        Ok(Some((sol.x, xs)))
    })?;
    let programs = map_agents(order, config.parallel, |i| {
        if coupled[i] {
            build_local(&agents[i], &predictions[i], &costs[i], mu).map(Some)
        } else {
            Ok(None)
        }
    })?;

    // Initial point: v = 0, estimates from `initial`, own trajectories rolled out.
    let mut state = ExchangeState { agents: Vec::with_capacity(n), iteration: 0 };
    let mut duals: Vec<Duals> = Vec::with_capacity(n);
    for i in 0..n {
        let pred = &predictions[i];
        let mut z = Trajectories::new();
        for &j in pred.neighbor_dims.keys() {
            let z0 = initial[i].get(&j).ok_or(Error::MissingNeighborState(j))?;
            z.insert(j, vec![z0.clone(); pred.len()]);
        }
        let (v, x) = match &standalone[i] {
            Some((v, xs)) => (v.clone(), xs.clone()),
            None => {
                let v = DVector::zeros(pred.decision_dim());
                let mut xs = Vec::with_capacity(pred.len());
                for (s, sp) in pred.scenarios.iter().enumerate() {
                    let zs: NeighborTrajectories = z.iter().map(|(&j, zz)| (j, zz[s].clone())).collect();
                    xs.push(sp.states(&v, &zs)?);
                }
                (v, xs)
            }
        };
        duals.push(Duals {
            yx: x.iter().map(|q| DVector::zeros(q.len())).collect(),
            yz: zeros_like(&z),
            active: Vec::new(),
        });
        state.agents.push(AgentExchangeState {
            v,
            multipliers: zeros_like(&z),
            estimates: z,
            trajectories: x,
            residuals: Vec::new(),
        });
    }

    // Owners announce their initial trajectories.
    for &i in order {
        send_to(
            transport,
            MessageKind::ScenarioSetBroadcast,
            i,
            follower_sets[i].iter().copied(),
            0,
            &state.agents[i].trajectories,
        )?;
    }
    let mut agreed: Vec<Trajectories> = Vec::with_capacity(n);
    for i in 0..n {
        agreed.push(payload_map(transport.receive(i, MessageKind::ScenarioSetBroadcast, 0)?));
    }

    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut increases = 0;
    for l in 0..config.max_iterations {
        let tag = l as u32 + 1;

        // Local updates; estimates and multipliers go to the owners.
        let updates = map_agents(order, config.parallel, |i| match &programs[i] {
            Some(p) => local_update(i, p, &duals[i], &state.agents[i].trajectories, &agreed[i], mu).map(Some),
            None => Ok(None),
        })?;
        for &i in order {
            if let Some(u) = &updates[i] {
                for (&j, zs) in &u.z {
                    let lam: Vec<DVector<f64>> = duals[i].yz[&j].iter().map(|y| y * mu).collect();
                    send_to(transport, MessageKind::EstimateBroadcast, i, [j], tag, zs)?;
                    send_to(transport, MessageKind::MultiplierBroadcast, i, [j], tag, &lam)?;
                }
            }
        }

        // Owners form the agreed trajectories and broadcast them.
        let mut primal_sq = vec![0.0; n];
        let mut dual_sq = vec![0.0; n];
        for &j in order {
            let est = payload_map(transport.receive(j, MessageKind::EstimateBroadcast, tag)?);
            let mut lam = payload_map(transport.receive(j, MessageKind::MultiplierBroadcast, tag)?);
            let Some(u) = &updates[j] else { continue };
            let d = &mut duals[j];
            let s_count = u.x.len();
            let mut xnew: Vec<DVector<f64>> = (0..s_count).map(|s| &u.x[s] + &d.yx[s]).collect();
            for (k, zs) in &est {
                let lk = lam.remove(k).ok_or_else(|| Error::Protocol(format!("no multipliers from {k}")))?;
                for s in 0..s_count {
                    xnew[s] += &zs[s] + &lk[s] / mu;
                }
            }
            let weight = 1.0 / (1 + est.len()) as f64;
            let st = &mut state.agents[j];
            for s in 0..s_count {
                xnew[s] *= weight;
                dual_sq[j] += (1 + est.len()) as f64 * sq(&xnew[s], &st.trajectories[s]);
                primal_sq[j] += sq(&u.x[s], &xnew[s]);
                d.yx[s] += &u.x[s] - &xnew[s];
            }
            st.v = u.v.clone();
            st.trajectories = xnew;
            send_to(
                transport,
                MessageKind::ScenarioSetBroadcast,
                j,
                follower_sets[j].iter().copied(),
                tag,
                &st.trajectories,
            )?;
        }

        // Followers take the agreed trajectories and update their multipliers.
        let mut etas = vec![0.0; n];
        for &i in order {
            let recv = payload_map(transport.receive(i, MessageKind::ScenarioSetBroadcast, tag)?);
            let Some(u) = &updates[i] else { continue };
            let d = &mut duals[i];
            for (j, zs) in &u.z {
                let xj = recv.get(j).ok_or(Error::MissingNeighborState(*j))?;
                let yz = d.yz.get_mut(j).unwrap();
                for s in 0..zs.len() {
                    primal_sq[i] += sq(&zs[s], &xj[s]);
                    yz[s] += &zs[s] - &xj[s];
                }
            }
            d.active = u.active.clone();
            let st = &mut state.agents[i];
            st.estimates = u.z.clone();
            st.multipliers = d.yz.iter().map(|(&j, ys)| (j, ys.iter().map(|y| y * mu).collect())).collect();
            agreed[i] = recv;
            etas[i] = 0.5 * mu * (primal_sq[i] + dual_sq[i]);
            st.residuals.push(etas[i]);
        }
        if let Some(prev) = history.last() {
            let (a, b): (f64, f64) = (prev.iter().sum(), etas.iter().sum());
            if b > 1.1 * a {
                increases += 1;
            }
        }
        history.push(etas.clone());
        state.iteration = l + 1;
        if etas.iter().all(|&e| e <= config.tolerance) {
            converged = true;
            break;
        }
    }
    if !converged {
        let total: f64 = history.last().map_or(0.0, |e| e.iter().sum());
        log::warn!("scenario exchange stopped after {} iterations with residual {total:.3e}", state.iteration);
    }
    if increases > 0 {
        log::warn!("exchange residual rose by more than 10% in {increases} iterations");
    }
    if transport.pending() != 0 {
        return Err(Error::Protocol(format!("{} messages left unconsumed", transport.pending())));
    }
    Ok(ExchangeOutcome {
        v: state.agents.iter().map(|a| a.v.clone()).collect(),
        iterations: state.iteration,
        converged,
        residual_history: history,
        state,
        messages: transport.delivered() - sent_before,
        bytes: transport.bytes(),
        penalty: mu,
    })
}
