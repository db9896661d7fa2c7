//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use dsmpc::casestudy::{self, ThreeRoomConfig};
use dsmpc::exchange::{ExchangeConfig, ExchangeMessage, MessageKind};
use dsmpc::model::{AffineMatrix, AgentModel, Polytope};
use dsmpc::mpc::{
    composed_violation, plug_in, plug_out, simulate, ControllerMode, ControllerSettings, Network, SoftCommConfig,
};
use dsmpc::program::{build_centralized, condense, predicted_cost, NeighborTrajectories};
use dsmpc::qp::QpSettings;
use dsmpc::scenario::{binomial_tail, explicit_sample_count, reliability_level, sample_count, split_budget, Scenario};
use dsmpc::softcomm::{fit_box, tighten_constraints, Centering, ReliabilityBox};
use dsmpc::validation::{compare_modes, estimate_violation};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use common::{noiseless, random_exchange_instance, scalars, three_rooms};

fn report(n: u32, title: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {verdict} {title}: {detail}");
    assert!(ok, "criterion {n} ({title}) failed: {detail}");
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[test]
fn criterion_01_budget_arithmetic() {
    let start = Instant::now();
    let (eps, betas) = split_budget(0.05, 0.03, 3).unwrap();
    let eps_i = round4(eps[0]);
    let at85 = round4(composed_violation(eps_i, &[0.85, 0.85]).unwrap());
    let at50 = round4(composed_violation(eps_i, &[0.5, 0.5]).unwrap());
    let global50 = round4(3.0 * eps_i / 0.25);
    let global85 = round4(3.0 * eps_i / (0.85 * 0.85));
    let sums = (eps.iter().sum::<f64>() - 0.05).abs() < 1e-15 && (betas.iter().sum::<f64>() - 0.03).abs() < 1e-15;
    let ok = eps_i == 0.0167
        && at85 == 0.0231
        && at50 == 0.0668
        && global50 == 0.2004
        && global85 == 0.0693
        && sums
        && start.elapsed() < Duration::from_secs(1);
    report(
        1,
        "budget arithmetic",
        ok,
        format!("eps_i {eps_i}, eps_bar {at85} / {at50}, global {global85} / {global50}"),
    );
}

#[test]
fn criterion_02_sample_bound() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for _ in 0..50 {
        let eps = rng.random_range(0.01..0.3);
        let beta = 10f64.powf(rng.random_range(-8.0..-1.0));
        let d = rng.random_range(1..=40usize);
        let s = sample_count(eps, beta, d).unwrap();
        // Independent tail: P[Bin(S, eps) <= d - 1].
        let tail = |n: usize| Binomial::new(eps, n as u64).unwrap().cdf(d as u64 - 1);
        let tight = tail(s) <= beta * (1.0 + 1e-9) && (s == d || tail(s - 1) > beta * (1.0 - 1e-9));
        let agrees = (binomial_tail(eps, s, d) - tail(s)).abs() <= 1e-9 * tail(s).max(1e-300);
        let explicit = explicit_sample_count(eps, beta, d).unwrap() >= s;
        if !(tight && agrees && explicit) {
            failures.push((eps, beta, d, s));
        }
    }
    let ok = failures.is_empty() && start.elapsed() < Duration::from_secs(5);
    report(2, "sample bound", ok, format!("50 triples, failures {failures:?}, {:?}", start.elapsed()));
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
}

#[test]
fn criterion_03_reliability_certificate() {
    let alpha = reliability_level(0.01, 100, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=30usize);
        let s = d + rng.random_range(1..=2000usize);
        let beta = 10f64.powf(rng.random_range(-8.0..-1.0));
        let a = reliability_level(beta, s, d).unwrap();
        let lhs = ln_choose(s, d) + (s - d) as f64 * a.ln();
        // C(S, D) a^(S - D) <= beta, relative to beta.
        worst = worst.max((lhs - beta.ln()).exp() - 1.0);
    }
    let ok = (alpha - 0.8748).abs() <= 1e-4 && worst <= 1e-10;
    report(3, "reliability certificate", ok, format!("alpha {alpha:.5}, worst relative excess {worst:.2e}"));
}

#[test]
fn criterion_04_decomposition_exactness() {
    let start = Instant::now();
    let cfg = ThreeRoomConfig { peak: 11.4, ..ThreeRoomConfig::default() };
    let noise = noiseless(&cfg);
    let sys = casestudy::system(&cfg).unwrap();
    let (agents, _) = casestudy::agents(&cfg).unwrap();
    let x0 = [0.45, 0.35, 0.48];
    let (k, t) = (12, cfg.horizon);
    let local = noise.nominal_scenario(k, t);
    let global =
        Scenario { w: local.w.iter().map(|w| DVector::from_element(3, w[0])).collect(), delta: vec![vec![0.0; 3]; t] };
    let program = build_centralized(
        &sys,
        &DVector::from_column_slice(&x0),
        std::slice::from_ref(&global),
        std::slice::from_ref(&global),
    )
    .unwrap();
    let central = program.solve(&QpSettings::default()).unwrap();
    let jc = program.objective(&central.x);

    let mut preds = Vec::new();
    let mut initial = Vec::new();
    for (i, ag) in agents.iter().enumerate() {
        let nx0: NeighborTrajectories =
            ag.neighbors().into_iter().map(|j| (j, DVector::from_element(1, x0[j]))).collect();
        preds.push(condense(ag, &DVector::from_element(1, x0[i]), &nx0, std::slice::from_ref(&local)).unwrap());
        initial
            .push(ag.neighbors().into_iter().map(|j| (j, DVector::from_element(t, x0[j]))).collect::<BTreeMap<_, _>>());
    }
    let config = ExchangeConfig { tolerance: 2e-7, max_iterations: 500, ..ExchangeConfig::default() };
    let mut transport = dsmpc::exchange::InProcessTransport::new();
    let out = dsmpc::exchange::run_exchange(&agents, &preds, &preds, &initial, &config, &mut transport).unwrap();
    let jl: f64 = (0..3)
        .map(|i| predicted_cost(&agents[i], &preds[i], &out.v[i], &[out.state.agents[i].estimates_of(0)]).unwrap())
        .sum();
    let rel = (jc - jl).abs() / jc.abs();
    let eta = out.final_residual();
    let ok =
        jc > 0.0 && rel <= 1e-3 && eta <= 1e-6 && out.iterations <= 500 && start.elapsed() < Duration::from_secs(30);
    report(
        4,
        "decomposition exactness",
        ok,
        format!(
            "J_c {jc:.6}, sum J_i {jl:.6}, relative gap {rel:.2e}, residual {eta:.2e} after {} iterations",
            out.iterations
        ),
    );
}

#[test]
fn criterion_05_admm_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = ExchangeConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for _ in 0..10 {
        let inst = random_exchange_instance(&mut rng);
        let out = inst.run(&config).unwrap();
        let last = out.residual_history.last().cloned().unwrap_or_default();
        let below = out.converged && last.iter().all(|&r| r < 1e-4);
        let gap = out.max_consensus_gap();
        let bound = (2.0 * 1e-4 / out.penalty).sqrt();
        let n = inst.agents.len();
        let mut order: Vec<usize> = (0..n).rev().collect();
        order.rotate_left(1);
        let replay = inst.run(&ExchangeConfig { order: Some(order), ..config.clone() }).unwrap();
        let parallel = inst.run(&ExchangeConfig { parallel: true, ..config.clone() }).unwrap();
        let bits = |o: &dsmpc::exchange::ExchangeOutcome| {
            o.v.iter().flat_map(|v| v.iter().map(|x| x.to_bits())).collect::<Vec<_>>()
        };
        let identical = bits(&out) == bits(&replay)
            && bits(&out) == bits(&parallel)
            && out.residual_history == replay.residual_history
            && out.iterations == parallel.iterations;
        ok &= below && gap <= bound && identical;
        lines.push(format!(
            "{n}x{} it {} gap {gap:.1e}<={bound:.1e} {}",
            inst.predictions[0].len(),
            out.iterations,
            if identical { "replay ok" } else { "replay differs" }
        ));
    }
    report(5, "ADMM contract", ok, lines.join("; "));
}

#[test]
fn criterion_06_box_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=12usize);
        let samples: Vec<DVector<f64>> =
            (0..n).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0))).collect();
        let (_, b) = fit_box(&samples, Centering::SampleMeanCentered).unwrap();
        // Brute force: every pairwise midpoint is a candidate center per coordinate.
        let mut best = 0.0;
        for k in 0..d {
            let mut bk = f64::INFINITY;
            for p in &samples {
                for q in &samples {
                    let c = 0.5 * (p[k] + q[k]);
                    bk = bk.min(samples.iter().map(|s| (s[k] - c).abs()).fold(0.0, f64::max));
                }
            }
            best += bk;
        }
        worst = worst.max((b.sum() - best).abs());
        let (_, b0) = fit_box(&samples, Centering::OriginSymmetric).unwrap();
        for k in 0..d {
            let candidates = samples.iter().map(|s| s[k].abs());
            let smallest =
                candidates.filter(|&r| samples.iter().all(|s| s[k].abs() <= r)).fold(f64::INFINITY, f64::min);
            worst = worst.max((b0[k] - smallest).abs());
        }
    }
    let fit_ok = worst <= 1e-9;

    let mut tight_worst: f64 = 0.0;
    for trial in 0..10 {
        let (agent, pred, boxes) = tightening_instance(&mut rng, trial);
        let (st, it) = tighten_constraints(&agent, &pred, &boxes).unwrap();
        let (os, oi) = vertex_offsets(&agent, &pred, &boxes);
        tight_worst = tight_worst.max((st - os).amax()).max((it - oi).amax());
    }
    let ok = fit_ok && tight_worst <= 1e-9;
    report(
        6,
        "box oracles",
        ok,
        format!("fit_box worst {worst:.1e} on 20 sets, tightening worst {tight_worst:.1e} on 10 instances"),
    );
}

/// Agent with one or two neighbors whose boxes span `T n_j <= 12` coordinates.
fn tightening_instance(
    rng: &mut ChaCha8Rng,
    trial: usize,
) -> (AgentModel, dsmpc::program::ScenarioPrediction, BTreeMap<usize, ReliabilityBox>) {
    let t = 3;
    let (nx, nu) = (2, 1);
    let nb = 1 + trial % 2;
    let rnd = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.5..0.5));
    let couplings = (1..=nb)
        .map(|j| dsmpc::model::Coupling { neighbor: j, matrix: AffineMatrix::constant(rnd(rng, nx, 2), 0) })
        .collect();
    let agent = AgentModel {
        index: 0,
        nx,
        nu,
        nw: 1,
        a_self: AffineMatrix::constant(rnd(rng, nx, nx), 0),
        b: AffineMatrix::constant(rnd(rng, nx, nu), 0),
        c: AffineMatrix::constant(rnd(rng, nx, 1), 0),
        couplings,
        k: rnd(rng, nu, nx),
        q: DMatrix::identity(nx, nx),
        r: DMatrix::identity(nu, nu),
        p: DMatrix::identity(nx, nx),
        state_set: Polytope::new(rnd(rng, 3, nx), DVector::from_element(3, 1.0)).unwrap(),
        input_set: Polytope::from_box(&[-1.0], &[1.0]),
        horizon: t,
    };
    let nx0: NeighborTrajectories =
        (1..=nb).map(|j| (j, DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))).collect();
    let sc = Scenario::zero(1, 0, t);
    let pred = condense(&agent, &DVector::zeros(nx), &nx0, &[sc]).unwrap().scenarios.remove(0);
    let boxes = (1..=nb)
        .map(|j| {
            let dim = t * 2;
            let mut b = ReliabilityBox::point(DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)));
            b.half_width = DVector::from_fn(dim, |_, _| rng.random_range(0.0..0.5));
            (j, b)
        })
        .collect();
    (agent, pred, boxes)
}

/// Offsets by enumerating every vertex of each neighbor box.
fn vertex_offsets(
    agent: &AgentModel,
    pred: &dsmpc::program::ScenarioPrediction,
    boxes: &BTreeMap<usize, ReliabilityBox>,
) -> (DVector<f64>, DVector<f64>) {
    let (nx, nu, t) = (agent.nx, agent.nu, agent.horizon);
    let (g, h) = (&agent.state_set, &agent.input_set);
    let mut st = DVector::zeros(t * g.rows());
    let mut it = DVector::zeros((t - 1) * h.rows());
    for (j, bx) in boxes {
        let d = bx.dim();
        assert!(d <= 12);
        let vertices: Vec<DVector<f64>> = (0..1usize << d)
            .map(|mask| {
                DVector::from_fn(d, |k, _| if mask >> k & 1 == 1 { bx.half_width[k] } else { -bx.half_width[k] })
            })
            .collect();
        let best = |coef: DMatrix<f64>| {
            DVector::from_fn(coef.nrows(), |r, _| {
                vertices.iter().map(|y| (coef.row(r) * y)[0]).fold(f64::NEG_INFINITY, f64::max)
            })
        };
        for l in 0..t {
            let off = best(&g.a * pred.states_z[j].rows(l * nx, nx));
            let mut blk = st.rows_mut(l * g.rows(), g.rows());
            blk += off;
        }
        for l in 1..t {
            let off = best(&h.a * pred.inputs_z[j].rows(l * nu, nu));
            let mut blk = it.rows_mut((l - 1) * h.rows(), h.rows());
            blk += off;
        }
    }
    (st, it)
}

#[test]
fn criterion_07_one_shot_chance_constraint() {
    let start = Instant::now();
    let cfg = ThreeRoomConfig::default();
    let net = three_rooms(&cfg);
    let x0 = scalars(&[0.4, 0.35, 0.45]);
    let settings = ControllerSettings { start_time: 12, ..ControllerSettings::default() };
    let mut failures = 0;
    let mut rates = Vec::new();
    for seed in 0..20u64 {
        let step = simulate(&net, &x0, &ControllerMode::Distributed, &settings, 1, seed, &[])
            .map(|t| t.steps.into_iter().next().expect("one step"));
        match step {
            Ok(rec) => {
                let rep = estimate_violation(&net, &rec.states, &rec.plans, rec.k, 10_000, seed).unwrap();
                if rep.global > net.epsilon + rep.half_width() {
                    failures += 1;
                }
                rates.push(format!("{:.4}", rep.global));
            }
            Err(e) => {
                failures += 1;
                rates.push(format!("err({e})"));
            }
        }
    }
    let ok = failures <= 1 && start.elapsed() < Duration::from_secs(600);
    report(
        7,
        "one-shot chance constraint",
        ok,
        format!("eps {}, {failures} failures over 20 seeds, rates [{}]", net.epsilon, rates.join(", ")),
    );
}

#[test]
fn criterion_08_baseline_ordering() {
    let cfg = ThreeRoomConfig::default();
    let net = three_rooms(&cfg);
    let x0 = scalars(&[0.0, 0.0, 0.0]);
    let mut settings = ControllerSettings::default();
    settings.exchange.parallel = true;
    let seeds: Vec<u64> = (0..20).collect();
    let modes = [
        ControllerMode::Distributed,
        ControllerMode::Decoupled,
        ControllerMode::SoftComm(SoftCommConfig::with_alpha(0.5, 0.01)),
        ControllerMode::SoftComm(SoftCommConfig::with_alpha(0.85, 0.01)),
    ];
    let rows = compare_modes(&net, &x0, &modes, &settings, 24, &seeds, 2000).unwrap();
    let rate = |label: &str| rows.iter().find(|r| r.mode == label).map(|r| r.pooled.global).unwrap();
    let failures: usize = rows.iter().map(|r| r.failures).sum();
    let (dsmpc, desmpc, s50, s85) = (rate("dsmpc"), rate("desmpc"), rate("dsmpcs-0.50"), rate("dsmpcs-0.85"));

    // Noise-free variant with active constraints: distributed and centralized agree.
    let det = ThreeRoomConfig { peak: 11.0, ..ThreeRoomConfig::default() };
    let (agents, _) = casestudy::agents(&det).unwrap();
    let det_net = Network::new(agents, vec![noiseless(&det); 3], 0.6, 0.6).unwrap();
    let det_settings = ControllerSettings {
        cost_samples: 1,
        exchange: ExchangeConfig { tolerance: 1e-6, ..ExchangeConfig::default() },
        ..ControllerSettings::default()
    };
    let a = simulate(&det_net, &x0, &ControllerMode::Distributed, &det_settings, 24, 0, &[]).unwrap();
    let b = simulate(&det_net, &x0, &ControllerMode::Centralized, &det_settings, 24, 0, &[]).unwrap();
    let (mut dx, mut du, mut dj, mut active): (f64, f64, f64, usize) = (0.0, 0.0, 0.0, 0);
    for (ra, rb) in a.steps.iter().zip(&b.steps) {
        for i in 0..3 {
            dx = dx.max((ra.states[i][0] - rb.states[i][0]).abs());
            du = du.max((ra.inputs[i][0] - rb.inputs[i][0]).abs());
        }
        let (ja, jb): (f64, f64) = (ra.objectives.iter().sum(), rb.objectives.iter().sum());
        if jb > 1e-3 {
            active += 1;
            dj = dj.max((ja - jb).abs() / jb);
        }
    }
    let agree = dx <= 1e-4 && du <= 5e-3 && dj <= 1e-2 && active > 0;
    let closed: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.mode, r.closed_loop_violation)).collect();
    let ok = failures == 0 && desmpc > dsmpc && s50 > s85 && agree;
    report(
        8,
        "baseline ordering",
        ok,
        format!(
            "one-shot violation desmpc {desmpc:.2e} > dsmpc {dsmpc:.2e}, dsmpcs-0.50 {s50:.2e} > dsmpcs-0.85 {s85:.2e}; \
             closed-loop [{}]; deterministic gap x {dx:.1e} u {du:.1e} J {dj:.1e} over {active} active steps",
            closed.join(", ")
        ),
    );
}

fn room(a: f64) -> AgentModel {
    let one = |v: f64| AffineMatrix::constant(DMatrix::from_element(1, 1, v), 1);
    AgentModel {
        index: 0,
        nx: 1,
        nu: 1,
        nw: 1,
        a_self: one(a),
        b: one(casestudy::B_DIAG),
        c: one(casestudy::C_DIAG),
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
fn criterion_09_plug_and_play_conservation() {
    let cfg = ThreeRoomConfig::default();
    let base = three_rooms(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let coupling = || AffineMatrix::constant(DMatrix::from_element(1, 1, 0.1), 1);
    let bigger = plug_in(&base, room(0.3), cfg.noise(), vec![(2, coupling())]).unwrap();
    let new_id = *bigger.ids.last().unwrap();
    let restored = plug_out(&bigger, new_id).unwrap();
    let round_trip = restored.budgets == base.budgets && restored.agents == base.agents;

    let conserved = |n: &Network| {
        let e: f64 = n.budgets.iter().map(|b| b.epsilon).sum();
        let b: f64 = n.budgets.iter().map(|b| b.beta).sum();
        let tol = 4.0 * n.len() as f64 * f64::EPSILON;
        (e - n.epsilon).abs() <= tol * n.epsilon && (b - n.beta).abs() <= tol * n.beta
    };
    let mut net = base.clone();
    let mut all = conserved(&net);
    let mut sizes = Vec::new();
    for _ in 0..40 {
        if net.len() > 1 && rng.random_bool(0.4) {
            let id = net.ids[rng.random_range(0..net.len())];
            net = plug_out(&net, id).unwrap();
        } else {
            let target = rng.random_range(0..net.len());
            net = plug_in(&net, room(rng.random_range(0.1..0.5)), cfg.noise(), vec![(target, coupling())]).unwrap();
        }
        all &= conserved(&net);
        sizes.push(net.len());
    }
    let ok = round_trip && all;
    report(
        9,
        "plug-and-play conservation",
        ok,
        format!("round trip exact: {round_trip}, sums conserved over 40 events: {all}, sizes {sizes:?}"),
    );
}

#[test]
fn criterion_10_wire_codecs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let kinds = [MessageKind::ScenarioSetBroadcast, MessageKind::EstimateBroadcast, MessageKind::MultiplierBroadcast];
    let mut bad = 0;
    for _ in 0..1000 {
        let count = rng.random_range(0..6);
        let dim = rng.random_range(0..10);
        let msg = ExchangeMessage {
            kind: kinds[rng.random_range(0..3)],
            sender: rng.random(),
            receiver: rng.random(),
            iteration: rng.random(),
            payload: (0..count).map(|_| DVector::from_fn(dim, |_, _| f64::from_bits(rng.random()))).collect(),
        };
        let bytes = msg.to_bytes().unwrap();
        let back = ExchangeMessage::from_bytes(&bytes).unwrap();
        let same_bits = back.payload.len() == msg.payload.len()
            && back
                .payload
                .iter()
                .zip(&msg.payload)
                .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if back.to_bytes().unwrap() != bytes
            || !same_bits
            || (back.kind, back.sender, back.receiver, back.iteration)
                != (msg.kind, msg.sender, msg.receiver, msg.iteration)
        {
            bad += 1;
        }

        let d = rng.random_range(0..13);
        let bx = ReliabilityBox {
            center: DVector::from_fn(d, |_, _| f64::from_bits(rng.random())),
            half_width: DVector::from_fn(d, |_, _| f64::from_bits(rng.random())),
            samples: rng.random::<u32>() as usize,
            beta: f64::from_bits(rng.random()),
            alpha: f64::from_bits(rng.random()),
        };
        let bytes = bx.to_bytes();
        let back = ReliabilityBox::from_bytes(&bytes).unwrap();
        let bits = |b: &ReliabilityBox| {
            let mut v: Vec<u64> = b.center.iter().chain(b.half_width.iter()).map(|x| x.to_bits()).collect();
            v.extend([b.beta.to_bits(), b.alpha.to_bits(), b.samples as u64]);
            v
        };
        if back.to_bytes() != bytes || bits(&back) != bits(&bx) {
            bad += 1;
        }
    }
    report(10, "wire codecs", bad == 0, format!("1000 messages and 1000 boxes, {bad} mismatches"));
}
