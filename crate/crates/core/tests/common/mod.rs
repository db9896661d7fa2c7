#![allow(dead_code)]

use std::collections::BTreeMap;

use dsmpc::casestudy::{self, ThreeRoomConfig};
use dsmpc::exchange::{run_exchange, ExchangeConfig, ExchangeOutcome, InProcessTransport};
use dsmpc::model::{AffineMatrix, AgentModel, Coupling, Polytope};
use dsmpc::mpc::Network;
use dsmpc::program::{condense, NeighborTrajectories, PredictionOperator};
use dsmpc::scenario::{DisturbanceModel, NoiseProcess, Scenario, UncertaintyModel};
use dsmpc::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Coupled agents with condensed scenario predictions, ready for the exchange.
pub struct ExchangeInstance {
    pub agents: Vec<AgentModel>,
    pub predictions: Vec<PredictionOperator>,
    pub initial: Vec<NeighborTrajectories>,
}

impl ExchangeInstance {
    pub fn run(&self, config: &ExchangeConfig) -> dsmpc::Result<ExchangeOutcome> {
        let mut t = InProcessTransport::new();
        run_exchange(&self.agents, &self.predictions, &self.predictions, &self.initial, config, &mut t)
    }
}

fn scalar(v: f64, term: f64) -> AffineMatrix {
    AffineMatrix::new(DMatrix::from_element(1, 1, v), vec![DMatrix::from_element(1, 1, term)]).unwrap()
}

/// Chain of 2 or 3 scalar agents with 1 to 5 shared scenarios and horizon 3.
fn try_instance(rng: &mut ChaCha8Rng) -> ExchangeInstance {
    let n = rng.random_range(2..=3);
    let t = 3;
    let s = rng.random_range(1..=5);
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let couplings = (0..n)
            .filter(|&j| j + 1 == i || i + 1 == j)
            .map(|j| Coupling { neighbor: j, matrix: scalar(rng.random_range(-0.3..0.3), 0.0) })
            .collect();
        let q = rng.random_range(0.0..1.0);
        let hi = rng.random_range(0.6..1.5);
        agents.push(AgentModel {
            index: i,
            nx: 1,
            nu: 1,
            nw: 1,
            a_self: scalar(rng.random_range(0.3..1.0), 1.0),
            b: scalar(rng.random_range(0.5..1.5), 0.0),
            c: scalar(1.0, 0.0),
            couplings,
            k: DMatrix::zeros(1, 1),
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, rng.random_range(0.1..1.0)),
            p: DMatrix::from_element(1, 1, q),
            state_set: Polytope::from_box(&[-hi], &[hi]),
            input_set: Polytope::from_box(&[-1.0], &[1.0]),
            horizon: t,
        });
    }
    let mut predictions = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);
    for (i, ag) in agents.iter().enumerate() {
        let scenarios: Vec<Scenario> = (0..s)
            .map(|_| Scenario {
                w: (0..t).map(|_| DVector::from_element(1, rng.random_range(-0.2..0.2))).collect(),
                delta: (0..t).map(|_| vec![rng.random_range(-0.1..0.1)]).collect(),
            })
            .collect();
        let nx0: NeighborTrajectories =
            ag.neighbors().into_iter().map(|j| (j, DVector::from_element(1, x0[j]))).collect();
        predictions.push(condense(ag, &DVector::from_element(1, x0[i]), &nx0, &scenarios).unwrap());
        initial
            .push(ag.neighbors().into_iter().map(|j| (j, DVector::from_element(t, x0[j]))).collect::<BTreeMap<_, _>>());
    }
    ExchangeInstance { agents, predictions, initial }
}

/// Random instance whose local programs are feasible.
pub fn random_exchange_instance(rng: &mut ChaCha8Rng) -> ExchangeInstance {
    loop {
        let inst = try_instance(rng);
        let probe = ExchangeConfig { max_iterations: 1, ..ExchangeConfig::default() };
        match inst.run(&probe) {
            Err(Error::SubproblemInfeasible { .. }) => continue,
            _ => return inst,
        }
    }
}

/// Three-room network with the default case-study budgets.
pub fn three_rooms(cfg: &ThreeRoomConfig) -> Network {
    let (agents, _) = casestudy::agents(cfg).unwrap();
    Network::new(agents, vec![cfg.noise(); 3], 0.05, 0.03).unwrap()
}

/// Three-room noise with the disturbance fixed at its forecast and no uncertainty.
pub fn noiseless(cfg: &ThreeRoomConfig) -> NoiseProcess {
    let mut noise = cfg.noise();
    noise.uncertainty = UncertaintyModel::Zero;
    if let DisturbanceModel::UniformBand { fraction, .. } = &mut noise.disturbance {
        *fraction = 0.0;
    }
    noise
}

pub fn scalars(v: &[f64]) -> Vec<DVector<f64>> {
    v.iter().map(|&x| DVector::from_element(1, x)).collect()
}
