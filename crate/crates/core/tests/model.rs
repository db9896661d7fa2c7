use std::collections::BTreeMap;

use dsmpc::casestudy::{self, ThreeRoomConfig};
use dsmpc::model::{partition_system, reassemble, stack, step_agent, step_global, BlockSize};
use nalgebra::DVector;
use proptest::prelude::*;

fn three_room() -> dsmpc::model::UncertainSystem {
    casestudy::system(&ThreeRoomConfig::default()).unwrap()
}

#[test]
fn partition_round_trips() {
    let sys = three_room();
    let (agents, partition) = partition_system(&sys, &[BlockSize::new(1, 1, 1); 3]).unwrap();
    assert_eq!(agents.len(), 3);
    assert_eq!(partition.neighbors, vec![vec![1], vec![0, 2], vec![0]]);
    assert_eq!(reassemble(&agents, &partition).unwrap(), sys);
}

#[test]
fn mismatched_blocks_are_rejected() {
    let sys = three_room();
    assert!(partition_system(&sys, &[BlockSize::new(1, 1, 1); 2]).is_err());
    assert!(partition_system(&sys, &[]).is_err());
}

proptest! {
    #[test]
    fn agent_steps_stack_to_global_step(
        x in prop::collection::vec(-1.0f64..1.0, 3),
        u in prop::collection::vec(-1.5f64..1.5, 3),
        w in prop::collection::vec(0.0f64..8.0, 3),
        d in prop::collection::vec(-0.01f64..0.01, 3),
    ) {
        let sys = three_room();
        let (agents, partition) = partition_system(&sys, &[BlockSize::new(1, 1, 1); 3]).unwrap();
        let (x, u, w) = (DVector::from_vec(x), DVector::from_vec(u), DVector::from_vec(w));
        let global = step_global(&sys, &x, &u, &w, &d).unwrap();
        let xs = partition.split_state(&x);
        let us = partition.split_input(&u);
        let ws = partition.split_disturbance(&w);
        let ds = partition.split_delta(&d);
        let parts: Vec<DVector<f64>> = agents
            .iter()
            .enumerate()
            .map(|(i, ag)| {
                let nb: BTreeMap<usize, DVector<f64>> = ag.neighbors().into_iter().map(|j| (j, xs[j].clone())).collect();
                step_agent(ag, &xs[i], &us[i], &nb, &ws[i], &ds[i]).unwrap()
            })
            .collect();
        prop_assert!((stack(&parts) - global).amax() <= 1e-12);
    }
}
