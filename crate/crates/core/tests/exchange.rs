mod common;

use dsmpc::exchange::{run_exchange, ExchangeConfig, ExchangeVariant, InProcessTransport, WireTransport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_exchange_instance;

#[test]
fn wire_transport_matches_in_process() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let inst = random_exchange_instance(&mut rng);
        let cfg = ExchangeConfig::default();
        let mut a = InProcessTransport::new();
        let mut b = WireTransport::new();
        let x = run_exchange(&inst.agents, &inst.predictions, &inst.predictions, &inst.initial, &cfg, &mut a).unwrap();
        let y = run_exchange(&inst.agents, &inst.predictions, &inst.predictions, &inst.initial, &cfg, &mut b).unwrap();
        assert_eq!(x.v, y.v);
        assert_eq!(x.iterations, y.iterations);
        assert_eq!(x.messages, y.messages);
        assert!(y.bytes > 0);
    }
}

#[test]
fn consensus_converges_and_tightens_with_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let inst = random_exchange_instance(&mut rng);
        let loose = inst.run(&ExchangeConfig { tolerance: 1e-3, ..ExchangeConfig::default() }).unwrap();
        let tight = inst.run(&ExchangeConfig { tolerance: 1e-6, ..ExchangeConfig::default() }).unwrap();
        assert!(loose.converged && tight.converged);
        assert!(tight.iterations >= loose.iterations);
        assert!(tight.max_consensus_gap() <= loose.max_consensus_gap() + 1e-9);
    }
}

#[test]
fn projection_variant_stays_within_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let inst = random_exchange_instance(&mut rng);
    let cfg = ExchangeConfig { variant: ExchangeVariant::Projection, max_iterations: 50, ..ExchangeConfig::default() };
    let out = inst.run(&cfg).unwrap();
    assert!(out.iterations <= 50);
    assert_eq!(out.residual_history.len(), out.iterations);
}

#[test]
fn invalid_settings_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inst = random_exchange_instance(&mut rng);
    assert!(inst.run(&ExchangeConfig { mu: 0.0, ..ExchangeConfig::default() }).is_err());
    assert!(inst.run(&ExchangeConfig { order: Some(vec![0]), ..ExchangeConfig::default() }).is_err());
}
