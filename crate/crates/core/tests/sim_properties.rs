use fedsilo::config::ExperimentConfig;
use fedsilo::fed::{aggregate_and_update_momentum, ServerState};
use fedsilo::fv::Weighting;
use fedsilo::params::ParamVec;
use fedsilo::rng::seeded;
use fedsilo::sim;
use fedsilo::Method;
use proptest::prelude::*;
use rand::Rng;

fn one_party() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.partition_plan.num_parties = 1;
    cfg.partition_plan.classes_per_party = vec![8];
    cfg.partition_plan.party_sample_scale = vec![1.0];
    cfg.hyper_params.local_steps = 1;
    cfg
}

#[test]
fn one_party_single_step_pfm_matches_centralized_scores() {
    let cmp = sim::compare(&one_party()).unwrap();
    let pfm: Vec<_> = cmp.rows.iter().filter(|r| r.method == Method::Pfm).collect();
    assert!(!pfm.is_empty());
    for r in pfm {
        assert!(r.delta.abs() <= 0.005, "shard {}: delta {}", r.shard, r.delta);
    }
    for r in cmp.rows.iter().filter(|r| r.method == Method::Centralized) {
        assert_eq!(r.delta, 0.0);
    }
}

#[test]
fn fedavg_and_pfm_agree_without_momentum() {
    let mut cfg = ExperimentConfig::default();
    cfg.hyper_params.momentum = 0.0;
    cfg.hyper_params.rounds = 20;
    cfg.hyper_params.local_steps = 5;
    let final_theta = |method| {
        let out = sim::run(&ExperimentConfig { method, ..cfg.clone() }).unwrap();
        out.checkpoint.server.theta
    };
    assert_eq!(final_theta(Method::Fedavg), final_theta(Method::Pfm));
}

// Default softmax head: pfm trails fedavg on all three shards.
// With `head_spec.loss = "cosine_margin"` it leads on all three.
#[test]
#[ignore = "direction not reproduced with the default softmax head"]
fn default_pfm_is_closer_to_centralized_on_most_shards() {
    let cmp = sim::compare(&ExperimentConfig::default()).unwrap();
    let deltas = |m| -> Vec<f64> { cmp.rows.iter().filter(|r| r.method == m).map(|r| r.delta).collect() };
    let (pfm, fedavg) = (deltas(Method::Pfm), deltas(Method::Fedavg));
    let wins = pfm.iter().zip(&fedavg).filter(|(p, f)| p >= f).count();
    assert!(2 * wins > pfm.len(), "pfm {pfm:?} fedavg {fedavg:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_hot_weighting_adopts_that_party(n in 2usize..6, pick in 0usize..6, seed in any::<u64>(), beta in 0.0f64..0.99) {
        let j = pick % n;
        let mut rng = seeded(seed, &[]);
        let mut vec = |len| ParamVec::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let thetas: Vec<ParamVec> = (0..n).map(|_| vec(7)).collect();
        let mut server = ServerState::new(vec(7), Weighting::one_hot(n, j).unwrap());
        server.momentum = vec(7);
        let agg = aggregate_and_update_momentum(&server, &thetas, 0.05, beta).unwrap();
        prop_assert_eq!(&agg.server.theta, &thetas[j]);
        prop_assert_eq!(agg.server.round, 1);
    }
}
