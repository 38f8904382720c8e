//! Integration tests of the staged training procedure on seeded synthetic
//! tasks.

use nas_core::config::ExperimentConfig;
use nas_core::data::generate_task;
use nas_core::estimator::EstimatorConfig;
use nas_core::nn::ParamStore;
use nas_core::pipeline::{AdamState, NullSink, Pipeline, SearchLoopState, VecSink};
use nas_core::rng::{StreamRole, StreamSeed};
use nas_core::runner;
use nas_core::supernet::{CandidateOpSpec, SuperNetSpec, SuperNetwork, TopologyItem};

fn build_pipeline(cfg: &ExperimentConfig) -> Pipeline<f32> {
    let mut store = ParamStore::new();
    let mut rng = StreamSeed::new(cfg.seed).stream(StreamRole::ParamInit, &[0]);
    let net = SuperNetwork::build(&cfg.net, &mut store, &mut rng).unwrap();
    Pipeline::new(net, store, cfg.seed, cfg.loss_kind())
}

#[test]
fn warmup_improves_validation_and_never_writes_alpha() {
    let cfg = ExperimentConfig::desk_planted(3);
    let data = generate_task::<f32>(&cfg.task).unwrap();
    let mut pipe = build_pipeline(&cfg);
    let alpha_before: Vec<Vec<f32>> = pipe
        .net
        .blocks
        .iter()
        .map(|b| pipe.store.values(b.alpha).to_vec())
        .collect();
    let before = pipe
        .validate_expected(&data.val, cfg.warmup.minibatch, 77, 0)
        .unwrap();
    let mut sink = NullSink;
    let mut wcfg = cfg.warmup;
    wcfg.max_epochs = 10;
    let outcome = pipe.warmup(&data, &wcfg, &mut sink).unwrap();
    assert!(outcome.epochs_run >= 1);
    assert!(
        outcome.best_val < before,
        "warmup did not improve expected validation loss: {} -> {}",
        before,
        outcome.best_val
    );
    for (b, snap) in pipe.net.blocks.iter().zip(&alpha_before) {
        assert_eq!(pipe.store.values(b.alpha), &snap[..], "alpha moved during warmup");
    }
}

#[test]
fn search_step2_with_zero_theta_lr_keeps_theta_bitwise() {
    let cfg = ExperimentConfig::desk_planted(5);
    let data = generate_task::<f32>(&cfg.task).unwrap();
    let mut pipe = build_pipeline(&cfg);
    let theta_before: Vec<Vec<f32>> = pipe
        .store
        .iter()
        .filter(|(_, e)| e.group == nas_core::nn::ParamGroup::Op)
        .map(|(_, e)| e.values.clone())
        .collect();
    let alpha_before: Vec<f32> = pipe.store.values(pipe.net.blocks[0].alpha).to_vec();

    let mut adam = AdamState::new(&pipe.store);
    let mut state = SearchLoopState::default();
    pipe.search_epoch(
        &data.train,
        &data.val,
        &cfg.search,
        &EstimatorConfig::st(),
        &mut adam,
        &mut state,
        1e-3, // alpha lr
        0.0,  // theta lr
    )
    .unwrap();

    let theta_after: Vec<Vec<f32>> = pipe
        .store
        .iter()
        .filter(|(_, e)| e.group == nas_core::nn::ParamGroup::Op)
        .map(|(_, e)| e.values.clone())
        .collect();
    assert_eq!(theta_before, theta_after, "theta moved with zero learning rate");
    assert_ne!(
        alpha_before,
        pipe.store.values(pipe.net.blocks[0].alpha).to_vec(),
        "alpha did not move"
    );
}

#[test]
fn step1_draws_validation_minibatches_cyclically() {
    // 3 validation minibatches and 7 training minibatches: the alpha steps
    // must see validation batches 0,1,2,0,1,2,0.
    let mut cfg = ExperimentConfig::desk_planted(1);
    cfg.task.num_sequences = 7 * 4 + 12; // 28 train + 12 val with minibatch 4
    cfg.task.val_fraction = 12.0 / 40.0;
    cfg.task.num_test = 4;
    let mut scfg = cfg.search;
    scfg.minibatch = 4;
    let data = generate_task::<f32>(&cfg.task).unwrap();
    assert_eq!(data.train.len(), 28);
    assert_eq!(data.val.len(), 12);
    let mut pipe = build_pipeline(&cfg);
    let mut adam = AdamState::new(&pipe.store);
    let mut state = SearchLoopState::default();
    pipe.search_epoch(
        &data.train,
        &data.val,
        &scfg,
        &EstimatorConfig::st(),
        &mut adam,
        &mut state,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert_eq!(state.val_batches_used, vec![0, 1, 2, 0, 1, 2, 0]);
}

#[test]
fn validate_expected_with_one_hot_alpha_equals_fixed_subgraph_loss() {
    let cfg = ExperimentConfig::desk_planted(9);
    let data = generate_task::<f32>(&cfg.task).unwrap();
    let mut pipe = build_pipeline(&cfg);
    // Push alpha to a near-one-hot distribution on candidate 2.
    for b in &pipe.net.blocks {
        let k = b.k();
        let vals = pipe.store.values_mut(b.alpha);
        for (i, v) in vals.iter_mut().enumerate().take(k) {
            *v = if i == 2 { 200.0 } else { 0.0 };
        }
    }
    let sampled = pipe
        .validate_expected(&data.val, cfg.search.minibatch, 5, 0)
        .unwrap();
    let z = nas_core::supernet::SampledArchitecture {
        selections: vec![2; pipe.net.blocks.len()],
    };
    let fixed = pipe.evaluate(&data.val, cfg.search.minibatch, &z).unwrap().loss;
    assert!(
        (sampled - fixed).abs() < 1e-6,
        "sampled {} vs fixed {}",
        sampled,
        fixed
    );
}

#[test]
fn retraining_twice_with_the_same_seed_is_bit_identical() {
    let cfg = ExperimentConfig::desk_planted(11);
    let derived = SuperNetSpec {
        topology: vec![TopologyItem::Block {
            candidates: vec![CandidateOpSpec::Tdnn { half_context: 1, dilation: 2 }],
        }],
        ..cfg.net.clone()
    };
    let run = || -> Vec<Vec<f32>> {
        let mut sink = VecSink::default();
        let mut rcfg = cfg.clone();
        rcfg.retrain.max_epochs = 6;
        let (_, _, pipe) = runner::retrain_from_spec::<f32>(&rcfg, &derived, &mut sink).unwrap();
        pipe.store.iter().map(|(_, e)| e.values.clone()).collect()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn planted_context_needs_the_planted_receptive_field() {
    // Train two fixed architectures to convergence: half-width 2 solves the
    // task, half-width 1 hits a ceiling well below it.
    let cfg = ExperimentConfig::desk_planted(13);
    let run_fixed = |half_context: usize, dilation: usize| -> f64 {
        let derived = SuperNetSpec {
            topology: vec![TopologyItem::Block {
                candidates: vec![CandidateOpSpec::Tdnn { half_context, dilation }],
            }],
            ..cfg.net.clone()
        };
        let mut sink = NullSink;
        let (_, eval, _) = runner::retrain_from_spec::<f32>(&cfg, &derived, &mut sink).unwrap();
        eval.metric
    };
    let acc_hd2 = run_fixed(2, 1); // taps at -2..=+2
    let acc_hd1 = run_fixed(1, 1); // taps at -1, 0, +1
    assert!(acc_hd2 >= 0.99, "half-width-2 model reached only {}", acc_hd2);
    assert!(acc_hd1 <= 0.90, "half-width-1 model exceeded its ceiling: {}", acc_hd1);
}

#[test]
fn planted_search_pi_mass_rises_monotonically_on_the_planted_width() {
    let cfg = ExperimentConfig::desk_planted(17);
    let data = generate_task::<f32>(&cfg.task).unwrap();
    let mut pipe = build_pipeline(&cfg);
    let mut sink = NullSink;
    pipe.warmup(&data, &cfg.warmup, &mut sink).unwrap();

    let mut vsink = VecSink::default();
    pipe.search(&data, &cfg.search, &EstimatorConfig::st(), &mut vsink).unwrap();
    // Per-epoch probability of TDNN-2-1, the candidate whose receptive field
    // is necessary and sufficient for the task.
    let traj: Vec<f64> = vsink
        .0
        .iter()
        .filter_map(|r| match r {
            nas_core::pipeline::MetricsRecord::Epoch { pi: Some(p), .. } => Some(p[0][2]),
            _ => None,
        })
        .collect();
    assert!(traj.len() >= 2);
    assert!(
        traj.windows(2).all(|w| w[1] >= w[0] - 1e-9),
        "trajectory not monotone: {:?}",
        traj
    );
    assert!(traj.last().unwrap() > &0.25, "no mass gained: {:?}", traj);
    let pi = pipe.net.blocks[0].arch_probabilities(&pipe.store);
    let argmax = pi.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    assert_eq!(argmax, 2, "derived candidate is not the planted one: {:?}", pi);
}
