//! Behavioral contracts of the training loop on small datasets: the
//! objective decreases, runs are reproducible, warm starts and label
//! propagation are wired through, and plain training is genuinely fragile
//! under attack.

mod common;

use common::small_two_moons;
use great::attacks::AttackMethod;
use great::data::subsample_labels;
use great::eval::{accuracy, epsilon_sweep, robust_accuracy};
use great::graph::{build_graph, GraphConfig, GraphNode};
use great::great::{
    build_training_graph, propagate_labels, train, train_from_base, train_with_init, TrainConfig,
    TrainMode,
};
use great::nn::{init_params, ModelSpec};

fn small_config(seed: u64) -> TrainConfig {
    let model = ModelSpec::mlp(&[2, 16, 16, 2]).expect("model");
    let mut cfg = TrainConfig::new(model, TrainMode::Base, seed);
    cfg.epochs = 100;
    cfg
}

#[test]
fn full_objective_training_reduces_the_loss() {
    let (_, splits) = small_two_moons(1);
    let cfg = small_config(1);
    let init = init_params(&cfg.model, 1).expect("init");
    let base = train_with_init(&cfg, &splits, init, None).expect("base");
    let great_cfg = TrainConfig {
        mode: TrainMode::Great,
        ..cfg.clone()
    };
    let outcome = train_from_base(&great_cfg, &splits, &base.params).expect("train");
    let records = &outcome.log.records;
    let ratio = records.last().expect("log").loss.total / records[0].loss.total;
    assert!(
        ratio < 0.9,
        "total objective only fell to {ratio:.3} of its starting value"
    );
    assert!(records.iter().all(|r| r.loss.is_finite()), "loss diverged");
}

#[test]
fn plain_training_is_accurate_but_fragile() {
    for seed in 1..=3 {
        let (_, splits) = small_two_moons(seed);
        let cfg = small_config(seed);
        let init = init_params(&cfg.model, seed).expect("init");
        let base = train_with_init(&cfg, &splits, init, None).expect("base");
        let clean = accuracy(&cfg.model, &base.params, &splits.test).expect("clean");
        let robust = robust_accuracy(
            &cfg.model,
            &base.params,
            &splits.test,
            AttackMethod::Fgsm,
            &cfg.attack,
        )
        .expect("robust");
        assert!(clean >= 0.8, "seed {seed}: clean accuracy {clean:.3} too low");
        assert!(
            robust <= clean - 0.15,
            "seed {seed}: attack barely hurt ({clean:.3} clean, {robust:.3} robust)"
        );
    }
}

#[test]
fn adversarial_vulnerability_grows_with_budget() {
    let (_, splits) = small_two_moons(1);
    let cfg = small_config(1);
    let init = init_params(&cfg.model, 1).expect("init");
    let base = train_with_init(&cfg, &splits, init, None).expect("base");
    let curve = epsilon_sweep(
        &cfg.model,
        &base.params,
        &splits.test,
        AttackMethod::Fgsm,
        &cfg.attack,
        &[0.0, 0.1, 0.2, 0.3, 0.4],
    )
    .expect("sweep");
    let first = curve.first().expect("curve").1;
    let last = curve.last().expect("curve").1;
    assert!(
        first - last >= 0.2,
        "accuracy only fell from {first:.3} to {last:.3} across the budget range"
    );
}

#[test]
fn identical_configs_reproduce_identical_runs() {
    let (_, splits) = small_two_moons(4);
    let mut cfg = small_config(4);
    cfg.mode = TrainMode::Great;
    cfg.epochs = 10;
    let init = init_params(&cfg.model, 4).expect("init");
    let graph = build_training_graph(&cfg, &splits.train, &init).expect("graph");
    let a = train_with_init(&cfg, &splits, init.clone(), Some(graph.clone())).expect("first");
    let b = train_with_init(&cfg, &splits, init, Some(graph)).expect("second");
    assert_eq!(a.params.max_abs_diff(&b.params).expect("diff"), 0.0);
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_epochs_returns_the_initial_parameters() {
    let (_, splits) = small_two_moons(5);
    let mut cfg = small_config(5);
    cfg.epochs = 0;
    let init = init_params(&cfg.model, 5).expect("init");
    let outcome = train_with_init(&cfg, &splits, init.clone(), None).expect("train");
    assert_eq!(outcome.params.max_abs_diff(&init).expect("diff"), 0.0);
    assert!(outcome.log.records.is_empty());
}

#[test]
fn warm_start_pipeline_attaches_the_base_stage() {
    let (_, splits) = small_two_moons(6);
    let mut cfg = small_config(6);
    cfg.mode = TrainMode::Great;
    cfg.epochs = 5;
    cfg.warmup_epochs = Some(8);
    let outcome = train(&cfg, &splits).expect("train");
    let base = outcome.base.as_ref().expect("base stage attached");
    assert_eq!(base.log.records.len(), 8, "base stage length is the warm-up");
    assert_eq!(outcome.log.records.len(), 5);
    assert!(outcome.graph.is_some(), "graph-regularized run keeps its graph");
    assert!(
        outcome.params.max_abs_diff(&base.params).expect("diff") > 0.0,
        "fine-tuning left the warm start untouched"
    );
}

#[test]
fn propagation_radius_is_bounded_by_passes() {
    // Four unit vectors at 25-degree steps: adjacent pairs sit above
    // tau = 0.8 (cos 25 ~ 0.906), skipping a node falls below it
    // (cos 50 ~ 0.643), so the built graph is a path 0-1-2-3.
    let nodes: Vec<GraphNode> = (0..4)
        .map(|id| {
            let angle = (id as f64) * 25.0f64.to_radians();
            GraphNode {
                id,
                sample_index: id,
                adversarial: false,
                label: if id == 0 { Some(7) } else { None },
                embedding: vec![angle.cos(), angle.sin()],
            }
        })
        .collect();
    let config = GraphConfig {
        k: 2,
        tau: 0.8,
        mutual: false,
    };
    let graph = build_graph(nodes, config).expect("graph");
    for (src, dst) in [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)] {
        assert!(
            graph.edges().iter().any(|e| e.src == src && e.dst == dst),
            "expected path edge {src} -> {dst}"
        );
    }
    let after = |passes: usize| propagate_labels(&graph, passes).expect("propagate");
    assert_eq!(after(1), vec![Some(7), Some(7), None, None]);
    assert_eq!(after(2), vec![Some(7), Some(7), Some(7), None]);
    assert_eq!(after(3), vec![Some(7), Some(7), Some(7), Some(7)]);
}

#[test]
fn label_propagation_extends_the_training_signal() {
    let (_, mut splits) = small_two_moons(7);
    splits.train = subsample_labels(&splits.train, 0.3, 7).expect("subsample");
    let labeled_before = splits.train.labeled.iter().filter(|&&l| l).count();

    let mut cfg = small_config(7);
    cfg.mode = TrainMode::Great;
    cfg.epochs = 5;
    let params = init_params(&cfg.model, 7).expect("init");
    let graph = build_training_graph(&cfg, &splits.train, &params).expect("graph");
    let labels = propagate_labels(&graph, 1).expect("propagate");
    let labeled_after = labels
        .iter()
        .take(splits.train.len())
        .filter(|l| l.is_some())
        .count();
    assert!(
        labeled_after > labeled_before,
        "propagation added no labels ({labeled_before} before, {labeled_after} after)"
    );

    // The training loop must actually consume the extra labels.
    let mut with = cfg.clone();
    with.propagate_labels = true;
    let on = train_with_init(&with, &splits, params.clone(), Some(graph.clone())).expect("on");
    let off = train_with_init(&cfg, &splits, params, Some(graph)).expect("off");
    assert!(
        on.params.max_abs_diff(&off.params).expect("diff") > 0.0,
        "propagated labels did not change training"
    );
}

#[test]
fn periodic_graph_rebuilds_change_the_run() {
    let (_, splits) = small_two_moons(8);
    let mut cfg = small_config(8);
    cfg.mode = TrainMode::Great;
    cfg.epochs = 8;
    let init = init_params(&cfg.model, 8).expect("init");
    let graph = build_training_graph(&cfg, &splits.train, &init).expect("graph");
    let frozen = train_with_init(&cfg, &splits, init.clone(), Some(graph.clone())).expect("frozen");
    let mut rebuild_cfg = cfg.clone();
    rebuild_cfg.rebuild_graph_every = Some(2);
    let rebuilt = train_with_init(&rebuild_cfg, &splits, init, Some(graph)).expect("rebuilt");
    assert!(rebuilt.graph.is_some());
    assert!(
        rebuilt.params.max_abs_diff(&frozen.params).expect("diff") > 0.0,
        "periodic rebuilds were a no-op"
    );
}
