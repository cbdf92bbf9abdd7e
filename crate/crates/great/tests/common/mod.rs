//! Shared harness for the integration suites: a finite-difference gradient
//! checker, a brute-force graph oracle, a randomized attack-invariant
//! runner, and the two-moons cell used by the mode-comparison tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use great::attacks::{input_gradient, run_attack, AttackConfig, AttackMethod, Norm};
use great::data::{make_two_moons, subsample_labels, Dataset};
use great::eval::{accuracy, epsilon_sweep, robust_accuracy};
use great::graph::{cosine, EdgeKind, GraphConfig, GraphEdge, GraphNode};
use great::great::{
    build_training_graph, great_loss, train_from_base, train_with_init, EpochTwins, SplitData,
    StepInputs, TrainConfig, TrainMode,
};
use great::nn::{bind_params, collect_grads, init_params, ModelSpec, ParamSet};
use great::rng::{stream_rng, Role};
use great::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

/// Outcome of comparing analytic gradients against central differences.
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the two difference quotients disagreed,
    /// meaning the finite difference itself is unreliable there (a kink
    /// between the evaluation points).
    pub excluded: usize,
}

impl FdReport {
    /// Asserts the report is conclusive: below tolerance, mostly included.
    pub fn assert_ok(&self, tolerance: f64, what: &str) {
        assert!(self.checked > 0, "{what}: nothing was checked");
        assert!(
            self.excluded * 10 <= self.checked + self.excluded,
            "{what}: {} of {} coordinates were kink-adjacent; the fixture is unusable",
            self.excluded,
            self.checked + self.excluded
        );
        assert!(
            self.max_rel_err < tolerance,
            "{what}: max relative gradient error {:.3e} is not below {tolerance:.0e}",
            self.max_rel_err
        );
    }
}

fn eval_perturbed(
    params: &ParamSet,
    i: usize,
    j: usize,
    delta: f64,
    loss: &mut dyn FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut p = params.clone();
    p.params_mut()[i].values[j] += delta;
    loss(&p)
}

/// Flags a coordinate where the finite difference itself is unreliable,
/// judged only from loss values, never from the analytic gradient, so a
/// wrong gradient cannot hide behind the exclusion. Two symptoms:
///
/// * the two central quotients disagree (a kink between the probe points);
/// * the second difference does not shrink by the factor 4 a smooth
///   function must show under step halving (a kink at or very near the
///   evaluation point, where both quotients agree on the same wrong value).
pub fn kink_suspect(fd: f64, fd_half: f64, d2: f64, d2_half: f64) -> bool {
    if (fd - fd_half).abs() > 0.05 * fd.abs().max(fd_half.abs()) + 1e-7 {
        return true;
    }
    d2.abs() > 1e-9 && !(3.5..=4.5).contains(&(d2 / d2_half))
}

/// Central-difference check of `grads` against `loss` over every parameter
/// coordinate, at step `h` and `h/2` with Richardson extrapolation.
/// Coordinates [`kink_suspect`] flags are excluded and counted.
pub fn fd_check(
    params: &ParamSet,
    grads: &[Option<Vec<f64>>],
    mut loss: impl FnMut(&ParamSet) -> f64,
    h: f64,
) -> FdReport {
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
    };
    let f0 = loss(params);
    for i in 0..params.params().len() {
        for j in 0..params.params()[i].values.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
            let up = eval_perturbed(params, i, j, h, &mut loss);
            let down = eval_perturbed(params, i, j, -h, &mut loss);
            let up_half = eval_perturbed(params, i, j, h / 2.0, &mut loss);
            let down_half = eval_perturbed(params, i, j, -h / 2.0, &mut loss);
            let fd = (up - down) / (2.0 * h);
            let fd_half = (up_half - down_half) / h;
            let d2 = up + down - 2.0 * f0;
            let d2_half = up_half + down_half - 2.0 * f0;
            if kink_suspect(fd, fd_half, d2, d2_half) {
                report.excluded += 1;
                continue;
            }
            // Richardson extrapolation cancels the h^2 truncation term.
            let fd_best = (4.0 * fd_half - fd) / 3.0;
            let rel = (g - fd_best).abs() / g.abs().max(fd_best.abs()).max(1e-6);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// The objective value for fixed step inputs, as a pure function of the
/// parameters. Dropout draws from the same stream every call, so masks stay
/// fixed across perturbed evaluations.
pub fn objective_value(cfg: &TrainConfig, inputs: &StepInputs, params: &ParamSet) -> f64 {
    let mut tape = Tape::new();
    let mut p = params.clone();
    let bound = bind_params(&mut tape, &p).expect("parameters bind");
    let mut rng = stream_rng(cfg.seed, Role::Dropout, 0, 0);
    great_loss(&mut tape, cfg, &mut p, &bound, inputs, Some(&mut rng))
        .expect("loss builds")
        .breakdown
        .total
}

/// One backward pass over the same objective; gradients align with
/// `params.params()` order.
pub fn objective_grads(
    cfg: &TrainConfig,
    inputs: &StepInputs,
    params: &ParamSet,
) -> Vec<Option<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut p = params.clone();
    let bound = bind_params(&mut tape, &p).expect("parameters bind");
    let mut rng = stream_rng(cfg.seed, Role::Dropout, 0, 0);
    let loss = great_loss(&mut tape, cfg, &mut p, &bound, inputs, Some(&mut rng))
        .expect("loss builds");
    tape.backward(loss.total).expect("backward");
    collect_grads(&tape, &bound, params)
}

/// Runs the full check for one supervised fixture and returns the report.
pub fn fd_check_model(spec: ModelSpec, n: usize, seed: u64, h: f64) -> FdReport {
    let (cfg, inputs, params) = supervised_fixture(spec, n, seed);
    let grads = objective_grads(&cfg, &inputs, &params);
    fd_check(&params, &grads, |p| objective_value(&cfg, &inputs, p), h)
}

/// A single supervised batch (clean cross-entropy only) for an arbitrary
/// architecture: uniform inputs in [0, 1], labels round-robin.
pub fn supervised_fixture(spec: ModelSpec, n: usize, seed: u64) -> (TrainConfig, StepInputs, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim: usize = spec.input_shape.iter().product();
    let values: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let x = Tensor::from_vec(shape, values).expect("fixture tensor");
    let num_classes = spec.validate().expect("valid spec").1;
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let params = init_params(&spec, seed).expect("init");
    let cfg = TrainConfig::new(spec, TrainMode::Base, seed);
    (cfg, StepInputs::supervised(x, labels), params)
}

/// A full-objective batch: every supervised and regularizer term active,
/// with a real graph and fixed adversarial twins, on a small two-moons
/// training split.
pub fn composite_fixture(
    distance: great::great::DistanceKind,
    seed: u64,
) -> (TrainConfig, StepInputs, ParamSet) {
    let data = make_two_moons(60, 0.1, seed).expect("dataset");
    let splits = SplitData::from_dataset(&data, 0.6, 0.2, seed).expect("split");
    let model = ModelSpec::mlp(&[2, 8, 6, 2]).expect("model");
    let mut cfg = TrainConfig::new(model, TrainMode::Great, seed);
    cfg.distance = distance;
    cfg.batch_size = splits.train.len();
    let params = init_params(&cfg.model, seed).expect("init");
    let graph = build_training_graph(&cfg, &splits.train, &params).expect("graph");
    let labeled = splits.train.labeled_indices();
    let (x, y) = splits.train.batch(&labeled).expect("batch");
    let x_adv = run_attack(
        AttackMethod::Fgsm,
        &cfg.model,
        &params,
        &x,
        &y,
        &cfg.attack,
        None,
    )
    .expect("twins");
    let twins = EpochTwins::new(x_adv, &labeled, splits.train.len());
    let mut steps =
        great::great::assemble_epoch_batches(&cfg, &splits.train, Some(&graph), Some(&twins), 0)
            .expect("batches");
    assert_eq!(steps.len(), 1, "fixture expects a single full batch");
    (cfg, steps.remove(0), params)
}

// ---------------------------------------------------------------------------
// Brute-force graph oracle.

/// Quadratic reference construction: for every node, keep the k most
/// cosine-similar other nodes at or above tau, preferring the lower id on
/// exact ties; then apply the mutual filter; order edges by source, weight
/// descending, destination ascending.
pub fn brute_force_edges(nodes: &[GraphNode], config: &GraphConfig) -> Vec<GraphEdge> {
    let n = nodes.len();
    let mut per_node: Vec<Vec<GraphEdge>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = oracle_cosine(&nodes[i].embedding, &nodes[j].embedding);
            if c >= config.tau {
                candidates.push((c, j));
            }
        }
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.truncate(config.k);
        per_node.push(
            candidates
                .into_iter()
                .map(|(c, j)| GraphEdge {
                    src: i,
                    dst: j,
                    weight: c.clamp(0.0, 1.0),
                    kind: EdgeKind::of(nodes[i].adversarial, nodes[j].adversarial),
                })
                .collect(),
        );
    }
    let mut edges: Vec<GraphEdge> = if config.mutual {
        let selected: std::collections::HashSet<(usize, usize)> = per_node
            .iter()
            .flatten()
            .map(|e| (e.src, e.dst))
            .collect();
        per_node
            .into_iter()
            .flatten()
            .filter(|e| selected.contains(&(e.dst, e.src)))
            .collect()
    } else {
        per_node.into_iter().flatten().collect()
    };
    edges.sort_by(|a, b| {
        a.src
            .cmp(&b.src)
            .then(b.weight.partial_cmp(&a.weight).unwrap())
            .then(a.dst.cmp(&b.dst))
    });
    edges
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Random node set with exact similarity ties: a fraction of nodes reuse an
/// earlier node's embedding verbatim, so candidate weights collide exactly
/// and only the id tie-break decides.
pub fn random_nodes(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<GraphNode> {
    let mut nodes: Vec<GraphNode> = Vec::with_capacity(n);
    for id in 0..n {
        let embedding = if id > 0 && rng.random::<f64>() < 0.2 {
            nodes[rng.random_range(0..id)].embedding.clone()
        } else {
            loop {
                let e: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if e.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3 {
                    break e;
                }
            }
        };
        nodes.push(GraphNode {
            id,
            sample_index: id,
            adversarial: rng.random::<f64>() < 0.3,
            label: if rng.random::<f64>() < 0.5 {
                Some(rng.random_range(0..3))
            } else {
                None
            },
            embedding,
        });
    }
    nodes
}

/// Asserts the built edge list matches the oracle exactly: same order, same
/// endpoints and kinds, weights within one floating-point reformulation.
pub fn assert_edges_match(built: &[GraphEdge], oracle: &[GraphEdge], what: &str) {
    assert_eq!(built.len(), oracle.len(), "{what}: edge count differs");
    for (i, (b, o)) in built.iter().zip(oracle).enumerate() {
        assert_eq!((b.src, b.dst, b.kind), (o.src, o.dst, o.kind), "{what}: edge {i} differs");
        assert!(
            (b.weight - o.weight).abs() <= 1e-12,
            "{what}: edge {i} weight {} vs oracle {}",
            b.weight,
            o.weight
        );
    }
}

/// Sanity anchor for both cosine routes: a hand-computed value.
pub fn cosine_reference_check() {
    let got = cosine(&[1.0, 0.0], &[1.0, 1.0]).expect("cosine");
    let expected = 1.0 / 2.0f64.sqrt();
    assert!((got - expected).abs() < 1e-15);
    assert!((oracle_cosine(&[1.0, 0.0], &[1.0, 1.0]) - expected).abs() < 1e-15);
}

// ---------------------------------------------------------------------------
// Randomized attack invariants.

pub struct AttackStats {
    pub cases: usize,
    pub saturation_checks: usize,
    pub pgd_fgsm_pairs: usize,
}

/// Runs `cases` randomized attack scenarios and asserts, for each result:
/// ball membership within epsilon + 1e-9, range clipping, exact L-infinity
/// FGSM saturation at interior nonzero-gradient coordinates, and
/// PGD(steps=1, step=epsilon) == FGSM to 1e-12.
pub fn run_attack_invariants(cases: usize, base_seed: u64) -> AttackStats {
    let mut stats = AttackStats {
        cases,
        saturation_checks: 0,
        pgd_fgsm_pairs: 0,
    };
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(case as u64));
        let in_dim = rng.random_range(2..6);
        let hidden = rng.random_range(3..9);
        let classes = rng.random_range(2..5);
        let spec = ModelSpec::mlp(&[in_dim, hidden, classes]).expect("model");
        let params = init_params(&spec, base_seed ^ case as u64).expect("init");

        let (clip_min, clip_max) = if rng.random::<f64>() < 0.5 {
            (0.0, 1.0)
        } else {
            (-0.25, 1.25)
        };
        let n = rng.random_range(1..16);
        let values: Vec<f64> = (0..n * in_dim)
            .map(|_| rng.random_range(clip_min..clip_max))
            .collect();
        let x = Tensor::from_vec(vec![n, in_dim], values).expect("inputs");
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

        let norm = if rng.random::<f64>() < 0.5 { Norm::Linf } else { Norm::L2 };
        let method = if rng.random::<f64>() < 0.5 {
            AttackMethod::Fgsm
        } else {
            AttackMethod::Pgd
        };
        let epsilon = if case % 17 == 0 { 0.0 } else { rng.random_range(0.01..0.5) };
        let steps = rng.random_range(1..8);
        let random_start = method == AttackMethod::Pgd && rng.random::<f64>() < 0.5;
        let config = AttackConfig {
            norm,
            epsilon,
            steps,
            step_size: if rng.random::<f64>() < 0.3 && epsilon > 0.0 {
                Some(epsilon * rng.random_range(0.2..1.0))
            } else {
                None
            },
            random_start,
            clip_min,
            clip_max,
        };
        let mut attack_rng = ChaCha8Rng::seed_from_u64(case as u64);
        let adv = run_attack(method, &spec, &params, &x, &labels, &config, Some(&mut attack_rng))
            .expect("attack runs");

        assert_eq!(adv.shape(), x.shape(), "case {case}: shape changed");
        assert_ball_membership(&x, &adv, &config, n, in_dim, case);
        for (i, v) in adv.values().iter().enumerate() {
            assert!(
                (config.clip_min..=config.clip_max).contains(v),
                "case {case}: coordinate {i} = {v} escapes the clip range"
            );
        }

        if method == AttackMethod::Fgsm && norm == Norm::Linf && epsilon > 0.0 {
            stats.saturation_checks +=
                assert_fgsm_saturation(&spec, &params, &x, &labels, &adv, &config, case);
        }
        if method == AttackMethod::Fgsm {
            let paired = AttackConfig {
                steps: 1,
                step_size: if epsilon > 0.0 { Some(epsilon) } else { None },
                random_start: false,
                ..config
            };
            let pgd = run_attack(AttackMethod::Pgd, &spec, &params, &x, &labels, &paired, None)
                .expect("paired pgd");
            let max_diff = adv
                .values()
                .iter()
                .zip(pgd.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(
                max_diff <= 1e-12,
                "case {case}: single-step PGD differs from FGSM by {max_diff:e}"
            );
            stats.pgd_fgsm_pairs += 1;
        }
    }
    stats
}

fn assert_ball_membership(
    x: &Tensor,
    adv: &Tensor,
    config: &AttackConfig,
    n: usize,
    dim: usize,
    case: usize,
) {
    match config.norm {
        Norm::Linf => {
            for (i, (a, b)) in x.values().iter().zip(adv.values()).enumerate() {
                assert!(
                    (a - b).abs() <= config.epsilon + 1e-9,
                    "case {case}: coordinate {i} moved {} > epsilon {}",
                    (a - b).abs(),
                    config.epsilon
                );
            }
        }
        Norm::L2 => {
            for s in 0..n {
                let d: f64 = (0..dim)
                    .map(|j| {
                        let diff = adv.values()[s * dim + j] - x.values()[s * dim + j];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    d <= config.epsilon + 1e-9,
                    "case {case}: sample {s} moved {d} > epsilon {}",
                    config.epsilon
                );
            }
        }
    }
}

/// At coordinates with a nonzero input gradient that ended strictly inside
/// the clip range, the L-infinity FGSM displacement must be exactly epsilon.
fn assert_fgsm_saturation(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    adv: &Tensor,
    config: &AttackConfig,
    case: usize,
) -> usize {
    let grad = input_gradient(spec, params, x, labels).expect("input gradient");
    let mut checked = 0;
    for (i, ((&orig, &new), &g)) in x
        .values()
        .iter()
        .zip(adv.values())
        .zip(&grad)
        .enumerate()
    {
        let interior = new > config.clip_min && new < config.clip_max;
        if g != 0.0 && interior {
            assert!(
                ((new - orig).abs() - config.epsilon).abs() <= 1e-12,
                "case {case}: coordinate {i} moved {} instead of saturating at {}",
                (new - orig).abs(),
                config.epsilon
            );
            checked += 1;
        } else if g == 0.0 {
            assert_eq!(new, orig, "case {case}: coordinate {i} moved without gradient");
        }
    }
    checked
}

// ---------------------------------------------------------------------------
// The pinned two-moons comparison cell.

/// Everything the mode-comparison tests measure for one (fraction, seed)
/// cell. Accuracies are on the test split, in [`TrainMode::ALL`] order.
pub struct CellOutcome {
    pub clean: [f64; 5],
    pub robust: [f64; 5],
    /// Robust accuracy per sweep epsilon for the plain and fully
    /// regularized models.
    pub base_curve: Vec<f64>,
    pub great_curve: Vec<f64>,
    /// Last / first epoch total loss of the fully regularized run.
    pub great_loss_ratio: f64,
}

/// The evaluation grid matching the training attack: radii 0 to 0.4.
pub fn sweep_epsilons() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

/// Training configuration for the comparison protocol: 2-32-32-2 MLP,
/// epsilon 0.2 L-infinity, k 2, tau 0.8, lambda 1, unit alphas, Adam at
/// 0.001, 200 epochs in batches of 128, with a 375-epoch base stage feeding
/// the warm start and the graph.
pub fn comparison_config(seed: u64) -> TrainConfig {
    let model = ModelSpec::mlp(&[2, 32, 32, 2]).expect("model");
    let mut cfg = TrainConfig::new(model, TrainMode::Base, seed);
    cfg.batch_size = 128;
    cfg.warmup_epochs = Some(375);
    cfg
}

/// Splits two-moons, hides labels down to `fraction`, trains all five modes
/// (regularized ones warm-started from the shared base stage), and measures
/// the test split.
pub fn run_comparison_cell(fraction: f64, seed: u64) -> CellOutcome {
    let data = make_two_moons(1000, 0.1, seed).expect("dataset");
    let mut splits = SplitData::from_dataset(&data, 0.8, 0.1, seed).expect("split");
    if fraction < 1.0 {
        splits.train = subsample_labels(&splits.train, fraction, seed).expect("subsample");
    }
    let cfg = comparison_config(seed);
    let init = init_params(&cfg.model, seed).expect("init");
    let base = train_with_init(&cfg, &splits, init.clone(), None).expect("base run");
    let warm = match cfg.warmup_epochs {
        Some(epochs) if epochs != cfg.epochs => {
            let warm_cfg = TrainConfig { epochs, ..cfg.clone() };
            train_with_init(&warm_cfg, &splits, init, None).expect("warm run")
        }
        _ => base.clone(),
    };

    let epsilons = sweep_epsilons();
    let mut outcome = CellOutcome {
        clean: [0.0; 5],
        robust: [0.0; 5],
        base_curve: Vec::new(),
        great_curve: Vec::new(),
        great_loss_ratio: f64::NAN,
    };
    for (m, mode) in TrainMode::ALL.into_iter().enumerate() {
        let run = if mode == TrainMode::Base {
            base.clone()
        } else {
            let mode_cfg = TrainConfig {
                mode,
                warmup_epochs: None,
                ..cfg.clone()
            };
            train_from_base(&mode_cfg, &splits, &warm.params).expect("fine-tune")
        };
        outcome.clean[m] = accuracy(&cfg.model, &run.params, &splits.test).expect("clean");
        outcome.robust[m] = robust_accuracy(
            &cfg.model,
            &run.params,
            &splits.test,
            AttackMethod::Fgsm,
            &cfg.attack,
        )
        .expect("robust");
        if mode == TrainMode::Base || mode == TrainMode::Great {
            let curve = epsilon_sweep(
                &cfg.model,
                &run.params,
                &splits.test,
                AttackMethod::Fgsm,
                &cfg.attack,
                &epsilons,
            )
            .expect("sweep");
            let accs = curve.into_iter().map(|(_, a)| a).collect();
            if mode == TrainMode::Base {
                outcome.base_curve = accs;
            } else {
                outcome.great_curve = accs;
            }
        }
        if mode == TrainMode::Great {
            let records = &run.log.records;
            outcome.great_loss_ratio =
                records.last().expect("log").loss.total / records[0].loss.total;
        }
    }
    outcome
}

/// Median with the two-middle average on even counts.
pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    assert!(n > 0, "median of nothing");
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A small dataset plus splits for the cheap contract tests.
pub fn small_two_moons(seed: u64) -> (Dataset, SplitData) {
    let data = make_two_moons(300, 0.1, seed).expect("dataset");
    let splits = SplitData::from_dataset(&data, 0.7, 0.15, seed).expect("split");
    (data, splits)
}
