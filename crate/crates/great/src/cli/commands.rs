//! The five subcommand bodies.
//!
//! Each takes an already-resolved [`RunConfig`] plus the output directory
//! and writes its artifacts through [`fsutil::write_atomic`], so interrupted
//! runs never leave partial files. All randomness comes from the config
//! seed; rerunning a command with the same config reproduces every artifact
//! byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::eval::{accuracy, epsilon_sweep, robust_accuracy, EvalReport, EvalRow};
use crate::fsutil;
use crate::graph::save_graph;
use crate::great::{
    build_training_graph, train, train_from_base, train_with_init, SplitData, TrainConfig,
    TrainMode, TrainOutcome,
};
use crate::nn::{init_params, load_checkpoint, save_checkpoint};
use crate::rng::{stream_rng, Role};
use crate::tensor::Tensor;

use super::config::RunConfig;

/// Trains one model and writes `checkpoint.json`, `training_log.csv`, and
/// `graph.txt` when the mode regularizes over a graph.
pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let cfg = config.train_config()?;
    let data = config.dataset.load(config.seed)?;
    let splits = config
        .dataset
        .split(&data, config.dataset.label_fraction, config.seed)?;
    let outcome = train(&cfg, &splits)?;
    save_checkpoint(
        &out_dir.join("checkpoint.json"),
        &cfg.model,
        &outcome.params,
        config.seed,
    )?;
    outcome.log.save_csv(&out_dir.join("training_log.csv"))?;
    if let Some(graph) = &outcome.graph {
        save_graph(&out_dir.join("graph.txt"), graph)?;
    }
    println!(
        "trained mode {} for {} epochs (seed {})",
        cfg.mode.tag(),
        cfg.epochs,
        cfg.seed
    );
    if let Some(last) = outcome.log.last() {
        println!(
            "final validation accuracy: clean {:.3}, robust {:.3}",
            last.clean_val_acc, last.robust_val_acc
        );
    }
    let clean = accuracy(&cfg.model, &outcome.params, &splits.test)?;
    println!("clean test accuracy: {clean:.3}");
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// Builds the graph a training run with this config would regularize over,
/// using embeddings from `inputs.checkpoint`, and writes `graph.txt`.
pub fn cmd_graph(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let mut cfg = config.train_config()?;
    let checkpoint = load_checkpoint(config.inputs.require_checkpoint()?)?;
    cfg.model = checkpoint.spec.clone();
    let params = checkpoint.params();
    let data = config.dataset.load(config.seed)?;
    let splits = config
        .dataset
        .split(&data, config.dataset.label_fraction, config.seed)?;
    let graph = build_training_graph(&cfg, &splits.train, &params)?;
    save_graph(&out_dir.join("graph.txt"), &graph)?;
    println!(
        "graph over the train split: {} nodes, {} edges (k {}, tau {})",
        graph.nodes().len(),
        graph.edges().len(),
        cfg.graph.k,
        cfg.graph.tau
    );
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// Evaluates `inputs.checkpoint` on the test split, clean plus every
/// `[eval]` method and epsilon, and writes `report.csv` and `report.json`.
pub fn cmd_eval(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let path = config.inputs.require_checkpoint()?;
    let name = path
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let checkpoint = load_checkpoint(path)?;
    let spec = checkpoint.spec.clone();
    let params = checkpoint.params();
    let data = config.dataset.load(config.seed)?;
    let splits = config
        .dataset
        .split(&data, config.dataset.label_fraction, config.seed)?;

    let mut rows = vec![EvalRow {
        model: name.clone(),
        split: "test".into(),
        attack: "none".into(),
        epsilon: 0.0,
        accuracy: accuracy(&spec, &params, &splits.test)?,
    }];
    for &method in &config.eval.methods {
        for &epsilon in &config.eval.epsilons {
            let mut attack = config.attack;
            attack.epsilon = epsilon;
            rows.push(EvalRow {
                model: name.clone(),
                split: "test".into(),
                attack: method.tag().into(),
                epsilon,
                accuracy: robust_accuracy(&spec, &params, &splits.test, method, &attack)?,
            });
        }
    }
    let report = EvalReport::new(config, rows)?;
    report.save_csv(&out_dir.join("report.csv"))?;
    report.save_json(&out_dir.join("report.json"))?;
    for row in &report.rows {
        println!(
            "{:<6} epsilon {:.2}: accuracy {:.3}",
            row.attack, row.epsilon, row.accuracy
        );
    }
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// Attacks the test split with the first `[eval]` method at the configured
/// radius and writes the perturbed samples to `adversarial.csv`.
pub fn cmd_attack(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let checkpoint = load_checkpoint(config.inputs.require_checkpoint()?)?;
    let spec = checkpoint.spec.clone();
    let params = checkpoint.params();
    let data = config.dataset.load(config.seed)?;
    let splits = config
        .dataset
        .split(&data, config.dataset.label_fraction, config.seed)?;
    let method = first_method(config);
    let mut rng = stream_rng(config.seed, Role::Attack, 0, 0);
    let adv = run_attack(
        method,
        &spec,
        &params,
        &splits.test.x,
        &splits.test.y,
        &config.attack,
        Some(&mut rng),
    )?;
    let path = out_dir.join("adversarial.csv");
    fsutil::write_atomic(&path, adversarial_csv(&adv, &splits.test.y).as_bytes())?;
    println!(
        "wrote {} adversarial test samples ({}, epsilon {}) to {}",
        splits.test.y.len(),
        method.tag(),
        config.attack.epsilon,
        path.display()
    );
    Ok(())
}

fn first_method(config: &RunConfig) -> AttackMethod {
    config
        .eval
        .methods
        .first()
        .copied()
        .unwrap_or(AttackMethod::Fgsm)
}

/// Flat CSV, one perturbed sample per row, loadable back through
/// `dataset.kind = "csv"` with the default label column.
fn adversarial_csv(x: &Tensor, y: &[usize]) -> String {
    let n = x.shape()[0];
    let dim = x.values().len() / n;
    let mut out = String::new();
    for j in 0..dim {
        write!(out, "x{j},").unwrap();
    }
    out.push_str("label\n");
    for (i, &label) in y.iter().enumerate() {
        for v in &x.values()[i * dim..(i + 1) * dim] {
            write!(out, "{v:.17e},").unwrap();
        }
        writeln!(out, "{label}").unwrap();
    }
    out
}

/// One sweep unit: everything trained and measured for a (fraction, seed)
/// pair. Modes share the cell's base and warm-up runs.
struct SweepCell {
    fraction_idx: usize,
    /// `(clean, robust)` test accuracy per mode, in [`TrainMode::ALL`] order.
    accuracies: Vec<(f64, f64)>,
    /// Accuracy per `[sweep]` epsilon, per mode.
    curves: Vec<Vec<f64>>,
    /// `(lambda, clean, robust)` rows; filled only at the first fraction.
    lambda_rows: Vec<(f64, f64, f64)>,
}

/// Trains every mode across `sweep.fractions` x seeds and writes median
/// tables: `fraction_table.csv`, `epsilon_curves.csv`, and, when
/// `sweep.lambdas` is non-empty, `lambda_curve.csv`.
///
/// Cells are independent and run in parallel across up to `jobs` threads
/// (all cores when `None`). Regularized modes warm-start from the cell's
/// base run per the usual orchestration, so a cell costs one base run, one
/// warm-up when the lengths differ, and one fine-tune per remaining mode.
pub fn cmd_sweep(config: &RunConfig, out_dir: &Path, jobs: Option<usize>) -> Result<()> {
    let cfg = config.train_config()?;
    if config.sweep.fractions.is_empty() {
        return Err(Error::Config("sweep.fractions must not be empty".into()));
    }
    let seeds = if config.sweep.seeds.is_empty() {
        vec![config.seed]
    } else {
        config.sweep.seeds.clone()
    };
    let mut cells = Vec::new();
    for (fraction_idx, _) in config.sweep.fractions.iter().enumerate() {
        for &seed in &seeds {
            let with_lambda = fraction_idx == 0 && !config.sweep.lambdas.is_empty();
            cells.push((fraction_idx, seed, with_lambda));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build the sweep thread pool: {e}")))?;
    let results: Vec<SweepCell> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(fraction_idx, seed, with_lambda)| {
                run_sweep_cell(config, &cfg, fraction_idx, seed, with_lambda)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let per_seed = |fraction_idx: usize, pick: &dyn Fn(&SweepCell) -> f64| -> f64 {
        median(
            results
                .iter()
                .filter(|c| c.fraction_idx == fraction_idx)
                .map(pick)
                .collect(),
        )
    };

    let mut table = String::from("mode,fraction,clean_accuracy,robust_accuracy\n");
    for (fi, &fraction) in config.sweep.fractions.iter().enumerate() {
        println!("label fraction {:.2} (medians over {} seeds)", fraction, seeds.len());
        println!("  {:<10} {:>6} {:>7}", "mode", "clean", "robust");
        for (mi, mode) in TrainMode::ALL.iter().enumerate() {
            let clean = per_seed(fi, &|c| c.accuracies[mi].0);
            let robust = per_seed(fi, &|c| c.accuracies[mi].1);
            writeln!(
                table,
                "{},{:.17e},{:.17e},{:.17e}",
                mode.tag(),
                fraction,
                clean,
                robust
            )
            .unwrap();
            println!("  {:<10} {clean:>6.3} {robust:>7.3}", mode.tag());
        }
    }
    fsutil::write_atomic(&out_dir.join("fraction_table.csv"), table.as_bytes())?;

    let mut curves = String::from("mode,fraction,epsilon,accuracy\n");
    for (fi, &fraction) in config.sweep.fractions.iter().enumerate() {
        for (mi, mode) in TrainMode::ALL.iter().enumerate() {
            for (ei, &epsilon) in config.sweep.epsilons.iter().enumerate() {
                let acc = per_seed(fi, &|c| c.curves[mi][ei]);
                writeln!(
                    curves,
                    "{},{:.17e},{:.17e},{:.17e}",
                    mode.tag(),
                    fraction,
                    epsilon,
                    acc
                )
                .unwrap();
            }
        }
    }
    fsutil::write_atomic(&out_dir.join("epsilon_curves.csv"), curves.as_bytes())?;

    if !config.sweep.lambdas.is_empty() {
        let fraction = config.sweep.fractions[0];
        let mut curve = String::from("lambda,fraction,clean_accuracy,robust_accuracy\n");
        for (li, &lambda) in config.sweep.lambdas.iter().enumerate() {
            let clean = per_seed(0, &|c| c.lambda_rows[li].1);
            let robust = per_seed(0, &|c| c.lambda_rows[li].2);
            writeln!(
                curve,
                "{:.17e},{:.17e},{:.17e},{:.17e}",
                lambda, fraction, clean, robust
            )
            .unwrap();
        }
        fsutil::write_atomic(&out_dir.join("lambda_curve.csv"), curve.as_bytes())?;
    }
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// Base run, optional longer warm-up, then one fine-tune per remaining mode
/// plus the lambda grid, all on this cell's split and seed.
fn run_sweep_cell(
    config: &RunConfig,
    cfg: &TrainConfig,
    fraction_idx: usize,
    seed: u64,
    with_lambda: bool,
) -> Result<SweepCell> {
    let fraction = config.sweep.fractions[fraction_idx];
    let data = config.dataset.load(seed)?;
    let splits = config.dataset.split(&data, fraction, seed)?;

    let mut base_cfg = cfg.clone();
    base_cfg.mode = TrainMode::Base;
    base_cfg.seed = seed;
    base_cfg.warmup_epochs = None;
    base_cfg.propagate_labels = false;
    let init = init_params(&base_cfg.model, seed)?;
    let base = train_with_init(&base_cfg, &splits, init.clone(), None)?;
    let warm = match cfg.warmup_epochs {
        None => base.clone(),
        Some(w) if w == base_cfg.epochs => base.clone(),
        Some(w) => {
            let warm_cfg = TrainConfig {
                epochs: w,
                ..base_cfg.clone()
            };
            train_with_init(&warm_cfg, &splits, init, None)?
        }
    };

    let method = first_method(config);
    let mut accuracies = Vec::new();
    let mut curves = Vec::new();
    for mode in TrainMode::ALL {
        let outcome = if mode == TrainMode::Base {
            base.clone()
        } else {
            let mode_cfg = TrainConfig {
                mode,
                seed,
                warmup_epochs: None,
                ..cfg.clone()
            };
            train_from_base(&mode_cfg, &splits, &warm.params)?
        };
        accuracies.push(test_accuracies(cfg, &outcome, &splits, method, &config.attack)?);
        let curve = epsilon_sweep(
            &cfg.model,
            &outcome.params,
            &splits.test,
            method,
            &config.attack,
            &config.sweep.epsilons,
        )?;
        curves.push(curve.into_iter().map(|(_, acc)| acc).collect());
    }

    let mut lambda_rows = Vec::new();
    if with_lambda {
        for &lambda in &config.sweep.lambdas {
            let lambda_cfg = TrainConfig {
                mode: TrainMode::Great,
                lambda,
                seed,
                warmup_epochs: None,
                ..cfg.clone()
            };
            let outcome = train_from_base(&lambda_cfg, &splits, &warm.params)?;
            let (clean, robust) = test_accuracies(cfg, &outcome, &splits, method, &config.attack)?;
            lambda_rows.push((lambda, clean, robust));
        }
    }
    Ok(SweepCell {
        fraction_idx,
        accuracies,
        curves,
        lambda_rows,
    })
}

fn test_accuracies(
    cfg: &TrainConfig,
    outcome: &TrainOutcome,
    splits: &SplitData,
    method: AttackMethod,
    attack: &AttackConfig,
) -> Result<(f64, f64)> {
    Ok((
        accuracy(&cfg.model, &outcome.params, &splits.test)?,
        robust_accuracy(&cfg.model, &outcome.params, &splits.test, method, attack)?,
    ))
}

/// Median with the usual two-middle average on even counts. The input is
/// never empty: every caller collects one value per sweep seed.
fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
