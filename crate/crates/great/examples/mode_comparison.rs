//! Trains all five modes on two moons and compares clean versus robust
//! test accuracy.
//!
//! The base model trains from scratch; every other mode warm-starts from
//! it (the graph modes also build their similarity graph from the base
//! embedding). Robust accuracy is measured with a white-box single-step
//! attack at the training perturbation size.
//!
//! Usage: `cargo run --example mode_comparison [seed]`

use great::attacks::AttackMethod;
use great::data::{make_two_moons, subsample_labels};
use great::eval::{accuracy, robust_accuracy};
use great::great::{train_from_base, train_with_init, SplitData, TrainConfig, TrainMode};
use great::nn::{init_params, ModelSpec};

fn main() -> great::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(7);
    let label_fraction: f64 = args
        .next()
        .map(|s| s.parse().expect("fraction must be a float"))
        .unwrap_or(1.0);
    let batch_size: usize = args
        .next()
        .map(|s| s.parse().expect("batch size must be an integer"))
        .unwrap_or(64);

    let data = make_two_moons(1000, 0.1, seed)?;
    let mut splits = SplitData::from_dataset(&data, 0.8, 0.1, seed)?;
    if label_fraction < 1.0 {
        splits.train = subsample_labels(&splits.train, label_fraction, seed)?;
    }
    let model = ModelSpec::mlp(&[2, 32, 32, 2])?;
    let mut config = TrainConfig::new(model, TrainMode::Base, seed);
    config.batch_size = batch_size;

    println!(
        "two moons, {} train / {} val / {} test, {:.0}% labeled, seed {seed}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        100.0 * label_fraction,
    );
    println!("{:<10} {:>9} {:>10}  (epsilon = {})", "mode", "clean", "robust", config.attack.epsilon);

    let started = std::time::Instant::now();
    let init = init_params(&config.model, seed)?;
    let base = train_with_init(&config, &splits, init, None)?;
    for mode in TrainMode::ALL {
        let outcome = if mode == TrainMode::Base {
            base.clone()
        } else {
            let cfg = TrainConfig {
                mode,
                ..config.clone()
            };
            train_from_base(&cfg, &splits, &base.params)?
        };
        let clean = accuracy(&config.model, &outcome.params, &splits.test)?;
        let robust = robust_accuracy(
            &config.model,
            &outcome.params,
            &splits.test,
            AttackMethod::Fgsm,
            &config.attack,
        )?;
        println!("{:<10} {:>9.3} {:>10.3}", mode.tag(), clean, robust);
    }
    println!("total wall time: {:.1?}", started.elapsed());
    Ok(())
}
