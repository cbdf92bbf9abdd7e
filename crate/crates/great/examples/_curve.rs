use great::attacks::AttackMethod;
use great::data::{make_two_moons, subsample_labels};
use great::eval::{accuracy, epsilon_sweep, robust_accuracy};
use great::great::{train_from_base, train_with_init, SplitData, TrainConfig, TrainMode};
use great::nn::{init_params, ModelSpec};

fn main() -> great::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().unwrap().parse().unwrap();
    let fraction: f64 = args.next().unwrap().parse().unwrap();
    let batch: usize = args.next().map_or(128, |v| v.parse().unwrap());
    let warmup: usize = args.next().map_or(300, |v| v.parse().unwrap());
    let data = make_two_moons(1000, 0.1, seed)?;
    let mut splits = SplitData::from_dataset(&data, 0.8, 0.1, seed)?;
    if fraction < 1.0 {
        splits.train = subsample_labels(&splits.train, fraction, seed)?;
    }
    let model = ModelSpec::mlp(&[2, 32, 32, 2])?;
    let mut config = TrainConfig::new(model, TrainMode::Base, seed);
    config.batch_size = batch;
    let init = init_params(&config.model, seed)?;
    let base = train_with_init(&config, &splits, init.clone(), None)?;
    let warm = if warmup == config.epochs {
        base.clone()
    } else {
        let cfg = TrainConfig { epochs: warmup, ..config.clone() };
        train_with_init(&cfg, &splits, init, None)?
    };
    let mut great_out = None;
    for mode in TrainMode::ALL {
        let out = if mode == TrainMode::Base {
            base.clone()
        } else {
            let cfg = TrainConfig { mode, ..config.clone() };
            train_from_base(&cfg, &splits, &warm.params)?
        };
        let clean = accuracy(&config.model, &out.params, &splits.test)?;
        let robust = robust_accuracy(&config.model, &out.params, &splits.test, AttackMethod::Fgsm, &config.attack)?;
        println!("{:<10} {:.3} {:.3}", mode.tag(), clean, robust);
        if mode == TrainMode::Great {
            great_out = Some(out);
        }
    }
    let great = great_out.unwrap();
    let epsilons: Vec<f64> = (0..=8).map(|i| i as f64 * 0.05).collect();
    let mut pgd = config.attack;
    pgd.steps = std::env::var("PGD_STEPS").map_or(10, |v| v.parse().unwrap());
    for (tag, out) in [("base", &base), ("great", &great)] {
        for (name, method, atk) in [("fgsm", AttackMethod::Fgsm, &config.attack), ("pgd10", AttackMethod::Pgd, &pgd)] {
            let curve = epsilon_sweep(&config.model, &out.params, &splits.test, method, atk, &epsilons)?;
            print!("{tag:<6} {name:<6}");
            for (_, acc) in curve {
                print!(" {acc:.3}");
            }
            println!();
        }
    }
    Ok(())
}
