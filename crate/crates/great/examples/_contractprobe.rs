//! Scratch pilot for training-contract thresholds on small data. Not a
//! deliverable.

use great::attacks::AttackMethod;
use great::data::make_two_moons;
use great::eval::{accuracy, robust_accuracy};
use great::great::{train_from_base, train_with_init, SplitData, TrainConfig, TrainMode};
use great::nn::{init_params, ModelSpec};
use std::time::Instant;

fn main() {
    for seed in 1..=3u64 {
        let t0 = Instant::now();
        let data = make_two_moons(300, 0.1, seed).unwrap();
        let splits = SplitData::from_dataset(&data, 0.7, 0.15, seed).unwrap();
        let model = ModelSpec::mlp(&[2, 16, 16, 2]).unwrap();
        let mut cfg = TrainConfig::new(model, TrainMode::Base, seed);
        cfg.epochs = 100;
        let init = init_params(&cfg.model, seed).unwrap();
        let base = train_with_init(&cfg, &splits, init, None).unwrap();
        let base_clean = accuracy(&cfg.model, &base.params, &splits.test).unwrap();
        let base_robust = robust_accuracy(
            &cfg.model,
            &base.params,
            &splits.test,
            AttackMethod::Fgsm,
            &cfg.attack,
        )
        .unwrap();

        let great_cfg = TrainConfig {
            mode: TrainMode::Great,
            ..cfg.clone()
        };
        let great = train_from_base(&great_cfg, &splits, &base.params).unwrap();
        let records = &great.log.records;
        let ratio = records.last().unwrap().loss.total / records[0].loss.total;
        let great_clean = accuracy(&cfg.model, &great.params, &splits.test).unwrap();
        let great_robust = robust_accuracy(
            &cfg.model,
            &great.params,
            &splits.test,
            AttackMethod::Fgsm,
            &cfg.attack,
        )
        .unwrap();
        println!(
            "seed {seed}: base {base_clean:.3}/{base_robust:.3} great {great_clean:.3}/{great_robust:.3} ratio {ratio:.4} ({:.1?})",
            t0.elapsed()
        );
    }
}
