use great::data::{make_two_moons, subsample_labels};
use great::great::{train_from_base, train_with_init, SplitData, TrainConfig, TrainMode};
use great::nn::{init_params, ModelSpec};

fn main() -> great::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().unwrap().parse().unwrap();
    let data = make_two_moons(1000, 0.1, seed)?;
    let mut splits = SplitData::from_dataset(&data, 0.8, 0.1, seed)?;
    splits.train = subsample_labels(&splits.train, 0.5, seed)?;
    let model = ModelSpec::mlp(&[2, 32, 32, 2])?;
    let mut config = TrainConfig::new(model, TrainMode::Base, seed);
    config.batch_size = 128;
    let init = init_params(&config.model, seed)?;
    let warm_cfg = TrainConfig { epochs: 375, ..config.clone() };
    let warm = train_with_init(&warm_cfg, &splits, init, None)?;
    let cfg = TrainConfig { mode: TrainMode::Great, ..config.clone() };
    let out = train_from_base(&cfg, &splits, &warm.params)?;
    let first = out.log.records.first().unwrap().loss.total;
    let last = out.log.records.last().unwrap().loss.total;
    println!("seed {seed}: epoch1 {first:.6} epoch200 {last:.6} ratio {:.4}", last / first);
    Ok(())
}
