//! Randomized contracts for the attack implementations: ball membership,
//! range clipping, L-infinity saturation, and single-step equivalence.

mod common;

use great::attacks::{run_attack, AttackConfig, AttackMethod, Norm};
use great::nn::{init_params, ModelSpec};
use great::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn randomized_attacks_respect_their_contracts() {
    let stats = common::run_attack_invariants(1000, 0xA77A);
    // The case mix must actually exercise every invariant.
    assert!(stats.saturation_checks > 1000, "too few saturation checks");
    assert!(stats.pgd_fgsm_pairs > 300, "too few single-step comparisons");
}

#[test]
fn zero_budget_returns_inputs_unchanged() {
    let spec = ModelSpec::mlp(&[3, 4, 2]).expect("model");
    let params = init_params(&spec, 1).expect("init");
    let x = Tensor::from_vec(vec![2, 3], vec![0.1, 0.5, 0.9, 0.4, 0.2, 0.6]).expect("inputs");
    let labels = vec![0, 1];
    for method in [AttackMethod::Fgsm, AttackMethod::Pgd] {
        let config = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let adv = run_attack(method, &spec, &params, &x, &labels, &config, None).expect("attack");
        assert_eq!(adv.values(), x.values(), "{method:?} moved with zero budget");
    }
}

#[test]
fn random_start_without_rng_is_rejected() {
    let spec = ModelSpec::mlp(&[2, 3, 2]).expect("model");
    let params = init_params(&spec, 1).expect("init");
    let x = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).expect("inputs");
    let config = AttackConfig {
        random_start: true,
        steps: 3,
        ..AttackConfig::default()
    };
    let err = run_attack(AttackMethod::Pgd, &spec, &params, &x, &[0], &config, None);
    assert!(err.is_err(), "random start must require an rng");
}

#[test]
fn pgd_random_start_is_reproducible_per_seed() {
    let spec = ModelSpec::mlp(&[2, 4, 2]).expect("model");
    let params = init_params(&spec, 3).expect("init");
    let x = Tensor::from_vec(vec![3, 2], vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1]).expect("inputs");
    let labels = vec![0, 1, 0];
    // One tiny step from the random start, so the start point is still
    // visible in the output instead of being saturated away.
    let config = AttackConfig {
        random_start: true,
        steps: 1,
        step_size: Some(0.01),
        ..AttackConfig::default()
    };
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_attack(
            AttackMethod::Pgd,
            &spec,
            &params,
            &x,
            &labels,
            &config,
            Some(&mut rng),
        )
        .expect("attack")
    };
    assert_eq!(run(9).values(), run(9).values(), "same seed must repeat exactly");
    assert_ne!(run(9).values(), run(10).values(), "different seeds must differ");
}

#[test]
fn l2_attack_moves_along_the_gradient_direction() {
    // For a one-step L2 attack the displacement must be epsilon times the
    // normalized input gradient, sample by sample.
    let spec = ModelSpec::mlp(&[4, 5, 3]).expect("model");
    let params = init_params(&spec, 7).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let values: Vec<f64> = (0..3 * 4).map(|_| rand::Rng::random_range(&mut rng, 0.3..0.7)).collect();
    let x = Tensor::from_vec(vec![3, 4], values).expect("inputs");
    let labels = vec![0, 1, 2];
    let config = AttackConfig {
        norm: Norm::L2,
        epsilon: 0.05,
        steps: 1,
        step_size: Some(0.05),
        ..AttackConfig::default()
    };
    let adv = run_attack(AttackMethod::Fgsm, &spec, &params, &x, &labels, &config, None)
        .expect("attack");
    let grad = great::attacks::input_gradient(&spec, &params, &x, &labels).expect("gradient");
    for s in 0..3 {
        let g = &grad[s * 4..(s + 1) * 4];
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gnorm > 1e-9, "fixture gradient vanished");
        for j in 0..4 {
            let expected = x.values()[s * 4 + j] + config.epsilon * g[j] / gnorm;
            let got = adv.values()[s * 4 + j];
            // Inputs sit well inside [0, 1], so clipping cannot bind here.
            assert!(
                (got - expected).abs() < 1e-12,
                "sample {s} coordinate {j}: {got} vs {expected}"
            );
        }
    }
}
