//! Analytic gradients versus central finite differences, for every layer
//! primitive and for the full composite objective.
//!
//! Each fixture builds the loss twice per coordinate (two step sizes) and
//! compares the reverse-mode gradient against the Richardson-extrapolated
//! quotient. Coordinates where the two quotients disagree are excluded as
//! kink-adjacent before any analytic value is consulted.

mod common;

use common::{fd_check, fd_check_model, objective_grads, objective_value, supervised_fixture};
use great::attacks::input_gradient;
use great::great::DistanceKind;
use great::nn::{bind_params_with, forward, LayerSpec, Mode, ModelSpec};
use great::tensor::Tape;
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_H: f64 = 1e-5;
const COMPOSITE_H: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;

fn spec(input_shape: &[usize], layers: Vec<LayerSpec>, embedding_layer: usize) -> ModelSpec {
    let spec = ModelSpec {
        input_shape: input_shape.to_vec(),
        layers,
        embedding_layer,
    };
    spec.validate().expect("fixture spec");
    spec
}

#[test]
fn dense_gradients_match_finite_differences() {
    let spec = spec(&[4], vec![LayerSpec::Dense { in_dim: 4, out_dim: 3 }], 0);
    fd_check_model(spec, 6, 7, PRIMITIVE_H).assert_ok(TOLERANCE, "dense");
}

#[test]
fn relu_gradients_match_finite_differences() {
    let spec = ModelSpec::mlp(&[4, 5, 3]).expect("mlp");
    fd_check_model(spec, 6, 11, PRIMITIVE_H).assert_ok(TOLERANCE, "relu stack");
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let spec = spec(
        &[3],
        vec![
            LayerSpec::BatchNorm { dim: 3 },
            LayerSpec::Dense { in_dim: 3, out_dim: 2 },
        ],
        0,
    );
    fd_check_model(spec, 5, 13, PRIMITIVE_H).assert_ok(TOLERANCE, "batchnorm");
}

#[test]
fn dropout_gradients_match_finite_differences() {
    // The mask is a function of the stream seed only, so every perturbed
    // evaluation sees the same mask and the loss stays differentiable.
    let spec = spec(
        &[4],
        vec![
            LayerSpec::Dense { in_dim: 4, out_dim: 6 },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { in_dim: 6, out_dim: 2 },
        ],
        0,
    );
    fd_check_model(spec, 8, 17, PRIMITIVE_H).assert_ok(TOLERANCE, "dropout");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let spec = spec(
        &[4, 4, 1],
        vec![
            LayerSpec::Conv2d { kh: 2, kw: 2, cin: 1, cout: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 18, out_dim: 2 },
        ],
        1,
    );
    fd_check_model(spec, 4, 19, PRIMITIVE_H).assert_ok(TOLERANCE, "conv2d");
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let spec = spec(
        &[5, 5, 1],
        vec![
            LayerSpec::Conv2d { kh: 2, kw: 2, cin: 1, cout: 2 },
            LayerSpec::MaxPool2d { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 8, out_dim: 2 },
        ],
        2,
    );
    fd_check_model(spec, 4, 23, PRIMITIVE_H).assert_ok(TOLERANCE, "maxpool");
}

#[test]
fn composite_objective_gradients_match_finite_differences() {
    // Full objective: clean and adversarial cross-entropy plus all four
    // neighbor regularizers over a real graph, for both distances.
    for (distance, name) in [
        (DistanceKind::L2Squared, "squared distance"),
        (DistanceKind::L1, "absolute distance"),
    ] {
        let (cfg, inputs, params) = common::composite_fixture(distance, 11);
        let grads = objective_grads(&cfg, &inputs, &params);
        let report = fd_check(
            &params,
            &grads,
            |p| objective_value(&cfg, &inputs, p),
            COMPOSITE_H,
        );
        report.assert_ok(TOLERANCE, name);
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    // Same check for the gradient with respect to the inputs, which is the
    // quantity every attack consumes.
    let (cfg, inputs, params) = supervised_fixture(ModelSpec::mlp(&[3, 6, 2]).expect("mlp"), 5, 29);
    let grad = input_gradient(&cfg.model, &params, &inputs.x, &inputs.labels).expect("gradient");
    let eval_at = |values: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xid = tape
            .leaf(inputs.x.shape().to_vec(), values.to_vec(), false)
            .expect("leaf");
        let bound = bind_params_with(&mut tape, &params, false).expect("bind");
        let mut scratch = params.clone();
        let out = forward::<ChaCha8Rng>(&mut tape, &cfg.model, &mut scratch, &bound, xid, Mode::Eval, None)
            .expect("forward");
        let loss = tape
            .softmax_cross_entropy(out.logits, &inputs.labels)
            .expect("loss");
        tape.scalar_value(loss).expect("scalar")
    };
    let h = PRIMITIVE_H;
    let f0 = eval_at(inputs.x.values());
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut excluded = 0;
    for i in 0..grad.len() {
        let probe = |delta: f64| {
            let mut values = inputs.x.values().to_vec();
            values[i] += delta;
            eval_at(&values)
        };
        let (up, down) = (probe(h), probe(-h));
        let (up_half, down_half) = (probe(h / 2.0), probe(-h / 2.0));
        let fd = (up - down) / (2.0 * h);
        let fd_half = (up_half - down_half) / h;
        if common::kink_suspect(fd, fd_half, up + down - 2.0 * f0, up_half + down_half - 2.0 * f0) {
            excluded += 1;
            continue;
        }
        let fd_best = (4.0 * fd_half - fd) / 3.0;
        let rel = (grad[i] - fd_best).abs() / grad[i].abs().max(fd_best.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    assert!(checked > 0, "input gradient: nothing checked");
    assert!(excluded * 10 <= grad.len(), "input gradient: too many kinks");
    assert!(
        max_rel < TOLERANCE,
        "input gradient: max relative error {max_rel:.3e}"
    );
}
