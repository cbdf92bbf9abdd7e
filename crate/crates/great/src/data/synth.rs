//! Synthetic datasets.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Role};
use crate::tensor::Tensor;

/// Two interleaved half-circles with Gaussian coordinate noise.
///
/// Class 0 traces the upper arc, class 1 the lower interleaved arc. Each
/// coordinate is min-max scaled to [0, 1] over the generated sample, so
/// the data exactly fills the unit square. Deterministic in
/// (n, noise, seed).
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!(
            "two moons needs at least 10 samples, got {n}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be finite and >= 0, got {noise}"
        )));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut rng = stream_rng(seed, Role::Data, 0, 0);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        if noise == 0.0 {
            0.0
        } else {
            noise * gauss.sample(rng)
        }
    };
    let arc = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut values = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        values.push(t.cos() + draw(&mut rng));
        values.push(t.sin() + draw(&mut rng));
        y.push(0);
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        values.push(1.0 - t.cos() + draw(&mut rng));
        values.push(0.5 - t.sin() + draw(&mut rng));
        y.push(1);
    }
    min_max_scale(&mut values, n, 2);
    Dataset::new(Tensor::from_vec(vec![n, 2], values)?, y, 2)
}

/// Per-coordinate min-max scaling onto [0, 1]; a constant coordinate
/// collapses to 0.5.
fn min_max_scale(values: &mut [f64], n: usize, dim: usize) {
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = values[i * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for i in 0..n {
            let v = &mut values[i * dim + d];
            *v = if range > 0.0 { (*v - lo) / range } else { 0.5 };
        }
    }
}

/// Isotropic Gaussian blobs, one per class, with centers drawn uniformly
/// from [0.25, 0.75]^dim and samples clamped into [0, 1]^dim.
pub fn make_blobs(
    n: usize,
    num_classes: usize,
    dim: usize,
    std_dev: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 || n < num_classes.max(10) {
        return Err(Error::Config(format!(
            "blobs need n >= max(classes, 10), classes >= 2, dim >= 1; got n={n} classes={num_classes} dim={dim}"
        )));
    }
    if !(std_dev >= 0.0 && std_dev.is_finite()) {
        return Err(Error::Config(format!(
            "std_dev must be finite and >= 0, got {std_dev}"
        )));
    }
    let mut rng = stream_rng(seed, Role::Data, 1, 0);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.25..0.75)).collect())
        .collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let mut values = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for j in 0..dim {
            let jitter = if std_dev == 0.0 {
                0.0
            } else {
                std_dev * gauss.sample(&mut rng)
            };
            values.push((centers[c][j] + jitter).clamp(0.0, 1.0));
        }
        y.push(c);
    }
    Dataset::new(Tensor::from_vec(vec![n, dim], values)?, y, num_classes)
}
