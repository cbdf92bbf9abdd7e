//! Datasets, splits, and label subsampling.
//!
//! A [`Dataset`] is a batch tensor of inputs, one class label per sample,
//! and a per-sample `labeled` mask. Semi-supervised runs hide labels by
//! clearing mask entries; the labels themselves stay available for
//! evaluation. Splitting and subsampling are stratified by class and
//! deterministic in the seed.

mod csvload;
mod idx;
mod synth;

pub use csvload::load_csv;
pub use idx::load_idx;
pub use synth::{make_blobs, make_two_moons};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Role};
use crate::tensor::Tensor;

/// Labeled sample collection; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Shape `[n] ++ input_shape`.
    pub x: Tensor,
    /// Class indices, one per sample, all `< num_classes`.
    pub y: Vec<usize>,
    pub num_classes: usize,
    /// Samples whose labels training may use.
    pub labeled: Vec<bool>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        let labeled = vec![true; y.len()];
        let d = Dataset {
            x,
            y,
            num_classes,
            labeled,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = *self.x.shape().first().unwrap_or(&0);
        if self.x.shape().len() < 2 {
            return Err(Error::Contract(format!(
                "dataset inputs need a batch dimension plus features, got shape {:?}",
                self.x.shape()
            )));
        }
        if self.y.len() != n || self.labeled.len() != n {
            return Err(Error::Contract(format!(
                "{n} samples but {} labels and {} mask entries",
                self.y.len(),
                self.labeled.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if !self.x.all_finite() {
            return Err(Error::Numeric("dataset contains non-finite inputs".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-sample shape (without the batch dimension).
    pub fn input_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }

    /// Gathers a sub-batch; labels come along in the same order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let feat: usize = self.input_shape().iter().product();
        let mut values = Vec::with_capacity(indices.len() * feat);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            values.extend_from_slice(&self.x.values()[i * feat..(i + 1) * feat]);
            labels.push(self.y[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.input_shape());
        Ok((Tensor::from_vec(shape, values)?, labels))
    }

    /// New dataset containing the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        let labeled = indices.iter().map(|&i| self.labeled[i]).collect();
        let d = Dataset {
            x,
            y,
            num_classes: self.num_classes,
            labeled,
        };
        d.validate()?;
        Ok(d)
    }

    fn per_class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &c) in self.y.iter().enumerate() {
            by_class[c].push(i);
        }
        by_class
    }
}

/// Stratified train/validation/test split.
///
/// Within each class, indices are shuffled by the seed, then the first
/// `floor(train * n_c)` go to train, the next `floor(val * n_c)` to
/// validation, and the remainder to test. Fractions must be positive and
/// sum to at most 1.
pub fn split_dataset(
    data: &Dataset,
    train: f64,
    val: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train > 0.0 && val > 0.0 && train + val < 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "split fractions (train {train}, val {val}) must be positive with train + val < 1"
        )));
    }
    data.validate()?;
    let mut rng = stream_rng(seed, Role::Split, 0, 0);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for mut members in data.per_class_indices() {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = (train * n as f64).floor() as usize;
        let n_val = (val * n as f64).floor() as usize;
        train_idx.extend(&members[..n_train]);
        val_idx.extend(&members[n_train..n_train + n_val]);
        test_idx.extend(&members[n_train + n_val..]);
    }
    for (name, idx) in [("train", &train_idx), ("validation", &val_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty; dataset of {} samples is too small for these fractions",
                data.len()
            )));
        }
    }
    Ok((
        data.subset(&train_idx)?,
        data.subset(&val_idx)?,
        data.subset(&test_idx)?,
    ))
}

/// Hides labels so that only a stratified `fraction` of each class stays
/// labeled (at least one sample per class). The labels themselves remain
/// stored for evaluation; only the mask changes.
pub fn subsample_labels(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    data.validate()?;
    let mut out = data.clone();
    if fraction == 1.0 {
        out.labeled = vec![true; data.len()];
        return Ok(out);
    }
    out.labeled = vec![false; data.len()];
    let mut rng = stream_rng(seed, Role::Subsample, 0, 0);
    for mut members in data.per_class_indices() {
        members.shuffle(&mut rng);
        let keep = ((fraction * members.len() as f64).round() as usize).max(1);
        for &i in members.iter().take(keep) {
            out.labeled[i] = true;
        }
    }
    Ok(out)
}
