//! Model definition, parameters, and the differentiable forward pass.
//!
//! A [`ModelSpec`] is a flat list of layers applied in order. One layer index
//! is designated the embedding layer; its per-sample output (a vector) is
//! what the similarity graph and the neighbor regularizer operate on.
//! Parameters live in a [`ParamSet`] outside any tape; each training step
//! binds them onto a fresh [`Tape`] so gradients can be read back per
//! parameter.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{collect_grads, Optimizer, OptimizerKind, OptimizerSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Role};
use crate::tensor::{Tape, TensorId};

/// Momentum for batch-normalization running statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

/// One layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Affine map from `in_dim` to `out_dim` features.
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    /// Inverted dropout, active only in training mode.
    Dropout { rate: f64 },
    /// Batch normalization over a `dim`-feature input.
    BatchNorm { dim: usize },
    /// Valid, stride-1 convolution (channels last).
    Conv2d {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    },
    /// Non-overlapping max pooling with a square window.
    MaxPool2d { window: usize },
    /// Collapses spatial dimensions into one feature vector.
    Flatten,
}

/// Network architecture plus the index of the embedding layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape, e.g. `[2]` or `[28, 28, 1]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Index into `layers`; that layer's output is the embedding.
    pub embedding_layer: usize,
}

/// Train/eval switch for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, running stats updated.
    Train,
    /// Running statistics, dropout inactive, nothing mutated.
    Eval,
}

impl ModelSpec {
    /// Fully-connected stack `dims[0] -> ... -> dims.last()` with a ReLU
    /// after every layer but the last. The embedding is the last hidden
    /// activation.
    pub fn mlp(dims: &[usize]) -> Result<ModelSpec> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "an mlp needs at least input and output sizes, got {dims:?}"
            )));
        }
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerSpec::Dense {
                in_dim: w[0],
                out_dim: w[1],
            });
            layers.push(LayerSpec::Relu);
        }
        layers.pop();
        let embedding_layer = layers.len().saturating_sub(2);
        let spec = ModelSpec {
            input_shape: vec![dims[0]],
            layers,
            embedding_layer,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-sample shape after applying layers `0..=upto`.
    fn shape_after(&self, upto: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {shape:?} must be non-empty with positive dims"
            )));
        }
        for (i, layer) in self.layers.iter().enumerate().take(upto + 1) {
            shape = match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if shape != [*in_dim] {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects [{in_dim}] features, got {shape:?}"
                        )));
                    }
                    vec![*out_dim]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Config(format!(
                            "layer {i}: dropout rate must be in [0, 1), got {rate}"
                        )));
                    }
                    shape
                }
                LayerSpec::BatchNorm { dim } => {
                    if shape != [*dim] {
                        return Err(Error::Config(format!(
                            "layer {i}: batch norm over {dim} features, got {shape:?}"
                        )));
                    }
                    shape
                }
                LayerSpec::Conv2d { kh, kw, cin, cout } => {
                    if shape.len() != 3 || shape[2] != *cin {
                        return Err(Error::Config(format!(
                            "layer {i}: conv expects [h, w, {cin}], got {shape:?}"
                        )));
                    }
                    if *kh > shape[0] || *kw > shape[1] {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kh}x{kw} larger than input {}x{}",
                            shape[0], shape[1]
                        )));
                    }
                    vec![shape[0] - kh + 1, shape[1] - kw + 1, *cout]
                }
                LayerSpec::MaxPool2d { window } => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i}: max pool expects [h, w, c], got {shape:?}"
                        )));
                    }
                    if *window == 0 || shape[0] % window != 0 || shape[1] % window != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: window {window} does not divide {}x{}",
                            shape[0], shape[1]
                        )));
                    }
                    vec![shape[0] / window, shape[1] / window, shape[2]]
                }
                LayerSpec::Flatten => {
                    vec![shape.iter().product()]
                }
            };
        }
        Ok(shape)
    }

    /// Checks layer compatibility; returns (embedding_dim, num_classes).
    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if self.embedding_layer >= self.layers.len() {
            return Err(Error::Config(format!(
                "embedding layer {} out of range for {} layers",
                self.embedding_layer,
                self.layers.len()
            )));
        }
        let out = self.shape_after(self.layers.len() - 1)?;
        if out.len() != 1 || out[0] < 2 {
            return Err(Error::Config(format!(
                "model output must be a logit vector with >= 2 classes, got {out:?}"
            )));
        }
        let emb = self.shape_after(self.embedding_layer)?;
        if emb.len() != 1 {
            return Err(Error::Config(format!(
                "embedding layer {} produces shape {emb:?}; it must be a vector \
                 (add a flatten or pick a later layer)",
                self.embedding_layer
            )));
        }
        Ok((emb[0], out[0]))
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.validate()?.0)
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.validate()?.1)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Updated by the optimizer iff true; running stats are not.
    pub trainable: bool,
}

/// Ordered collection of model parameters and normalization statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Self {
        ParamSet { params }
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    /// Total trainable scalar count.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum()
    }

    /// Largest absolute difference across all parameters, shapes permitting.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if self.params.len() != other.params.len() {
            return Err(Error::Contract(format!(
                "parameter sets differ in size: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.values.len() != b.values.len() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: {:?} vs {:?}",
                    a.name, b.name
                )));
            }
            for (x, y) in a.values.iter().zip(&b.values) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

/// Initializes parameters for a model.
///
/// Weights draw from the uniform He distribution U(-b, b) with
/// b = sqrt(6 / fan_in); biases start at zero, batch-norm scale at one,
/// shift at zero, running stats at (0, 1). Deterministic in (spec, seed).
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Role::Init, 0, 0);
    let mut params = Vec::new();
    let mut he_uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                params.push(Param {
                    name: format!("layer{i}.weight"),
                    shape: vec![*in_dim, *out_dim],
                    values: he_uniform(in_dim * out_dim, *in_dim),
                    trainable: true,
                });
                params.push(Param {
                    name: format!("layer{i}.bias"),
                    shape: vec![*out_dim],
                    values: vec![0.0; *out_dim],
                    trainable: true,
                });
            }
            LayerSpec::Conv2d { kh, kw, cin, cout } => {
                let fan_in = kh * kw * cin;
                params.push(Param {
                    name: format!("layer{i}.kernel"),
                    shape: vec![*kh, *kw, *cin, *cout],
                    values: he_uniform(fan_in * cout, fan_in),
                    trainable: true,
                });
                params.push(Param {
                    name: format!("layer{i}.bias"),
                    shape: vec![*cout],
                    values: vec![0.0; *cout],
                    trainable: true,
                });
            }
            LayerSpec::BatchNorm { dim } => {
                params.push(Param {
                    name: format!("layer{i}.gamma"),
                    shape: vec![*dim],
                    values: vec![1.0; *dim],
                    trainable: true,
                });
                params.push(Param {
                    name: format!("layer{i}.beta"),
                    shape: vec![*dim],
                    values: vec![0.0; *dim],
                    trainable: true,
                });
                params.push(Param {
                    name: format!("layer{i}.running_mean"),
                    shape: vec![*dim],
                    values: vec![0.0; *dim],
                    trainable: false,
                });
                params.push(Param {
                    name: format!("layer{i}.running_var"),
                    shape: vec![*dim],
                    values: vec![1.0; *dim],
                    trainable: false,
                });
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten => {}
        }
    }
    Ok(ParamSet { params })
}

/// Parameters bound onto a tape, index-parallel to [`ParamSet::params`].
///
/// Binding once per tape makes gradients from every forward pass on that
/// tape (clean batch, adversarial batch, neighbors) accumulate into the same
/// buffers.
#[derive(Debug)]
pub struct BoundParams {
    ids: Vec<Option<TensorId>>,
}

impl BoundParams {
    pub fn id(&self, index: usize) -> Option<TensorId> {
        self.ids.get(index).copied().flatten()
    }
}

/// Leafs every trainable parameter onto the tape as a gradient target.
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> Result<BoundParams> {
    bind_params_with(tape, params, true)
}

/// Leafs trainable parameters, optionally frozen (no gradients), which
/// attacks use when only the input gradient matters.
pub fn bind_params_with(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Result<BoundParams> {
    let mut ids = Vec::with_capacity(params.params.len());
    for p in &params.params {
        if p.trainable {
            ids.push(Some(tape.leaf(p.shape.clone(), p.values.clone(), requires_grad)?));
        } else {
            ids.push(None);
        }
    }
    Ok(BoundParams { ids })
}

/// Result of a forward pass: logits and the embedding-layer output.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: TensorId,
    pub embedding: TensorId,
}

/// Runs the model on a batch already on the tape.
///
/// `x` must be `[n] ++ input_shape`. In train mode, dropout draws masks from
/// `rng` and batch-norm running statistics in `params` are updated in place;
/// in eval mode neither happens and `rng` may be `None`. The returned ids
/// are differentiable through to `bound` and `x`.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &mut ParamSet,
    bound: &BoundParams,
    x: TensorId,
    mode: Mode,
    mut rng: Option<&mut R>,
) -> Result<ForwardOutput> {
    let x_shape = tape.shape(x).to_vec();
    if x_shape.len() != spec.input_shape.len() + 1 || x_shape[1..] != spec.input_shape[..] {
        return Err(Error::Dimension {
            op: "forward",
            msg: format!(
                "batch shape {x_shape:?} does not match input shape {:?}",
                spec.input_shape
            ),
        });
    }
    let n = x_shape[0];
    let mut cur = x;
    let mut embedding = None;
    let mut param_idx = 0usize;
    for (i, layer) in spec.layers.iter().enumerate() {
        cur = match layer {
            LayerSpec::Dense { .. } => {
                let w = bound.id(param_idx).expect("dense weight is trainable");
                let b = bound.id(param_idx + 1).expect("dense bias is trainable");
                param_idx += 2;
                let prod = tape.matmul(cur, w)?;
                tape.add_bias(prod, b)?
            }
            LayerSpec::Relu => tape.relu(cur),
            LayerSpec::Dropout { rate } => match mode {
                Mode::Train => {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::Contract("training forward with dropout needs an rng".into())
                    })?;
                    tape.dropout(cur, *rate, rng)?
                }
                Mode::Eval => cur,
            },
            LayerSpec::BatchNorm { .. } => {
                let gamma = bound.id(param_idx).expect("gamma is trainable");
                let beta = bound.id(param_idx + 1).expect("beta is trainable");
                let mean_idx = param_idx + 2;
                let var_idx = param_idx + 3;
                param_idx += 4;
                match mode {
                    Mode::Train => {
                        let (out, mean, var) = tape.batch_norm_train(cur, gamma, beta)?;
                        for (stat_idx, batch) in [(mean_idx, mean), (var_idx, var)] {
                            let stat = &mut params.params[stat_idx].values;
                            for (r, b) in stat.iter_mut().zip(&batch) {
                                *r = BATCHNORM_MOMENTUM * *r + (1.0 - BATCHNORM_MOMENTUM) * b;
                            }
                        }
                        out
                    }
                    Mode::Eval => {
                        let mean = params.params[mean_idx].values.clone();
                        let var = params.params[var_idx].values.clone();
                        tape.batch_norm_eval(cur, gamma, beta, &mean, &var)?
                    }
                }
            }
            LayerSpec::Conv2d { .. } => {
                let k = bound.id(param_idx).expect("kernel is trainable");
                let b = bound.id(param_idx + 1).expect("conv bias is trainable");
                param_idx += 2;
                let out = tape.conv2d(cur, k)?;
                tape.add_bias(out, b)?
            }
            LayerSpec::MaxPool2d { window } => tape.max_pool2d(cur, *window)?,
            LayerSpec::Flatten => {
                let shape = tape.shape(cur).to_vec();
                let feat: usize = shape[1..].iter().product();
                tape.reshape(cur, vec![n, feat])?
            }
        };
        if i == spec.embedding_layer {
            embedding = Some(cur);
        }
    }
    Ok(ForwardOutput {
        logits: cur,
        embedding: embedding.expect("validate() bounds embedding_layer"),
    })
}

/// Convenience: eval-mode forward over raw input rows on a fresh tape,
/// returning logits and embeddings as plain tensors.
pub fn forward_eval(
    spec: &ModelSpec,
    params: &ParamSet,
    x_shape: Vec<usize>,
    x_values: Vec<f64>,
) -> Result<(crate::tensor::Tensor, crate::tensor::Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_shape, x_values, false)?;
    let bound = bind_params(&mut tape, params)?;
    let mut scratch = params.clone();
    let out = forward::<rand_chacha::ChaCha8Rng>(
        &mut tape,
        spec,
        &mut scratch,
        &bound,
        x,
        Mode::Eval,
        None,
    )?;
    Ok((tape.detach(out.logits), tape.detach(out.embedding)))
}
