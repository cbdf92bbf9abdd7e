//! Gradient-based evasion attacks.
//!
//! Both attacks maximize the classification loss within a norm ball of
//! radius epsilon around the input and clip the result to the valid data
//! range. The fast gradient sign method takes one full-radius step; projected
//! gradient descent takes several smaller steps, projecting back onto the
//! ball after each. The model always runs in eval mode here, so attacking
//! never touches normalization statistics or dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bind_params_with, forward, Mode, ModelSpec, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Perturbation budgets are measured in this norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// Attack algorithm selector for evaluation entry points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
}

impl AttackMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
        }
    }
}

/// Runs the selected attack on a batch.
pub fn run_attack(
    method: AttackMethod,
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    match method {
        AttackMethod::Fgsm => fgsm(spec, params, x, labels, config),
        AttackMethod::Pgd => pgd(spec, params, x, labels, config, rng),
    }
}

/// Attack hyperparameters shared by FGSM and PGD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Ball radius; zero returns inputs unchanged.
    pub epsilon: f64,
    /// PGD iteration count; FGSM ignores this.
    pub steps: usize,
    /// PGD per-step size. Defaults to `min(epsilon, 2.5 * epsilon / steps)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Start PGD from a uniform point in the ball instead of the input.
    pub random_start: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::Linf,
            epsilon: 0.2,
            steps: 1,
            step_size: None,
            random_start: false,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..AttackConfig::default()
        }
    }

    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            ..AttackConfig::default()
        }
    }

    /// Effective PGD step size (see `step_size`).
    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or_else(|| self.epsilon.min(2.5 * self.epsilon / self.steps.max(1) as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "step size must be positive and finite, got {s}"
                )));
            }
            if s > self.epsilon && self.epsilon > 0.0 {
                return Err(Error::Config(format!(
                    "step size {s} exceeds epsilon {}",
                    self.epsilon
                )));
            }
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::Config(format!(
                "clip range [{}, {}] is empty",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }
}

/// Loss gradient with respect to the inputs, eval mode, parameters frozen.
pub fn input_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.shape().to_vec(), x.values().to_vec(), true)?;
    let bound = bind_params_with(&mut tape, params, false)?;
    let mut scratch = params.clone();
    let out = forward::<ChaCha8Rng>(&mut tape, spec, &mut scratch, &bound, xid, Mode::Eval, None)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;
    Ok(tape
        .grad(xid)
        .expect("input leaf requires grad")
        .to_vec())
}

fn features_per_sample(x: &Tensor) -> usize {
    x.shape()[1..].iter().product()
}

/// One maximal loss-ascent step: `x + epsilon * sign(grad)` under the
/// infinity norm, or a single epsilon-length step along the normalized
/// gradient under the Euclidean norm, clipped to the data range.
///
/// Samples with a zero gradient (below 1e-12 in the Euclidean case) stay
/// unperturbed. `epsilon == 0` returns the input unchanged.
pub fn fgsm(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Tensor> {
    let single = AttackConfig {
        steps: 1,
        step_size: if config.epsilon > 0.0 {
            Some(config.epsilon)
        } else {
            None
        },
        random_start: false,
        ..*config
    };
    attack_core(spec, params, x, labels, &single, None)
}

/// Projected gradient descent: `steps` ascent steps, each followed by a
/// projection onto the epsilon ball around the original input and a clip to
/// the data range.
///
/// `rng` is only consulted for the optional random start and must be
/// provided iff `config.random_start` is set. With one step and step size
/// epsilon, the result equals [`fgsm`] exactly.
pub fn pgd(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    attack_core(spec, params, x, labels, config, rng)
}

fn attack_core(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    config.validate()?;
    let n = *x.shape().first().unwrap_or(&0);
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "attack",
            msg: format!("{n} samples but {} labels", labels.len()),
        });
    }
    if config.epsilon == 0.0 {
        return Ok(x.clone());
    }
    if config.random_start && rng.is_none() {
        return Err(Error::Contract(
            "random_start attack needs a random stream".into(),
        ));
    }
    let d = features_per_sample(x);
    let eps = config.epsilon;
    let step_size = config.effective_step_size();
    let x0 = x.values().to_vec();
    let mut cur = x0.clone();

    if config.random_start {
        let rng = rng.expect("checked above");
        match config.norm {
            Norm::Linf => {
                for v in cur.iter_mut() {
                    *v += rng.random_range(-eps..=eps);
                }
            }
            Norm::L2 => {
                // Uniform in the ball: gaussian direction, radius eps * u^(1/d).
                use rand_distr::{Distribution, StandardNormal};
                for s in 0..n {
                    let dir: Vec<f64> =
                        (0..d).map(|_| StandardNormal.sample(rng)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
                    for j in 0..d {
                        cur[s * d + j] += radius * dir[j] / norm;
                    }
                }
            }
        }
        clip(&mut cur, config);
    }

    let mut work = x.clone();
    for _ in 0..config.steps {
        work.values_mut().copy_from_slice(&cur);
        let grad = input_gradient(spec, params, &work, labels)?;
        match config.norm {
            Norm::Linf => {
                for (v, g) in cur.iter_mut().zip(&grad) {
                    *v += step_size * sign(*g);
                }
                for (v, orig) in cur.iter_mut().zip(&x0) {
                    *v = v.clamp(orig - eps, orig + eps);
                }
            }
            Norm::L2 => {
                for s in 0..n {
                    let gs = &grad[s * d..(s + 1) * d];
                    let gnorm = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gnorm >= 1e-12 {
                        for j in 0..d {
                            cur[s * d + j] += step_size * gs[j] / gnorm;
                        }
                    }
                    let delta: Vec<f64> = (0..d)
                        .map(|j| cur[s * d + j] - x0[s * d + j])
                        .collect();
                    let dnorm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if dnorm > eps {
                        let scale = eps / dnorm;
                        for j in 0..d {
                            cur[s * d + j] = x0[s * d + j] + delta[j] * scale;
                        }
                    }
                }
            }
        }
        clip(&mut cur, config);
    }
    let mut out = x.clone();
    out.values_mut().copy_from_slice(&cur);
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip(values: &mut [f64], config: &AttackConfig) {
    for v in values.iter_mut() {
        *v = v.clamp(config.clip_min, config.clip_max);
    }
}
