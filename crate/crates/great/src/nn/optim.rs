//! Gradient-descent optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use super::{BoundParams, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tape;

/// Update rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters; the moment terms only apply to Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..OptimizerSpec::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..OptimizerSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer state; moment buffers are index-parallel to the parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParamSet) -> Result<Self> {
        spec.validate()?;
        let sizes: Vec<usize> = params.params().iter().map(|p| p.values.len()).collect();
        let zeros = |sizes: &[usize]| sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Ok(Optimizer {
            spec,
            t: 0,
            m: zeros(&sizes),
            v: zeros(&sizes),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Applies one update from per-parameter gradients.
    ///
    /// `grads` is index-parallel to `params`; `None` for a trainable
    /// parameter means a zero gradient (Adam moments still decay).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.params().len() {
            return Err(Error::Contract(format!(
                "expected {} gradient slots, got {}",
                params.params().len(),
                grads.len()
            )));
        }
        self.t += 1;
        let zero: Vec<f64> = Vec::new();
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g: &[f64] = match &grads[i] {
                Some(g) => {
                    if g.len() != p.values.len() {
                        return Err(Error::Contract(format!(
                            "gradient for {:?} has length {}, parameter has {}",
                            p.name,
                            g.len(),
                            p.values.len()
                        )));
                    }
                    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient {bad} for parameter {:?}",
                            p.name
                        )));
                    }
                    g
                }
                None => &zero,
            };
            let gv = |j: usize| g.get(j).copied().unwrap_or(0.0);
            match self.spec.kind {
                OptimizerKind::Sgd => {
                    for (j, w) in p.values.iter_mut().enumerate() {
                        *w -= self.spec.learning_rate * gv(j);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.spec.beta1, self.spec.beta2);
                    let bc1 = 1.0 - b1.powi(self.t as i32);
                    let bc2 = 1.0 - b2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, w) in p.values.iter_mut().enumerate() {
                        let g = gv(j);
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= self.spec.learning_rate * mhat / (vhat.sqrt() + self.spec.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads gradients off a tape after `backward`, one slot per parameter.
pub fn collect_grads(tape: &Tape, bound: &BoundParams, params: &ParamSet) -> Vec<Option<Vec<f64>>> {
    (0..params.params().len())
        .map(|i| {
            bound
                .id(i)
                .and_then(|id| tape.grad(id).map(|g| g.to_vec()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec, Param};

    fn tiny_params(v: f64) -> ParamSet {
        ParamSet::from_params(vec![Param {
            name: "w".into(),
            shape: vec![2],
            values: vec![v, v],
            trainable: true,
        }])
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut params = tiny_params(1.0);
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1), &params).unwrap();
        opt.step(&mut params, &[Some(vec![2.0, -2.0])]).unwrap();
        assert_eq!(params.params()[0].values, vec![0.8, 1.2]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With bias correction the first Adam step is lr * g/(|g| + eps).
        let mut params = tiny_params(0.0);
        let mut opt = Optimizer::new(OptimizerSpec::adam(0.001), &params).unwrap();
        opt.step(&mut params, &[Some(vec![10.0, -0.5])]).unwrap();
        let w = &params.params()[0].values;
        assert!((w[0] + 0.001).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.001).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn non_trainable_params_never_move() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                crate::nn::LayerSpec::Dense { in_dim: 2, out_dim: 2 },
                crate::nn::LayerSpec::BatchNorm { dim: 2 },
            ],
            embedding_layer: 0,
        };
        let mut params = init_params(&spec, 0).unwrap();
        let stats_before = params.get("layer1.running_var").unwrap().values.clone();
        let n = params.params().len();
        let grads: Vec<Option<Vec<f64>>> = params
            .params()
            .iter()
            .map(|p| Some(vec![1.0; p.values.len()]))
            .collect();
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.5), &params).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(grads.len(), n);
        assert_eq!(params.get("layer1.running_var").unwrap().values, stats_before);
    }

    #[test]
    fn step_rejects_non_finite_gradients() {
        let mut params = tiny_params(0.0);
        let mut opt = Optimizer::new(OptimizerSpec::adam(0.001), &params).unwrap();
        let err = opt.step(&mut params, &[Some(vec![f64::NAN, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn spec_validation_rejects_bad_betas() {
        let spec = OptimizerSpec {
            beta1: 1.0,
            ..OptimizerSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
