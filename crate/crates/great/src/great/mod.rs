//! Graph-regularized adversarial training.
//!
//! The training objective combines up to three ingredients, selected by
//! [`TrainMode`]:
//!
//! * supervised cross-entropy on the labeled clean samples,
//! * supervised cross-entropy on their adversarially perturbed twins,
//! * a neighbor regularizer that penalizes embedding distance along graph
//!   edges, weighted per edge by similarity and per edge kind by an alpha.
//!
//! Edge kinds split by which endpoints are adversarial: clean-clean,
//! clean-adv, adv-clean, adv-adv. The full objective for a batch is
//!
//! ```text
//! total = ce_clean + a3 * ce_adv
//!       + lambda * (a11 * R_cc + a12 * R_ca + a21 * R_ac + a22 * R_aa)
//! ```
//!
//! where each `R` averages `weight * distance(anchor_emb, neighbor_emb)`
//! over that kind's anchors in the batch. Modes zero out parts of this sum;
//! a mode with `lambda = 0` reproduces its unregularized counterpart
//! bit for bit.

mod batch;
mod loss;
mod propagate;
mod train;

pub use batch::{assemble_epoch_batches, EpochTwins, RegBatch, StepInputs};
pub use loss::{great_loss, neighbor_distance, LossBreakdown, StepLoss};
pub use propagate::propagate_labels;
pub use train::{
    build_training_graph, train, train_from_base, train_observed, train_with_init, EpochRecord,
    SplitData, StepObserver, TrainOutcome, TrainingLog,
};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, GraphConfig};
use crate::nn::{ModelSpec, OptimizerSpec};

/// Which terms of the objective a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Clean supervised loss only.
    Base,
    /// Clean supervised loss plus the clean-clean regularizer; the graph
    /// contains no adversarial nodes.
    Nsl,
    /// Clean plus adversarial supervised loss, no regularizer.
    At,
    /// Adversarial supervised loss plus adversarially anchored regularizers
    /// (adv-clean and adv-adv); no clean supervised term.
    GreatAdv,
    /// The full objective: both supervised terms and all four regularizers.
    Great,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Base,
        TrainMode::Nsl,
        TrainMode::At,
        TrainMode::GreatAdv,
        TrainMode::Great,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            TrainMode::Base => "base",
            TrainMode::Nsl => "nsl",
            TrainMode::At => "at",
            TrainMode::GreatAdv => "great_adv",
            TrainMode::Great => "great",
        }
    }

    pub fn from_tag(tag: &str) -> Option<TrainMode> {
        TrainMode::ALL.iter().copied().find(|m| m.tag() == tag)
    }

    /// Supervised loss on clean samples.
    pub fn uses_clean_ce(&self) -> bool {
        !matches!(self, TrainMode::GreatAdv)
    }

    /// Supervised loss on adversarial twins (implies generating them).
    pub fn uses_adv_ce(&self) -> bool {
        matches!(self, TrainMode::At | TrainMode::GreatAdv | TrainMode::Great)
    }

    /// Regularizer kinds this mode trains with.
    pub fn active_kinds(&self) -> &'static [EdgeKind] {
        match self {
            TrainMode::Base | TrainMode::At => &[],
            TrainMode::Nsl => &[EdgeKind::CleanClean],
            TrainMode::GreatAdv => &[EdgeKind::AdvClean, EdgeKind::AdvAdv],
            TrainMode::Great => EdgeKind::ALL.as_slice(),
        }
    }

    pub fn uses_graph(&self) -> bool {
        !self.active_kinds().is_empty()
    }

    /// Whether the training graph includes adversarial twin nodes.
    pub fn graph_has_adversarial_nodes(&self) -> bool {
        self.active_kinds()
            .iter()
            .any(|k| !matches!(k, EdgeKind::CleanClean))
    }

    /// Whether epoch twins are needed at all (supervision or regularizer).
    pub fn uses_adversarial_samples(&self) -> bool {
        self.uses_adv_ce() || self.graph_has_adversarial_nodes()
    }
}

/// Distance between anchor and neighbor embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Sum of absolute coordinate differences.
    L1,
    /// Sum of squared coordinate differences (no square root).
    L2Squared,
}

/// Per-term weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Alphas {
    /// Clean-clean regularizer weight.
    pub a11: f64,
    /// Clean-adv regularizer weight.
    pub a12: f64,
    /// Adv-clean regularizer weight.
    pub a21: f64,
    /// Adv-adv regularizer weight.
    pub a22: f64,
    /// Adversarial supervised-loss weight.
    pub a3: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Alphas {
            a11: 1.0,
            a12: 1.0,
            a21: 1.0,
            a22: 1.0,
            a3: 1.0,
        }
    }
}

impl Alphas {
    pub fn for_kind(&self, kind: EdgeKind) -> f64 {
        match kind {
            EdgeKind::CleanClean => self.a11,
            EdgeKind::CleanAdv => self.a12,
            EdgeKind::AdvClean => self.a21,
            EdgeKind::AdvAdv => self.a22,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a11", self.a11),
            ("a12", self.a12),
            ("a21", self.a21),
            ("a22", self.a22),
            ("a3", self.a3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "alpha {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global regularizer strength.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub alphas: Alphas,
    #[serde(default = "default_distance")]
    pub distance: DistanceKind,
    /// Attack used for training twins and the per-epoch robustness metric.
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    /// Copy labels onto unlabeled samples along strongest graph edges
    /// before training.
    #[serde(default)]
    pub propagate_labels: bool,
    /// Number of propagation passes when enabled.
    #[serde(default = "default_propagation_passes")]
    pub propagation_passes: usize,
    /// How long [`train`] trains the base model that regularized modes copy
    /// and build their graph from; `None` reuses `epochs`. Ignored when the
    /// mode is already `base`.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    /// Rebuild the graph from the current parameters every this many epochs.
    /// `None` keeps the graph built before training for the whole run.
    #[serde(default)]
    pub rebuild_graph_every: Option<usize>,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_distance() -> DistanceKind {
    DistanceKind::L2Squared
}

fn default_propagation_passes() -> usize {
    1
}

impl TrainConfig {
    /// Sensible defaults around a given model: Adam at 0.001, 200 epochs,
    /// batches of 64, full objective.
    pub fn new(model: ModelSpec, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            model,
            optimizer: OptimizerSpec::default(),
            epochs: 200,
            batch_size: 64,
            seed,
            lambda: default_lambda(),
            alphas: Alphas::default(),
            distance: default_distance(),
            attack: AttackConfig::default(),
            graph: GraphConfig::default(),
            propagate_labels: false,
            propagation_passes: default_propagation_passes(),
            warmup_epochs: None,
            rebuild_graph_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.graph.validate()?;
        self.alphas.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.rebuild_graph_every == Some(0) {
            return Err(Error::Config(
                "rebuild_graph_every must be at least one epoch when set".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.propagate_labels && self.propagation_passes == 0 {
            return Err(Error::Config(
                "label propagation needs at least one pass".into(),
            ));
        }
        if self.mode.uses_adversarial_samples() && self.attack.epsilon == 0.0 {
            return Err(Error::Config(format!(
                "mode {:?} trains on adversarial samples; attack epsilon must be positive",
                self.mode.tag()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_term_selection_matches_documentation() {
        assert!(TrainMode::Base.uses_clean_ce() && !TrainMode::Base.uses_adv_ce());
        assert!(TrainMode::Base.active_kinds().is_empty());
        assert_eq!(TrainMode::Nsl.active_kinds(), &[EdgeKind::CleanClean]);
        assert!(!TrainMode::Nsl.graph_has_adversarial_nodes());
        assert!(TrainMode::At.uses_adv_ce() && TrainMode::At.active_kinds().is_empty());
        assert!(!TrainMode::GreatAdv.uses_clean_ce());
        assert_eq!(
            TrainMode::GreatAdv.active_kinds(),
            &[EdgeKind::AdvClean, EdgeKind::AdvAdv]
        );
        assert_eq!(TrainMode::Great.active_kinds().len(), 4);
    }

    #[test]
    fn mode_tags_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::from_tag(m.tag()), Some(m));
        }
        assert_eq!(TrainMode::from_tag("bogus"), None);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let model = ModelSpec::mlp(&[2, 4, 2]).unwrap();
        let mut cfg = TrainConfig::new(model, TrainMode::Great, 0);
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.0;
        cfg.alphas.a12 = f64::NAN;
        assert!(cfg.validate().is_err());
        cfg.alphas = Alphas::default();
        cfg.attack.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }
}
