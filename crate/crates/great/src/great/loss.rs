//! The training objective.
//!
//! One step builds a single scalar on the tape:
//!
//! ```text
//! total = ce_clean + a3 * ce_adv
//!       + lambda * sum over kinds K of alpha_K * R_K
//! R_K   = (1 / anchors_K) * sum over edges e of w_e * D(emb_src(e), emb_dst(e))
//! ```
//!
//! Forward passes happen in a fixed order (clean batch, adversarial batch,
//! clean neighbors, adversarial neighbors) so that random streams and
//! running statistics evolve identically across modes that share a prefix
//! of that sequence. Inactive or empty terms contribute a literal zero, so
//! a mode that drops a term produces bit-identical arithmetic to a mode
//! that scales it by zero. Neighbor passes run in eval mode: they neither
//! consume dropout randomness nor touch running statistics, but their
//! embeddings stay differentiable with respect to the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::StepInputs;
use super::{DistanceKind, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::EdgeKind;
use crate::nn::{forward, BoundParams, Mode, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Per-edge embedding distance, one value per row pair.
///
/// `anchors` and `neighbors` are `[e, d]` matrices; the result is `[e]`.
pub fn neighbor_distance(
    tape: &mut Tape,
    anchors: TensorId,
    neighbors: TensorId,
    kind: DistanceKind,
) -> Result<TensorId> {
    let diff = tape.sub(anchors, neighbors)?;
    let per_coord = match kind {
        DistanceKind::L1 => tape.abs(diff),
        DistanceKind::L2Squared => tape.mul(diff, diff)?,
    };
    tape.sum_rows(per_coord)
}

/// Additive pieces of the step loss, already weighted.
///
/// `supervised_adv` includes its coefficient and each `reg_*` includes both
/// the shared multiplier and its kind coefficient, so the fields sum to
/// `total` in the order they are declared.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised_clean: f64,
    pub supervised_adv: f64,
    pub reg_cc: f64,
    pub reg_ca: f64,
    pub reg_ac: f64,
    pub reg_aa: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Sum of the component fields in declaration order.
    pub fn component_sum(&self) -> f64 {
        self.supervised_clean
            + self.supervised_adv
            + self.reg_cc
            + self.reg_ca
            + self.reg_ac
            + self.reg_aa
    }

    pub fn is_finite(&self) -> bool {
        [
            self.supervised_clean,
            self.supervised_adv,
            self.reg_cc,
            self.reg_ca,
            self.reg_ac,
            self.reg_aa,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub(crate) fn reg_mut(&mut self, kind: EdgeKind) -> &mut f64 {
        match kind {
            EdgeKind::CleanClean => &mut self.reg_cc,
            EdgeKind::CleanAdv => &mut self.reg_ca,
            EdgeKind::AdvClean => &mut self.reg_ac,
            EdgeKind::AdvAdv => &mut self.reg_aa,
        }
    }

    pub fn reg(&self, kind: EdgeKind) -> f64 {
        match kind {
            EdgeKind::CleanClean => self.reg_cc,
            EdgeKind::CleanAdv => self.reg_ca,
            EdgeKind::AdvClean => self.reg_ac,
            EdgeKind::AdvAdv => self.reg_aa,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &LossBreakdown) {
        self.supervised_clean += other.supervised_clean;
        self.supervised_adv += other.supervised_adv;
        self.reg_cc += other.reg_cc;
        self.reg_ca += other.reg_ca;
        self.reg_ac += other.reg_ac;
        self.reg_aa += other.reg_aa;
        self.total += other.total;
    }

    pub(crate) fn scale_assign(&mut self, c: f64) {
        self.supervised_clean *= c;
        self.supervised_adv *= c;
        self.reg_cc *= c;
        self.reg_ca *= c;
        self.reg_ac *= c;
        self.reg_aa *= c;
        self.total *= c;
    }
}

/// The loss node plus its observed components.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective for one step on `tape`.
///
/// `params` running statistics advance for every train-mode pass; `rng`
/// feeds dropout and must be the step's dedicated stream.
pub fn great_loss<R: Rng>(
    tape: &mut Tape,
    cfg: &TrainConfig,
    params: &mut ParamSet,
    bound: &BoundParams,
    inputs: &StepInputs,
    mut rng: Option<&mut R>,
) -> Result<StepLoss> {
    let mode = cfg.mode;
    let kinds = mode.active_kinds();
    let live = |kind: EdgeKind| kinds.contains(&kind) && !inputs.reg[kind.index()].is_empty();
    for slot in &inputs.reg {
        slot.validate()?;
    }
    if inputs.labeled_positions.len() != inputs.labels.len() {
        return Err(Error::Contract(format!(
            "{} labeled positions but {} labels",
            inputs.labeled_positions.len(),
            inputs.labels.len()
        )));
    }

    let needs_clean = mode.uses_clean_ce() || live(EdgeKind::CleanClean) || live(EdgeKind::CleanAdv);
    let wants_adv = mode.uses_adv_ce() || live(EdgeKind::AdvClean) || live(EdgeKind::AdvAdv);

    let clean_out = if needs_clean {
        let x = tape.leaf_tensor(&inputs.x);
        Some(forward(
            tape,
            &cfg.model,
            params,
            bound,
            x,
            Mode::Train,
            rng.as_deref_mut(),
        )?)
    } else {
        None
    };
    let adv_out = match (&inputs.x_adv, wants_adv) {
        (Some(x_adv), true) => {
            if x_adv.shape()[0] != inputs.labeled_positions.len() {
                return Err(Error::Contract(format!(
                    "adversarial batch has {} rows for {} labeled positions",
                    x_adv.shape()[0],
                    inputs.labeled_positions.len()
                )));
            }
            let x = tape.leaf_tensor(x_adv);
            Some(forward(
                tape,
                &cfg.model,
                params,
                bound,
                x,
                Mode::Train,
                rng.as_deref_mut(),
            )?)
        }
        (None, true) if !inputs.labeled_positions.is_empty() => {
            return Err(Error::Contract(format!(
                "mode {:?} needs adversarial rows for the labeled batch",
                mode.tag()
            )))
        }
        _ => None,
    };
    let clean_nb_emb = match &inputs.clean_neighbors {
        Some(nb) if live(EdgeKind::CleanClean) || live(EdgeKind::AdvClean) => {
            let x = tape.leaf_tensor(nb);
            let out = forward(tape, &cfg.model, params, bound, x, Mode::Eval, rng.as_deref_mut())?;
            Some(out.embedding)
        }
        _ => None,
    };
    let adv_nb_emb = match &inputs.adv_neighbors {
        Some(nb) if live(EdgeKind::CleanAdv) || live(EdgeKind::AdvAdv) => {
            let x = tape.leaf_tensor(nb);
            let out = forward(tape, &cfg.model, params, bound, x, Mode::Eval, rng.as_deref_mut())?;
            Some(out.embedding)
        }
        _ => None,
    };

    let zero = |tape: &mut Tape| tape.constant(vec![], vec![0.0]);

    let ce_clean = match (&clean_out, inputs.labeled_positions.is_empty()) {
        (Some(out), false) if mode.uses_clean_ce() => {
            let rows = tape.gather_rows(out.logits, &inputs.labeled_positions)?;
            tape.softmax_cross_entropy(rows, &inputs.labels)?
        }
        _ => zero(tape)?,
    };
    let ce_adv = match &adv_out {
        Some(out) if mode.uses_adv_ce() => {
            let ce = tape.softmax_cross_entropy(out.logits, &inputs.labels)?;
            tape.scale(ce, cfg.alphas.a3)
        }
        _ => zero(tape)?,
    };

    let mut terms = [ce_clean, ce_adv, ce_clean, ce_clean, ce_clean, ce_clean];
    for kind in EdgeKind::ALL {
        let term = if live(kind) {
            let slot = &inputs.reg[kind.index()];
            let anchors_emb = match kind {
                EdgeKind::CleanClean | EdgeKind::CleanAdv => {
                    clean_out
                        .as_ref()
                        .ok_or_else(|| {
                            Error::Contract("clean-anchored edges need a clean pass".into())
                        })?
                        .embedding
                }
                EdgeKind::AdvClean | EdgeKind::AdvAdv => {
                    adv_out
                        .as_ref()
                        .ok_or_else(|| {
                            Error::Contract(
                                "adversarial-anchored edges need an adversarial pass".into(),
                            )
                        })?
                        .embedding
                }
            };
            let neighbors_emb = match kind {
                EdgeKind::CleanClean | EdgeKind::AdvClean => clean_nb_emb.ok_or_else(|| {
                    Error::Contract("clean-neighbor edges need a neighbor stack".into())
                })?,
                EdgeKind::CleanAdv | EdgeKind::AdvAdv => adv_nb_emb.ok_or_else(|| {
                    Error::Contract("adversarial-neighbor edges need a neighbor stack".into())
                })?,
            };
            let anchors = tape.gather_rows(anchors_emb, &slot.anchor_rows)?;
            let neighbors = tape.gather_rows(neighbors_emb, &slot.neighbor_rows)?;
            let dist = neighbor_distance(tape, anchors, neighbors, cfg.distance)?;
            let weighted = tape.weighted_sum(dist, &slot.weights)?;
            let factor = cfg.lambda * cfg.alphas.for_kind(kind) / slot.anchor_count as f64;
            tape.scale(weighted, factor)
        } else {
            zero(tape)?
        };
        terms[2 + kind.index()] = term;
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }

    let mut breakdown = LossBreakdown {
        supervised_clean: tape.scalar_value(terms[0])?,
        supervised_adv: tape.scalar_value(terms[1])?,
        total: tape.scalar_value(total)?,
        ..Default::default()
    };
    for kind in EdgeKind::ALL {
        *breakdown.reg_mut(kind) = tape.scalar_value(terms[2 + kind.index()])?;
    }

    Ok(StepLoss { total, breakdown })
}
