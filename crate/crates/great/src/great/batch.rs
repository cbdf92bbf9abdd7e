//! Per-epoch batch assembly.
//!
//! An epoch shuffles the train indices (keyed by seed and epoch, never by
//! mode, so differently configured runs see identical batches) and cuts them
//! into [`StepInputs`]: the clean rows, the labeled subset with its twins,
//! and, per edge kind, the anchor/neighbor/weight triples the regularizer
//! needs. Neighbor inputs are stacked deduplicated so each distinct sample
//! is forwarded once per step.

use rand::seq::SliceRandom;

use super::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, SimilarityGraph};
use crate::rng::{stream_rng, Role};
use crate::tensor::Tensor;

/// Adversarial twins for one epoch: one perturbed row per labeled train
/// sample, addressable by train index.
#[derive(Debug, Clone)]
pub struct EpochTwins {
    x: Tensor,
    row_of: Vec<Option<usize>>,
}

impl EpochTwins {
    /// `x` holds one row per entry of `labeled_indices`, in order.
    pub fn new(x: Tensor, labeled_indices: &[usize], n_train: usize) -> EpochTwins {
        let mut row_of = vec![None; n_train];
        for (row, &i) in labeled_indices.iter().enumerate() {
            row_of[i] = Some(row);
        }
        EpochTwins { x, row_of }
    }

    fn row(&self, train_index: usize) -> Option<&[f64]> {
        let row = self.row_of.get(train_index).copied().flatten()?;
        let feat: usize = self.x.shape()[1..].iter().product();
        Some(&self.x.values()[row * feat..(row + 1) * feat])
    }
}

/// Edge triples of one kind within one batch.
///
/// `anchor_rows` index the anchor embedding matrix (the clean batch for
/// clean-anchored kinds, the twin batch for adversarial-anchored kinds);
/// `neighbor_rows` index the corresponding neighbor stack. `anchor_count`
/// is the number of eligible anchors in the batch and is the averaging
/// denominator, so anchors without edges still count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegBatch {
    pub anchor_rows: Vec<usize>,
    pub neighbor_rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub anchor_count: usize,
}

impl RegBatch {
    pub fn is_empty(&self) -> bool {
        self.anchor_rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_rows.len() != self.neighbor_rows.len()
            || self.anchor_rows.len() != self.weights.len()
        {
            return Err(Error::Contract(format!(
                "regularizer batch arity mismatch: {} anchors, {} neighbors, {} weights",
                self.anchor_rows.len(),
                self.neighbor_rows.len(),
                self.weights.len()
            )));
        }
        if !self.is_empty() && self.anchor_count == 0 {
            return Err(Error::Contract(
                "regularizer batch has edges but no anchors".into(),
            ));
        }
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Contract(format!(
                "edge weight {w} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Everything one optimization step consumes.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Clean inputs, `[b] ++ input_shape`.
    pub x: Tensor,
    /// Positions within the batch whose labels are visible.
    pub labeled_positions: Vec<usize>,
    /// Labels for `labeled_positions`, in the same order.
    pub labels: Vec<usize>,
    /// Twins for `labeled_positions`, in the same order.
    pub x_adv: Option<Tensor>,
    /// Deduplicated clean neighbor inputs.
    pub clean_neighbors: Option<Tensor>,
    /// Deduplicated adversarial neighbor inputs.
    pub adv_neighbors: Option<Tensor>,
    /// Indexed by [`EdgeKind::index`].
    pub reg: [RegBatch; 4],
}

impl StepInputs {
    /// Minimal supervised-only inputs, mostly for tests and examples.
    pub fn supervised(x: Tensor, labels: Vec<usize>) -> StepInputs {
        StepInputs {
            labeled_positions: (0..labels.len()).collect(),
            labels,
            x,
            x_adv: None,
            clean_neighbors: None,
            adv_neighbors: None,
            reg: Default::default(),
        }
    }
}

/// Rows of `data` stacked into a batch tensor, with twins from the cache.
struct StackBuilder<'a> {
    data: &'a Dataset,
    cache: Option<&'a EpochTwins>,
    clean_rows: Vec<usize>,
    clean_index: std::collections::HashMap<usize, usize>,
    adv_rows: Vec<usize>,
    adv_index: std::collections::HashMap<usize, usize>,
}

impl<'a> StackBuilder<'a> {
    fn new(data: &'a Dataset, cache: Option<&'a EpochTwins>) -> Self {
        StackBuilder {
            data,
            cache,
            clean_rows: Vec::new(),
            clean_index: Default::default(),
            adv_rows: Vec::new(),
            adv_index: Default::default(),
        }
    }

    fn clean_row(&mut self, train_index: usize) -> usize {
        *self.clean_index.entry(train_index).or_insert_with(|| {
            self.clean_rows.push(train_index);
            self.clean_rows.len() - 1
        })
    }

    fn adv_row(&mut self, train_index: usize) -> Result<usize> {
        if let Some(&row) = self.adv_index.get(&train_index) {
            return Ok(row);
        }
        if self.cache.and_then(|c| c.row(train_index)).is_none() {
            return Err(Error::Contract(format!(
                "graph references a twin of sample {train_index} but no twin exists this epoch"
            )));
        }
        self.adv_rows.push(train_index);
        let row = self.adv_rows.len() - 1;
        self.adv_index.insert(train_index, row);
        Ok(row)
    }

    fn finish(self) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let clean = if self.clean_rows.is_empty() {
            None
        } else {
            Some(self.data.batch(&self.clean_rows)?.0)
        };
        let adv = if self.adv_rows.is_empty() {
            None
        } else {
            let cache = self.cache.expect("adv rows imply a cache");
            let feat: usize = self.data.input_shape().iter().product();
            let mut values = Vec::with_capacity(self.adv_rows.len() * feat);
            for &i in &self.adv_rows {
                values.extend_from_slice(cache.row(i).expect("checked in adv_row"));
            }
            let mut shape = vec![self.adv_rows.len()];
            shape.extend_from_slice(self.data.input_shape());
            Some(Tensor::from_vec(shape, values)?)
        };
        Ok((clean, adv))
    }
}

/// Node-id arithmetic for a training graph: clean node ids equal train
/// indices; twin nodes follow and map back via `sample_index`.
struct GraphIndex<'a> {
    graph: &'a SimilarityGraph,
    adv_node_of: Vec<Option<usize>>,
}

impl<'a> GraphIndex<'a> {
    fn new(graph: &'a SimilarityGraph, n_train: usize) -> Result<Self> {
        let nodes = graph.nodes();
        if nodes.len() < n_train {
            return Err(Error::Contract(format!(
                "graph has {} nodes but the train split has {n_train} samples",
                nodes.len()
            )));
        }
        let mut adv_node_of = vec![None; n_train];
        for (id, node) in nodes.iter().enumerate() {
            if id < n_train {
                if node.adversarial || node.sample_index != id {
                    return Err(Error::Contract(format!(
                        "graph node {id} must be the clean node of train sample {id}"
                    )));
                }
            } else {
                if !node.adversarial || node.sample_index >= n_train {
                    return Err(Error::Contract(format!(
                        "graph node {id} must be a twin of a train sample"
                    )));
                }
                adv_node_of[node.sample_index] = Some(id);
            }
        }
        Ok(GraphIndex { graph, adv_node_of })
    }
}

/// Builds every step of one epoch; see the module docs.
pub fn assemble_epoch_batches(
    cfg: &TrainConfig,
    data: &Dataset,
    graph: Option<&SimilarityGraph>,
    cache: Option<&EpochTwins>,
    epoch: usize,
) -> Result<Vec<StepInputs>> {
    let n = data.len();
    let kinds = cfg.mode.active_kinds();
    let index = match (kinds.is_empty(), graph) {
        (true, _) => None,
        (false, Some(g)) => Some(GraphIndex::new(g, n)?),
        (false, None) => {
            return Err(Error::Contract(format!(
                "mode {:?} needs a similarity graph",
                cfg.mode.tag()
            )))
        }
    };
    if cfg.mode.uses_adversarial_samples() && cache.is_none() {
        return Err(Error::Contract(format!(
            "mode {:?} needs adversarial twins for the epoch",
            cfg.mode.tag()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(cfg.seed, Role::Shuffle, epoch as u64, 0);
    order.shuffle(&mut rng);

    let mut steps = Vec::with_capacity(n.div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let (x, _) = data.batch(chunk)?;
        let mut labeled_positions = Vec::new();
        let mut labels = Vec::new();
        for (p, &i) in chunk.iter().enumerate() {
            if data.labeled[i] {
                labeled_positions.push(p);
                labels.push(data.y[i]);
            }
        }
        let x_adv = match (cache, labeled_positions.is_empty()) {
            (Some(cache), false) => {
                let feat: usize = data.input_shape().iter().product();
                let mut values = Vec::with_capacity(labeled_positions.len() * feat);
                for &p in &labeled_positions {
                    let i = chunk[p];
                    values.extend_from_slice(cache.row(i).ok_or_else(|| {
                        Error::Contract(format!("labeled sample {i} has no twin this epoch"))
                    })?);
                }
                let mut shape = vec![labeled_positions.len()];
                shape.extend_from_slice(data.input_shape());
                Some(Tensor::from_vec(shape, values)?)
            }
            _ => None,
        };

        let mut reg: [RegBatch; 4] = Default::default();
        let mut stacks = StackBuilder::new(data, cache);
        if let Some(index) = &index {
            for kind in kinds {
                let slot = &mut reg[kind.index()];
                let adv_anchored = matches!(kind, EdgeKind::AdvClean | EdgeKind::AdvAdv);
                if adv_anchored {
                    slot.anchor_count = labeled_positions
                        .iter()
                        .filter(|&&p| index.adv_node_of[chunk[p]].is_some())
                        .count();
                } else {
                    slot.anchor_count = chunk.len();
                }
            }
            for (p, &i) in chunk.iter().enumerate() {
                for edge in index.graph.neighbors(i)? {
                    if !kinds.contains(&edge.kind) {
                        continue;
                    }
                    let neighbor = index.graph.node(edge.dst)?;
                    let nb_row = if neighbor.adversarial {
                        stacks.adv_row(neighbor.sample_index)?
                    } else {
                        stacks.clean_row(neighbor.sample_index)
                    };
                    let slot = &mut reg[edge.kind.index()];
                    slot.anchor_rows.push(p);
                    slot.neighbor_rows.push(nb_row);
                    slot.weights.push(edge.weight);
                }
            }
            for (q, &p) in labeled_positions.iter().enumerate() {
                let Some(adv_node) = index.adv_node_of[chunk[p]] else {
                    continue;
                };
                for edge in index.graph.neighbors(adv_node)? {
                    if !kinds.contains(&edge.kind) {
                        continue;
                    }
                    let neighbor = index.graph.node(edge.dst)?;
                    let nb_row = if neighbor.adversarial {
                        stacks.adv_row(neighbor.sample_index)?
                    } else {
                        stacks.clean_row(neighbor.sample_index)
                    };
                    let slot = &mut reg[edge.kind.index()];
                    slot.anchor_rows.push(q);
                    slot.neighbor_rows.push(nb_row);
                    slot.weights.push(edge.weight);
                }
            }
        }
        let (clean_neighbors, adv_neighbors) = stacks.finish()?;
        for slot in &reg {
            slot.validate()?;
        }
        steps.push(StepInputs {
            x,
            labeled_positions,
            labels,
            x_adv,
            clean_neighbors,
            adv_neighbors,
            reg,
        });
    }
    Ok(steps)
}
