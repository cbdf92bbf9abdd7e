//! The training loop and its orchestration.
//!
//! Training happens in up to three stages. A base model is always trained
//! first (plain cross entropy); its embeddings then anchor the similarity
//! graph, with adversarial twins of the labeled samples added as extra
//! nodes when the mode regularizes adversarial anchors or neighbors; the
//! chosen mode then fine-tunes from the base weights against that fixed
//! graph. Adversarial twins used in the loss are regenerated at the start
//! of every epoch against the current weights; the graph structure and
//! weights stay frozen.
//!
//! Every random choice is drawn from a stream keyed by seed, role, and
//! step coordinates, never by mode, so runs that share a seed see the same
//! shuffles, dropout masks, and twin perturbation signs wherever their
//! computations overlap. This is what makes the mode degeneracies (zero
//! lambda collapsing onto the unregularized modes) exact rather than
//! approximate.

use std::fmt::Write as _;
use std::path::Path;

use super::batch::{assemble_epoch_batches, EpochTwins};
use super::loss::{great_loss, LossBreakdown};
use super::propagate::propagate_labels;
use super::{TrainConfig, TrainMode};
use crate::attacks::{self, AttackMethod};
use crate::data::{split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy, robust_accuracy};
use crate::fsutil;
use crate::graph::{build_graph, GraphNode, SimilarityGraph};
use crate::nn::{
    bind_params, collect_grads, forward_eval, init_params, Optimizer, ParamSet,
};
use crate::rng::{stream_rng, Role};
use crate::tensor::Tape;

/// Train, validation, and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitData {
    pub fn new(train: Dataset, val: Dataset, test: Dataset) -> Result<SplitData> {
        let splits = SplitData { train, val, test };
        splits.validate()?;
        Ok(splits)
    }

    /// Stratified split by fractions; the test split takes the remainder.
    pub fn from_dataset(
        data: &Dataset,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<SplitData> {
        let (train, val, test) = split_dataset(data, train_fraction, val_fraction, seed)?;
        SplitData::new(train, val, test)
    }

    pub fn validate(&self) -> Result<()> {
        for part in [&self.train, &self.val, &self.test] {
            part.validate()?;
            if part.input_shape() != self.train.input_shape()
                || part.num_classes != self.train.num_classes
            {
                return Err(Error::Contract(
                    "splits disagree on input shape or class count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One epoch of the training log. Loss fields are means over the epoch's
/// steps; accuracies are measured on the validation split after the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub clean_val_acc: f64,
    pub robust_val_acc: f64,
}

/// Per-epoch history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with full-precision floats, so equal histories give equal bytes.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "epoch,supervised_clean,supervised_adv,reg_cc,reg_ca,reg_ac,reg_aa,total,clean_val_acc,robust_val_acc\n",
        );
        for r in &self.records {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.epoch,
                r.loss.supervised_clean,
                r.loss.supervised_adv,
                r.loss.reg_cc,
                r.loss.reg_ca,
                r.loss.reg_ac,
                r.loss.reg_aa,
                r.loss.total,
                r.clean_val_acc,
                r.robust_val_acc,
            )
            .unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv_string().as_bytes())
    }
}

/// A finished run: final weights, history, and the artifacts that shaped it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub log: TrainingLog,
    /// The frozen regularization graph, when the mode uses one.
    pub graph: Option<SimilarityGraph>,
    /// The base run this one warm-started from, when orchestrated by
    /// [`train`].
    pub base: Option<Box<TrainOutcome>>,
}

/// Step callback: `(epoch, step, breakdown)`, both indices 0-based.
pub type StepObserver<'a> = dyn FnMut(usize, usize, &LossBreakdown) + 'a;

fn check_structure(reference: &ParamSet, params: &ParamSet) -> Result<()> {
    let a = reference.params();
    let b = params.params();
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "expected {} parameters, got {}",
            a.len(),
            b.len()
        )));
    }
    for (r, p) in a.iter().zip(b) {
        if r.name != p.name || r.shape != p.shape || r.trainable != p.trainable {
            return Err(Error::Contract(format!(
                "parameter {} does not match the model (shape {:?} vs {:?})",
                p.name, p.shape, r.shape
            )));
        }
    }
    Ok(())
}

fn check_data(cfg: &TrainConfig, data: &SplitData) -> Result<()> {
    data.validate()?;
    let (_, classes) = cfg.model.validate()?;
    if data.train.input_shape() != &cfg.model.input_shape[..] {
        return Err(Error::Contract(format!(
            "model expects inputs shaped {:?} but the data is {:?}",
            cfg.model.input_shape,
            data.train.input_shape()
        )));
    }
    if data.train.num_classes != classes {
        return Err(Error::Contract(format!(
            "model has {classes} outputs but the data has {} classes",
            data.train.num_classes
        )));
    }
    if cfg.mode.uses_adversarial_samples() && data.train.labeled_indices().is_empty() {
        return Err(Error::Contract(
            "adversarial modes need at least one labeled train sample".into(),
        ));
    }
    Ok(())
}

/// Fresh twins for every labeled train sample against the current weights.
fn make_twins(cfg: &TrainConfig, train: &Dataset, params: &ParamSet) -> Result<EpochTwins> {
    let labeled = train.labeled_indices();
    let (x, y) = train.batch(&labeled)?;
    let x_adv = attacks::fgsm(&cfg.model, params, &x, &y, &cfg.attack)?;
    Ok(EpochTwins::new(x_adv, &labeled, train.len()))
}

fn embedding_rows(cfg: &TrainConfig, params: &ParamSet, x: &crate::tensor::Tensor) -> Result<Vec<Vec<f64>>> {
    let (_, emb) = forward_eval(&cfg.model, params, x.shape().to_vec(), x.values().to_vec())?;
    (0..emb.shape()[0])
        .map(|i| emb.row(i).map(|r| r.to_vec()))
        .collect()
}

/// Builds the frozen regularization graph from a trained embedding.
///
/// Clean nodes cover the whole train split with ids equal to train indices;
/// when the mode regularizes adversarial pairs, a twin node per labeled
/// sample follows, embedded after a single-step perturbation against
/// `embed_params`.
pub fn build_training_graph(
    cfg: &TrainConfig,
    train: &Dataset,
    embed_params: &ParamSet,
) -> Result<SimilarityGraph> {
    cfg.validate()?;
    train.validate()?;
    let n = train.len();
    let clean_emb = embedding_rows(cfg, embed_params, &train.x)?;
    let mut nodes = Vec::with_capacity(n);
    for (i, embedding) in clean_emb.into_iter().enumerate() {
        nodes.push(GraphNode {
            id: i,
            sample_index: i,
            adversarial: false,
            label: train.labeled[i].then_some(train.y[i]),
            embedding,
        });
    }
    if cfg.mode.graph_has_adversarial_nodes() {
        let labeled = train.labeled_indices();
        if !labeled.is_empty() {
            let (x, y) = train.batch(&labeled)?;
            let x_adv = attacks::fgsm(&cfg.model, embed_params, &x, &y, &cfg.attack)?;
            let adv_emb = embedding_rows(cfg, embed_params, &x_adv)?;
            for ((q, &i), embedding) in labeled.iter().enumerate().zip(adv_emb) {
                nodes.push(GraphNode {
                    id: n + q,
                    sample_index: i,
                    adversarial: true,
                    label: Some(train.y[i]),
                    embedding,
                });
            }
        }
    }
    build_graph(nodes, cfg.graph)
}

fn apply_propagation(cfg: &TrainConfig, graph: &SimilarityGraph, train: &mut Dataset) -> Result<()> {
    let labels = propagate_labels(graph, cfg.propagation_passes)?;
    for i in 0..train.len() {
        if train.labeled[i] {
            continue;
        }
        if let Some(label) = labels.get(i).copied().flatten() {
            train.y[i] = label;
            train.labeled[i] = true;
        }
    }
    train.validate()
}

/// Runs the optimization loop from explicit initial weights and graph.
///
/// This is the deterministic core: everything that [`train`] decides
/// (warm start, graph construction) arrives here as data.
pub fn train_with_init(
    cfg: &TrainConfig,
    data: &SplitData,
    init: ParamSet,
    graph: Option<SimilarityGraph>,
) -> Result<TrainOutcome> {
    train_observed(cfg, data, init, graph, None)
}

/// [`train_with_init`] with a per-step loss observer.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &SplitData,
    init: ParamSet,
    graph: Option<SimilarityGraph>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    check_structure(&init_params(&cfg.model, 0)?, &init)?;
    if cfg.mode.uses_graph() && graph.is_none() {
        return Err(Error::Contract(format!(
            "mode {:?} needs a similarity graph",
            cfg.mode.tag()
        )));
    }
    if cfg.propagate_labels && graph.is_none() {
        return Err(Error::Contract(
            "label propagation needs a similarity graph".into(),
        ));
    }

    let mut train_data = data.train.clone();
    if cfg.propagate_labels {
        apply_propagation(cfg, graph.as_ref().expect("checked above"), &mut train_data)?;
    }

    let mut graph = graph;
    let mut params = init;
    let mut optimizer = Optimizer::new(cfg.optimizer, &params)?;
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        if let Some(every) = cfg.rebuild_graph_every {
            if cfg.mode.uses_graph() && epoch > 0 && epoch % every == 0 {
                graph = Some(build_training_graph(cfg, &train_data, &params)?);
            }
        }
        let cache = if cfg.mode.uses_adversarial_samples() {
            Some(make_twins(cfg, &train_data, &params)?)
        } else {
            None
        };
        let steps = assemble_epoch_batches(cfg, &train_data, graph.as_ref(), cache.as_ref(), epoch)?;
        let mut epoch_loss = LossBreakdown::default();
        for (step, inputs) in steps.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params)?;
            let mut rng = stream_rng(cfg.seed, Role::Dropout, epoch as u64, step as u64);
            let loss = great_loss(&mut tape, cfg, &mut params, &bound, inputs, Some(&mut rng))?;
            if !loss.breakdown.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(epoch, step, &loss.breakdown);
            }
            tape.backward(loss.total)?;
            let grads = collect_grads(&tape, &bound, &params);
            optimizer.step(&mut params, &grads)?;
            epoch_loss.add_assign(&loss.breakdown);
        }
        epoch_loss.scale_assign(1.0 / steps.len() as f64);
        if params
            .params()
            .iter()
            .any(|p| p.values.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        let clean_val_acc = accuracy(&cfg.model, &params, &data.val)?;
        let robust_val_acc = robust_accuracy(
            &cfg.model,
            &params,
            &data.val,
            AttackMethod::Fgsm,
            &cfg.attack,
        )?;
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss,
            clean_val_acc,
            robust_val_acc,
        });
    }
    Ok(TrainOutcome {
        config: cfg.clone(),
        params,
        log,
        graph,
        base: None,
    })
}

/// Fine-tunes `cfg.mode` from trained base weights, building the graph
/// from those weights first when the mode needs one.
pub fn train_from_base(
    cfg: &TrainConfig,
    data: &SplitData,
    base_params: &ParamSet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_structure(&init_params(&cfg.model, 0)?, base_params)?;
    let graph = if cfg.mode.uses_graph() {
        Some(build_training_graph(cfg, &data.train, base_params)?)
    } else {
        None
    };
    train_observed(cfg, data, base_params.clone(), graph, None)
}

/// Full pipeline: trains the base model from scratch, then, for every other
/// mode, warm-starts from it (attaching the base run to the outcome).
///
/// The base stage runs for `warmup_epochs` when set, `epochs` otherwise.
pub fn train(cfg: &TrainConfig, data: &SplitData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Base {
        let init = init_params(&cfg.model, cfg.seed)?;
        return train_with_init(cfg, data, init, None);
    }
    let mut base_cfg = cfg.clone();
    base_cfg.mode = TrainMode::Base;
    base_cfg.epochs = cfg.warmup_epochs.unwrap_or(cfg.epochs);
    base_cfg.propagate_labels = false;
    base_cfg.warmup_epochs = None;
    let base = train(&base_cfg, data)?;
    let mut outcome = train_from_base(cfg, data, &base.params)?;
    outcome.base = Some(Box::new(base));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;
    use crate::nn::ModelSpec;

    fn tiny_splits(seed: u64) -> SplitData {
        let data = make_two_moons(60, 0.1, seed).unwrap();
        SplitData::from_dataset(&data, 0.6, 0.2, seed).unwrap()
    }

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        let model = ModelSpec::mlp(&[2, 8, 2]).unwrap();
        let mut cfg = TrainConfig::new(model, mode, 11);
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn base_training_reduces_the_loss() {
        let data = tiny_splits(5);
        let mut cfg = tiny_config(TrainMode::Base);
        cfg.epochs = 20;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.log.records.len(), 20);
        let first = out.log.records[0].loss.total;
        let last = out.log.last().unwrap().loss.total;
        assert!(last < first, "loss did not drop: {first} -> {last}");
        assert!(out.graph.is_none());
        assert!(out.base.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_splits(6);
        let cfg = tiny_config(TrainMode::Great);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.params.max_abs_diff(&b.params).unwrap(), 0.0);
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
    }

    #[test]
    fn graph_modes_carry_their_artifacts() {
        let data = tiny_splits(7);
        let out = train(&tiny_config(TrainMode::Great), &data).unwrap();
        let graph = out.graph.as_ref().unwrap();
        assert!(graph.nodes().len() > data.train.len());
        assert!(out.base.is_some());
        let counts = graph.kind_counts();
        assert!(counts.iter().sum::<usize>() > 0);
    }

    #[test]
    fn nsl_graph_has_no_twins() {
        let data = tiny_splits(8);
        let out = train(&tiny_config(TrainMode::Nsl), &data).unwrap();
        let graph = out.graph.as_ref().unwrap();
        assert_eq!(graph.nodes().len(), data.train.len());
        assert!(graph.nodes().iter().all(|n| !n.adversarial));
    }

    #[test]
    fn zero_epochs_returns_the_initial_parameters() {
        use crate::nn::init_params;
        let data = tiny_splits(12);
        let mut cfg = tiny_config(TrainMode::Base);
        cfg.epochs = 0;
        let init = init_params(&cfg.model, cfg.seed).unwrap();
        let out = train_with_init(&cfg, &data, init.clone(), None).unwrap();
        assert_eq!(out.params.max_abs_diff(&init).unwrap(), 0.0);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn warmup_length_controls_the_base_stage() {
        let data = tiny_splits(13);
        let mut cfg = tiny_config(TrainMode::At);
        cfg.warmup_epochs = Some(5);
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.base.as_ref().unwrap().log.records.len(), 5);
        assert_eq!(out.log.records.len(), cfg.epochs);
    }

    #[test]
    fn periodic_graph_rebuild_changes_the_trajectory() {
        let data = tiny_splits(14);
        let cfg = tiny_config(TrainMode::Great);
        let static_graph = train(&cfg, &data).unwrap();
        let mut rebuild_cfg = cfg.clone();
        rebuild_cfg.rebuild_graph_every = Some(1);
        let rebuilt = train(&rebuild_cfg, &data).unwrap();
        assert!(rebuilt.params.max_abs_diff(&static_graph.params).unwrap() > 0.0);
        assert!(rebuilt.log.last().unwrap().loss.total.is_finite());
    }

    #[test]
    fn zero_lambda_collapses_onto_unregularized_modes() {
        use crate::nn::{init_params, LayerSpec, ModelSpec};
        // Dropout exercises the shared random stream; batch normalization
        // exercises running statistics. Both must stay aligned when the
        // regularizer is present but scaled to zero.
        let model = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense { in_dim: 2, out_dim: 8 },
                LayerSpec::BatchNorm { dim: 8 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::Dense { in_dim: 8, out_dim: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 8, out_dim: 2 },
            ],
            embedding_layer: 5,
        };
        let data = tiny_splits(10);
        let init = init_params(&model, 42).unwrap();

        let mut cfg = TrainConfig::new(model, TrainMode::Great, 42);
        cfg.epochs = 4;
        cfg.batch_size = 16;
        cfg.lambda = 0.0;
        let graph = build_training_graph(&cfg, &data.train, &init).unwrap();
        let great = train_with_init(&cfg, &data, init.clone(), Some(graph)).unwrap();
        let mut at_cfg = cfg.clone();
        at_cfg.mode = TrainMode::At;
        let at = train_with_init(&at_cfg, &data, init.clone(), None).unwrap();
        assert_eq!(great.params.max_abs_diff(&at.params).unwrap(), 0.0);
        assert_eq!(great.log.to_csv_string(), at.log.to_csv_string());

        let mut nsl_cfg = cfg.clone();
        nsl_cfg.mode = TrainMode::Nsl;
        let nsl_graph = build_training_graph(&nsl_cfg, &data.train, &init).unwrap();
        let nsl = train_with_init(&nsl_cfg, &data, init.clone(), Some(nsl_graph)).unwrap();
        let mut base_cfg = cfg.clone();
        base_cfg.mode = TrainMode::Base;
        let base = train_with_init(&base_cfg, &data, init, None).unwrap();
        assert_eq!(nsl.params.max_abs_diff(&base.params).unwrap(), 0.0);
        assert_eq!(nsl.log.to_csv_string(), base.log.to_csv_string());
    }

    #[test]
    fn log_csv_round_trips_bytes() {
        let data = tiny_splits(9);
        let out = train(&tiny_config(TrainMode::At), &data).unwrap();
        let dir = std::env::temp_dir().join(format!("great-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.csv");
        out.log.save_csv(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, out.log.to_csv_string().as_bytes());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
