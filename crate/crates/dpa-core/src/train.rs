//! Dual-trajectory surrogate training and checkpoint selection.
//!
//! [`run_dpo`] trains two trajectories of the same architecture on the same
//! data: one starting from supplied pretrained backbone weights (tag `P`,
//! with a freshly initialized head, since heads are assumed unavailable) and
//! one entirely from random initialization (tag `A`). Backbone snapshots are
//! stored after every epoch; [`select_checkpoints`] then thins them with the
//! stride `⌊√c⌋` rule into the ensemble the attack stage aggregates.
//!
//! Minibatch order is a counter-based shuffle keyed by (seed, epoch), so a
//! trajectory is a pure function of its seed and inputs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{
    arcface_loss, trace_backbone, trace_head, BackboneParams, BackboneSpec, HeadParams,
    MarginSpec, ModelError,
};
use crate::rng::{derive, derive_n, Stream};
use crate::synth::IdentityDataset;
use crate::tensor::{GradientMap, NodeId, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrajectoryTag {
    /// Started from pretrained backbone weights.
    Pretrained,
    /// Started from random initialization.
    Random,
}

impl TrajectoryTag {
    pub fn letter(self) -> char {
        match self {
            TrajectoryTag::Pretrained => 'P',
            TrajectoryTag::Random => 'A',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'P' => Some(TrajectoryTag::Pretrained),
            'A' => Some(TrajectoryTag::Random),
            _ => None,
        }
    }
}

impl fmt::Display for TrajectoryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    /// Loss went non-finite; reports where.
    Diverged {
        tag: TrajectoryTag,
        epoch: usize,
        batch: usize,
    },
    MissingGradient { node: NodeId },
    EmptyDataset,
    BadConfig { detail: &'static str },
    DuplicateCheckpoint { tag: TrajectoryTag, epoch: usize },
    MissingCheckpoint { tag: TrajectoryTag, epoch: usize },
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { tag, epoch, batch } => {
                write!(f, "training diverged: trajectory {tag}, epoch {epoch}, batch {batch}")
            }
            TrainError::MissingGradient { node } => {
                write!(f, "no gradient for trainable tensor at node {node:?}")
            }
            TrainError::EmptyDataset => write!(f, "training dataset is empty"),
            TrainError::BadConfig { detail } => write!(f, "invalid train config: {detail}"),
            TrainError::DuplicateCheckpoint { tag, epoch } => {
                write!(f, "duplicate checkpoint ({tag}, {epoch})")
            }
            TrainError::MissingCheckpoint { tag, epoch } => {
                write!(f, "store is missing checkpoint ({tag}, {epoch})")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Knobs for one training trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 35,
            batch_size: 16,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig {
                detail: "learning_rate must be positive",
            });
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig {
                detail: "epochs must be at least 1",
            });
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig {
                detail: "batch_size must be at least 1",
            });
        }
        Ok(())
    }
}

/// Backbone snapshot at a (trajectory, epoch) point. The head trained
/// alongside is kept for completeness but never enters the selected set.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tag: TrajectoryTag,
    pub epoch: usize,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// Every checkpoint of a dual-trajectory run, plus provenance.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    checkpoints: Vec<Checkpoint>,
    pub dataset_fingerprint: u64,
    pub config: TrainConfig,
}

impl CheckpointStore {
    pub fn new(dataset_fingerprint: u64, config: TrainConfig) -> Self {
        CheckpointStore {
            checkpoints: Vec::new(),
            dataset_fingerprint,
            config,
        }
    }

    pub fn insert(&mut self, checkpoint: Checkpoint) -> Result<(), TrainError> {
        if self.get(checkpoint.tag, checkpoint.epoch).is_some() {
            return Err(TrainError::DuplicateCheckpoint {
                tag: checkpoint.tag,
                epoch: checkpoint.epoch,
            });
        }
        self.checkpoints.push(checkpoint);
        Ok(())
    }

    pub fn get(&self, tag: TrajectoryTag, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.tag == tag && c.epoch == epoch)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Checkpoint> {
        self.checkpoints.iter()
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn count_tag(&self, tag: TrajectoryTag) -> usize {
        self.checkpoints.iter().filter(|c| c.tag == tag).count()
    }
}

/// One plain SGD update: each tensor decremented by `lr ×` its gradient.
pub fn sgd_step(
    params: &mut [(&mut Tensor, NodeId)],
    grads: &GradientMap,
    lr: f64,
) -> Result<(), TrainError> {
    for (tensor, id) in params.iter_mut() {
        let grad = grads
            .grad(*id)
            .ok_or(TrainError::MissingGradient { node: *id })?;
        tensor.sub_scaled(grad, lr)?;
    }
    Ok(())
}

/// Checkpoints and per-epoch mean losses of one trained trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryRun {
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<f64>,
}

/// Run `config.epochs` of minibatch SGD on the margin loss, snapshotting the
/// backbone (and head) after every epoch.
pub fn train_trajectory(
    spec: &BackboneSpec,
    margin: &MarginSpec,
    backbone: BackboneParams,
    head: HeadParams,
    data: &IdentityDataset,
    config: &TrainConfig,
    tag: TrajectoryTag,
) -> Result<TrajectoryRun, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = head.classes();
    for i in 0..data.len() {
        if data.label(i) >= classes {
            return Err(TrainError::Tensor(TensorError::LabelOutOfRange {
                label: data.label(i),
                classes,
            }));
        }
    }

    let mut backbone = backbone;
    let mut head = head;
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        if config.shuffle {
            Stream::new(derive_n(config.seed, b"shuffle", epoch as u64)).shuffle(&mut order);
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk);
            let mut tape = Tape::new();
            let traced = trace_backbone(&mut tape, spec, &backbone, true)?;
            let traced_head = trace_head(&mut tape, &head, true)?;
            let loss = match arcface_loss(&mut tape, &traced, &traced_head, &x, &labels, margin) {
                Ok(l) => l,
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::Diverged {
                        tag,
                        epoch,
                        batch: batch_idx,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let loss_value = loss.scalar_value()?;

            let mut ids = Vec::with_capacity(2 * traced.layers.len() + 1);
            for layer in &traced.layers {
                ids.push(layer.weight.node().expect("traced weight has a node"));
                ids.push(layer.bias.node().expect("traced bias has a node"));
            }
            ids.push(traced_head.weight.node().expect("traced head has a node"));
            let grads = tape.backward(&loss, &ids)?;

            let mut pairs: Vec<(&mut Tensor, NodeId)> = Vec::with_capacity(ids.len());
            for (layer, traced_layer) in backbone.layers.iter_mut().zip(&traced.layers) {
                pairs.push((&mut layer.weight, traced_layer.weight.node().unwrap()));
                pairs.push((&mut layer.bias, traced_layer.bias.node().unwrap()));
            }
            pairs.push((&mut head.weight, traced_head.weight.node().unwrap()));
            sgd_step(&mut pairs, &grads, config.learning_rate)?;

            loss_sum += loss_value;
            batches += 1;
        }

        checkpoints.push(Checkpoint {
            tag,
            epoch,
            backbone: backbone.clone(),
            head: head.clone(),
        });
        epoch_losses.push(loss_sum / batches as f64);
    }

    Ok(TrajectoryRun {
        checkpoints,
        epoch_losses,
    })
}

/// A completed dual-trajectory run.
#[derive(Clone, Debug)]
pub struct DpoRun {
    pub store: CheckpointStore,
    pub pretrained_losses: Vec<f64>,
    pub random_losses: Vec<f64>,
}

/// Train both trajectories. The `P` trajectory starts from the supplied
/// pretrained backbone with a fresh random head; the `A` trajectory starts
/// entirely random. The pretrained backbone itself is stored as the `P`
/// epoch-0 checkpoint. Both trajectories see identical batch orders.
pub fn run_dpo(
    spec: &BackboneSpec,
    margin: &MarginSpec,
    pretrained: &BackboneParams,
    data: &IdentityDataset,
    config: &TrainConfig,
) -> Result<DpoRun, TrainError> {
    config.validate()?;
    pretrained.matches_spec(spec)?;
    let classes = data.class_count;

    let head_p = HeadParams::init(classes, spec.embedding_dim, derive(config.seed, b"head-pretrained"))?;
    let backbone_a = BackboneParams::init(spec, derive(config.seed, b"backbone-random"));
    let head_a = HeadParams::init(classes, spec.embedding_dim, derive(config.seed, b"head-random"))?;

    let mut store = CheckpointStore::new(data.fingerprint(), config.clone());
    store.insert(Checkpoint {
        tag: TrajectoryTag::Pretrained,
        epoch: 0,
        backbone: pretrained.clone(),
        head: head_p.clone(),
    })?;

    let p_run = train_trajectory(
        spec,
        margin,
        pretrained.clone(),
        head_p,
        data,
        config,
        TrajectoryTag::Pretrained,
    )?;
    for c in p_run.checkpoints {
        store.insert(c)?;
    }

    let a_run = train_trajectory(
        spec,
        margin,
        backbone_a,
        head_a,
        data,
        config,
        TrajectoryTag::Random,
    )?;
    for c in a_run.checkpoints {
        store.insert(c)?;
    }

    Ok(DpoRun {
        store,
        pretrained_losses: p_run.epoch_losses,
        random_losses: a_run.epoch_losses,
    })
}

/// Epoch-selection stride: the floor of the square root of the epoch count.
pub fn selection_stride(epochs: usize) -> usize {
    let mut k = 1usize;
    while (k + 1) * (k + 1) <= epochs {
        k += 1;
    }
    k
}

/// Epochs selected from each trajectory for an epoch count `c`:
/// `P` keeps {0} ∪ {j ∈ [1,c] : j mod ⌊√c⌋ = 1} ∪ {c}, `A` the same without
/// epoch 0. Coinciding entries are kept once.
pub fn selected_epochs(epochs: usize) -> (Vec<usize>, Vec<usize>) {
    let stride = selection_stride(epochs);
    let mut p = vec![0];
    let mut a = Vec::new();
    for j in 1..=epochs {
        if j % stride == 1 {
            p.push(j);
            a.push(j);
        }
    }
    p.push(epochs);
    a.push(epochs);
    p.sort_unstable();
    p.dedup();
    a.sort_unstable();
    a.dedup();
    (p, a)
}

/// The `P`-trajectory half of the selection, used by the single-trajectory
/// ablation variant.
pub fn selected_epochs_single(epochs: usize) -> Vec<usize> {
    selected_epochs(epochs).0
}

fn lookup(
    store: &CheckpointStore,
    tag: TrajectoryTag,
    epoch: usize,
) -> Result<BackboneParams, TrainError> {
    store
        .get(tag, epoch)
        .map(|c| c.backbone.clone())
        .ok_or(TrainError::MissingCheckpoint { tag, epoch })
}

/// The diversified surrogate parameter set: selected `P` epochs ascending,
/// then selected `A` epochs ascending.
pub fn select_checkpoints(
    store: &CheckpointStore,
    epochs: usize,
) -> Result<Vec<BackboneParams>, TrainError> {
    let (p, a) = selected_epochs(epochs);
    let mut out = Vec::with_capacity(p.len() + a.len());
    for e in p {
        out.push(lookup(store, TrajectoryTag::Pretrained, e)?);
    }
    for e in a {
        out.push(lookup(store, TrajectoryTag::Random, e)?);
    }
    Ok(out)
}

/// Selection restricted to the pretrained-init trajectory.
pub fn select_single(
    store: &CheckpointStore,
    epochs: usize,
) -> Result<Vec<BackboneParams>, TrainError> {
    selected_epochs_single(epochs)
        .into_iter()
        .map(|e| lookup(store, TrajectoryTag::Pretrained, e))
        .collect()
}

/// The three-model comparison set: initial pretrained backbone plus the final
/// epoch of each trajectory.
pub fn select_initial_and_final(
    store: &CheckpointStore,
    epochs: usize,
) -> Result<Vec<BackboneParams>, TrainError> {
    Ok(vec![
        lookup(store, TrajectoryTag::Pretrained, 0)?,
        lookup(store, TrajectoryTag::Pretrained, epochs)?,
        lookup(store, TrajectoryTag::Random, epochs)?,
    ])
}
