//! Verification thresholds, attack success rate, and the ablation/sweep
//! protocols.
//!
//! A victim accepts a pair when the cosine distance between its embeddings
//! falls strictly below a threshold calibrated so that a target fraction of
//! impostor pairs (FAR) would be accepted. Attack success rate is the share
//! of adversarial examples the victim places within the threshold of their
//! target images.
//!
//! The experiment engine reproduces the directional studies at desk scale:
//! per experiment seed it bootstraps a pretrained backbone on disjoint
//! identities, runs the dual-trajectory training, trains an independently
//! seeded victim onit a fresh draw of the same identity space, and measures
//! black-box ASR per attack mode.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::attack::{craft, craft_dma, AttackConfig, AttackError};
use crate::model::{unit_embedding, BackboneParams, BackboneSpec, MarginSpec, ModelError};
use crate::rng::{derive, Stream};
use crate::synth::{generate, generate_resampled, sample_attack_pairs, split, IdentityDataset, PairSet, SynthError};
use crate::tensor::{Tensor, TensorError};
use crate::train::{
    run_dpo, select_checkpoints, select_initial_and_final, select_single, train_trajectory,
    CheckpointStore, TrainConfig, TrainError, TrajectoryTag,
};
use crate::model::HeadParams;

#[derive(Clone, Debug)]
pub enum EvalError {
    /// Cosine distance is undefined for (near-)zero vectors.
    ZeroVector,
    EmptyDistances,
    BadFar { far: f64 },
    Insufficient { detail: String },
    Model(ModelError),
    Tensor(TensorError),
    Train(TrainError),
    Synth(SynthError),
    Attack(AttackError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::ZeroVector => write!(f, "cosine distance undefined for zero vector"),
            EvalError::EmptyDistances => write!(f, "impostor distance list is empty"),
            EvalError::BadFar { far } => write!(f, "far {far} must lie in [0, 1)"),
            EvalError::Insufficient { detail } => write!(f, "insufficient data: {detail}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Tensor(e) => write!(f, "{e}"),
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Synth(e) => write!(f, "{e}"),
            EvalError::Attack(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}
impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}
impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(e)
    }
}
impl From<SynthError> for EvalError {
    fn from(e: SynthError) -> Self {
        EvalError::Synth(e)
    }
}
impl From<AttackError> for EvalError {
    fn from(e: AttackError) -> Self {
        EvalError::Attack(e)
    }
}

/// Cosine distance `1 − u·v / (‖u‖‖v‖)`, clamped into [0, 2].
pub fn embedding_distance(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::Tensor(TensorError::ShapeMismatch {
            op: "embedding_distance",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        }));
    }
    let nu = libm::sqrt(u.iter().map(|x| x * x).sum());
    let nv = libm::sqrt(v.iter().map(|x| x * x).sum());
    if nu <= 1e-12 || nv <= 1e-12 {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

/// Decision threshold at a target false-accept rate: with the impostor
/// distances sorted ascending and `k = ⌊far·N⌋`, the (k+1)-th smallest
/// distance, so exactly at most `k` impostor pairs fall strictly below it.
pub fn far_threshold(impostor_distances: &[f64], far: f64) -> Result<f64, EvalError> {
    if impostor_distances.is_empty() {
        return Err(EvalError::EmptyDistances);
    }
    if !(0.0..1.0).contains(&far) {
        return Err(EvalError::BadFar { far });
    }
    let mut sorted = impostor_distances.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let k = libm::floor(far * sorted.len() as f64) as usize;
    Ok(sorted[k])
}

/// Same-identity and cross-identity index pairs used for calibration.
#[derive(Clone, Debug)]
pub struct VerificationProtocol {
    pub genuine: Vec<(usize, usize)>,
    pub impostor: Vec<(usize, usize)>,
}

impl VerificationProtocol {
    /// Sample a protocol from a dataset. Genuine pairs need a class with at
    /// least two samples; impostor pairs span distinct labels.
    pub fn build(
        dataset: &IdentityDataset,
        genuine_pairs: usize,
        impostor_pairs: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        if dataset.len() < 2 || dataset.class_count < 2 {
            return Err(EvalError::Insufficient {
                detail: String::from("protocol needs at least two samples over two identities"),
            });
        }
        let has_genuine_class = (0..dataset.class_count)
            .any(|c| dataset.indices_of_class(c).len() >= 2);
        if genuine_pairs > 0 && !has_genuine_class {
            return Err(EvalError::Insufficient {
                detail: String::from("no class has two samples for genuine pairs"),
            });
        }
        let mut stream = Stream::new(derive(seed, b"protocol"));
        let mut genuine = Vec::with_capacity(genuine_pairs);
        while genuine.len() < genuine_pairs {
            let a = stream.index(dataset.len());
            let b = stream.index(dataset.len());
            if a != b && dataset.label(a) == dataset.label(b) {
                genuine.push((a, b));
            }
        }
        let mut impostor = Vec::with_capacity(impostor_pairs);
        while impostor.len() < impostor_pairs {
            let a = stream.index(dataset.len());
            let b = stream.index(dataset.len());
            if dataset.label(a) != dataset.label(b) {
                impostor.push((a, b));
            }
        }
        Ok(VerificationProtocol { genuine, impostor })
    }
}

/// Unit embeddings of every dataset sample under one model, as an n×r matrix.
pub fn embed_dataset(
    spec: &BackboneSpec,
    params: &BackboneParams,
    dataset: &IdentityDataset,
) -> Result<Tensor, EvalError> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (batch, _) = dataset.batch(&indices);
    Ok(unit_embedding(spec, params, &batch)?)
}

fn matrix_row(m: &Tensor, row: usize) -> &[f64] {
    let cols = m.shape()[1];
    &m.data()[row * cols..(row + 1) * cols]
}

/// Distances of the protocol's impostor pairs under one model.
pub fn impostor_distances(
    spec: &BackboneSpec,
    params: &BackboneParams,
    dataset: &IdentityDataset,
    protocol: &VerificationProtocol,
) -> Result<Vec<f64>, EvalError> {
    let embeddings = embed_dataset(spec, params, dataset)?;
    protocol
        .impostor
        .iter()
        .map(|&(a, b)| embedding_distance(matrix_row(&embeddings, a), matrix_row(&embeddings, b)))
        .collect()
}

/// FAR threshold of one victim over the protocol's impostor pairs.
pub fn victim_threshold(
    spec: &BackboneSpec,
    params: &BackboneParams,
    dataset: &IdentityDataset,
    protocol: &VerificationProtocol,
    far: f64,
) -> Result<f64, EvalError> {
    let dists = impostor_distances(spec, params, dataset, protocol)?;
    far_threshold(&dists, far)
}

/// Success count under strict `distance < threshold`.
pub fn asr_from_distances(distances: &[f64], threshold: f64) -> (usize, f64) {
    let successes = distances.iter().filter(|&&d| d < threshold).count();
    let percent = if distances.is_empty() {
        0.0
    } else {
        100.0 * successes as f64 / distances.len() as f64
    };
    (successes, percent)
}

/// Per-victim attack success report.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrReport {
    pub victim: String,
    pub threshold: f64,
    pub pair_count: usize,
    pub successes: usize,
    pub asr_percent: f64,
    pub metric: &'static str,
    pub distances: Vec<f64>,
}

/// Evaluate adversarial examples against one victim: success when the victim
/// places the example strictly within the threshold of its target image.
pub fn asr(
    spec: &BackboneSpec,
    victim: &BackboneParams,
    victim_name: &str,
    adversarial: &[Tensor],
    targets: &[Tensor],
    threshold: f64,
) -> Result<AsrReport, EvalError> {
    if adversarial.len() != targets.len() {
        return Err(EvalError::Insufficient {
            detail: format!(
                "{} adversarial examples vs {} targets",
                adversarial.len(),
                targets.len()
            ),
        });
    }
    if adversarial.is_empty() {
        return Err(EvalError::Insufficient {
            detail: String::from("no adversarial examples to evaluate"),
        });
    }
    let mut distances = Vec::with_capacity(adversarial.len());
    for (adv, tgt) in adversarial.iter().zip(targets) {
        let ea = unit_embedding(spec, victim, adv)?;
        let et = unit_embedding(spec, victim, tgt)?;
        distances.push(embedding_distance(ea.data(), et.data())?);
    }
    let (successes, asr_percent) = asr_from_distances(&distances, threshold);
    Ok(AsrReport {
        victim: String::from(victim_name),
        threshold,
        pair_count: distances.len(),
        successes,
        asr_percent,
        metric: "cosine-distance",
        distances,
    })
}

// ── Experiment engine ────────────────────────────────────────────────

/// Synthetic data shape shared by surrogate and victim training.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub sigma: f64,
    pub train_fraction: f64,
}

/// How the stand-in pretrained backbone is produced: a prior training run on
/// disjoint identities.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub classes: usize,
    pub per_class: usize,
    pub epochs: usize,
}

/// Full recipe for one desk-scale experiment cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
    /// Backbone hook layers; `None` hooks every hidden layer.
    pub hooks: Option<Vec<usize>>,
    pub margin: MarginSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub victim_epochs: usize,
    pub attack_pairs: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub far: f64,
}

impl ExperimentConfig {
    pub fn backbone_spec(&self) -> Result<BackboneSpec, ModelError> {
        match &self.hooks {
            Some(h) => BackboneSpec::with_hooks(
                self.data.input_dim,
                self.hidden_widths.clone(),
                self.embedding_dim,
                h.clone(),
            ),
            None => BackboneSpec::new(
                self.data.input_dim,
                self.hidden_widths.clone(),
                self.embedding_dim,
            ),
        }
    }
}

/// Everything trained and sampled for one experiment seed.
pub struct SeedContext {
    pub spec: BackboneSpec,
    pub store: CheckpointStore,
    pub selected: Vec<BackboneParams>,
    pub eval_data: IdentityDataset,
    pub pairs: PairSet,
    pub victim: BackboneParams,
    pub victim_threshold: f64,
    /// The canonical single surrogate: the final pretrained-trajectory model.
    pub surrogate: BackboneParams,
    pub surrogate_threshold: f64,
    pub protocol: VerificationProtocol,
}

/// Train a backbone end to end and return its final parameters. Used for the
/// pretraining bootstrap and the victim.
pub fn train_backbone(
    spec: &BackboneSpec,
    margin: &MarginSpec,
    init: BackboneParams,
    head: HeadParams,
    data: &IdentityDataset,
    config: &TrainConfig,
) -> Result<BackboneParams, EvalError> {
    let run = train_trajectory(
        spec,
        margin,
        init,
        head,
        data,
        config,
        TrajectoryTag::Random,
    )?;
    Ok(run
        .checkpoints
        .last()
        .expect("at least one epoch")
        .backbone
        .clone())
}

/// Produce the stand-in pretrained backbone: train from scratch on a dataset
/// of disjoint identities, then keep only the backbone.
pub fn bootstrap_pretrained(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<BackboneParams, EvalError> {
    let spec = cfg.backbone_spec()?;
    let data = generate(
        derive(seed, b"pretrain-data"),
        cfg.pretrain.classes,
        cfg.pretrain.per_class,
        cfg.data.input_dim,
        cfg.data.sigma,
    )?;
    let init = BackboneParams::init(&spec, derive(seed, b"pretrain-init"));
    let head = HeadParams::init(
        cfg.pretrain.classes,
        cfg.embedding_dim,
        derive(seed, b"pretrain-head"),
    )?;
    let config = TrainConfig {
        epochs: cfg.pretrain.epochs,
        seed: derive(seed, b"pretrain-train"),
        ..cfg.train.clone()
    };
    train_backbone(&spec, &cfg.margin, init, head, &data, &config)
}

/// Run the full per-seed pipeline: bootstrap, dual-trajectory training,
/// selection, victim training, pair sampling, and threshold calibration.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext, EvalError> {
    let spec = cfg.backbone_spec()?;
    cfg.attack.validate(&spec)?;

    let pretrained = bootstrap_pretrained(cfg, seed)?;

    let main = generate(
        derive(seed, b"main-data"),
        cfg.data.classes,
        cfg.data.per_class,
        cfg.data.input_dim,
        cfg.data.sigma,
    )?;
    let (train_data, eval_data) = split(&main, cfg.data.train_fraction, derive(seed, b"split"))?;

    let dpo_config = TrainConfig {
        seed: derive(seed, b"dpo-train"),
        ..cfg.train.clone()
    };
    let dpo = run_dpo(&spec, &cfg.margin, &pretrained, &train_data, &dpo_config)?;
    let selected = select_checkpoints(&dpo.store, cfg.train.epochs)?;
    let surrogate = dpo
        .store
        .get(TrajectoryTag::Pretrained, cfg.train.epochs)
        .expect("final pretrained checkpoint exists")
        .backbone
        .clone();

    // Victim: same identity space, fresh sample draw, independent seeds.
    let victim_data = generate_resampled(
        derive(seed, b"main-data"),
        derive(seed, b"victim-draw"),
        cfg.data.classes,
        cfg.data.per_class,
        cfg.data.input_dim,
        cfg.data.sigma,
    )?;
    let victim_init = BackboneParams::init(&spec, derive(seed, b"victim-init"));
    let victim_head = HeadParams::init(
        cfg.data.classes,
        cfg.embedding_dim,
        derive(seed, b"victim-head"),
    )?;
    let victim_config = TrainConfig {
        epochs: cfg.victim_epochs,
        seed: derive(seed, b"victim-train"),
        ..cfg.train.clone()
    };
    let victim = train_backbone(
        &spec,
        &cfg.margin,
        victim_init,
        victim_head,
        &victim_data,
        &victim_config,
    )?;

    let pairs = sample_attack_pairs(&eval_data, cfg.attack_pairs, derive(seed, b"attack-pairs"))?;
    let protocol = VerificationProtocol::build(
        &eval_data,
        cfg.genuine_pairs,
        cfg.impostor_pairs,
        derive(seed, b"protocol"),
    )?;
    let victim_threshold = victim_threshold(&spec, &victim, &eval_data, &protocol, cfg.far)?;
    let surrogate_threshold = victim_threshold_of(&spec, &surrogate, &eval_data, &protocol, cfg.far)?;

    Ok(SeedContext {
        spec,
        store: dpo.store,
        selected,
        eval_data,
        pairs,
        victim,
        victim_threshold,
        surrogate,
        surrogate_threshold,
        protocol,
    })
}

fn victim_threshold_of(
    spec: &BackboneSpec,
    params: &BackboneParams,
    dataset: &IdentityDataset,
    protocol: &VerificationProtocol,
    far: f64,
) -> Result<f64, EvalError> {
    victim_threshold(spec, params, dataset, protocol, far)
}

/// Attack modes compared by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Single final surrogate, no feature perturbations.
    Vanilla,
    /// Diversified checkpoint ensemble, vanilla models.
    Dpo,
    /// Diversified ensemble of hard models.
    DpoHma,
    /// Initial pretrained plus both final checkpoints only.
    FinalTrio,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Vanilla => "vanilla",
            AblationMode::Dpo => "dpo",
            AblationMode::DpoHma => "dpo+hma",
            AblationMode::FinalTrio => "fm",
        }
    }

    pub const ALL: [AblationMode; 4] = [
        AblationMode::Vanilla,
        AblationMode::Dpo,
        AblationMode::DpoHma,
        AblationMode::FinalTrio,
    ];
}

/// Model set and feature-perturbation step for a mode.
pub fn mode_models(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    mode: AblationMode,
) -> Result<(Vec<BackboneParams>, f64), EvalError> {
    Ok(match mode {
        AblationMode::Vanilla => (vec![ctx.surrogate.clone()], 0.0),
        AblationMode::Dpo => (ctx.selected.clone(), 0.0),
        AblationMode::DpoHma => (ctx.selected.clone(), cfg.attack.eta),
        AblationMode::FinalTrio => (
            select_initial_and_final(&ctx.store, cfg.train.epochs)?,
            0.0,
        ),
    })
}

/// Craft every pair against a model set and collect examples plus targets.
pub fn craft_pairs(
    spec: &BackboneSpec,
    models: &[BackboneParams],
    eval_data: &IdentityDataset,
    pairs: &PairSet,
    config: &AttackConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>), EvalError> {
    let mut advs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for &(s, t) in &pairs.pairs {
        let x_s = eval_data.sample_row(s);
        let x_t = eval_data.sample_row(t);
        let trace = if config.eta == 0.0 {
            craft_dma(spec, models, &x_s, &x_t, config)?
        } else {
            craft(spec, models, &x_s, &x_t, config)?
        };
        advs.push(trace.adversarial);
        targets.push(x_t);
    }
    Ok((advs, targets))
}

/// Black-box and white-box ASR of one mode in one seed context.
#[derive(Clone, Debug)]
pub struct ModeOutcome {
    pub mode: AblationMode,
    pub black_box: AsrReport,
    pub white_box: AsrReport,
}

pub fn run_ablation_cell(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    mode: AblationMode,
) -> Result<ModeOutcome, EvalError> {
    let (models, eta) = mode_models(cfg, ctx, mode)?;
    let attack_cfg = AttackConfig {
        eta,
        ..cfg.attack.clone()
    };
    let (advs, targets) = craft_pairs(&ctx.spec, &models, &ctx.eval_data, &ctx.pairs, &attack_cfg)?;
    let black_box = asr(
        &ctx.spec,
        &ctx.victim,
        "held-out-victim",
        &advs,
        &targets,
        ctx.victim_threshold,
    )?;
    let white_box = asr(
        &ctx.spec,
        &ctx.surrogate,
        "surrogate",
        &advs,
        &targets,
        ctx.surrogate_threshold,
    )?;
    Ok(ModeOutcome {
        mode,
        black_box,
        white_box,
    })
}

/// Mean and population standard deviation of per-seed values.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedStats {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        SeedStats {
            per_seed: values,
            mean,
            std: libm::sqrt(var),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub models: usize,
    pub black_box: SeedStats,
    pub white_box: SeedStats,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Run all four ablation modes over the given seeds.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::Insufficient {
            detail: String::from("ablation needs at least one seed"),
        });
    }
    let mut black: Vec<Vec<f64>> = vec![Vec::new(); AblationMode::ALL.len()];
    let mut white: Vec<Vec<f64>> = vec![Vec::new(); AblationMode::ALL.len()];
    let mut model_counts = [0usize; 4];
    for &seed in seeds {
        let ctx = prepare_seed(cfg, seed)?;
        for (i, &mode) in AblationMode::ALL.iter().enumerate() {
            let outcome = run_ablation_cell(cfg, &ctx, mode)?;
            black[i].push(outcome.black_box.asr_percent);
            white[i].push(outcome.white_box.asr_percent);
            model_counts[i] = mode_models(cfg, &ctx, mode)?.0.len();
        }
    }
    let rows = AblationMode::ALL
        .iter()
        .enumerate()
        .map(|(i, &mode)| AblationRow {
            mode,
            models: model_counts[i],
            black_box: SeedStats::from_values(black[i].clone()),
            white_box: SeedStats::from_values(white[i].clone()),
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug)]
pub struct EtaSweepPoint {
    pub eta: f64,
    pub black_box: SeedStats,
}

#[derive(Clone, Debug)]
pub struct EtaSweepReport {
    pub seeds: Vec<u64>,
    pub points: Vec<EtaSweepPoint>,
}

/// Sweep the beneficial-perturbation step over the diversified ensemble.
/// The η = 0 grid point is exactly the vanilla-ensemble baseline.
pub fn run_eta_sweep(
    cfg: &ExperimentConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<EtaSweepReport, EvalError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(EvalError::Insufficient {
            detail: String::from("eta sweep needs a non-empty grid and seeds"),
        });
    }
    let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for &seed in seeds {
        let ctx = prepare_seed(cfg, seed)?;
        for (gi, &eta) in grid.iter().enumerate() {
            let attack_cfg = AttackConfig {
                eta,
                ..cfg.attack.clone()
            };
            let (advs, targets) =
                craft_pairs(&ctx.spec, &ctx.selected, &ctx.eval_data, &ctx.pairs, &attack_cfg)?;
            let report = asr(
                &ctx.spec,
                &ctx.victim,
                "held-out-victim",
                &advs,
                &targets,
                ctx.victim_threshold,
            )?;
            per_point[gi].push(report.asr_percent);
        }
    }
    Ok(EtaSweepReport {
        seeds: seeds.to_vec(),
        points: grid
            .iter()
            .zip(per_point)
            .map(|(&eta, values)| EtaSweepPoint {
                eta,
                black_box: SeedStats::from_values(values),
            })
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct EpochSweepPoint {
    pub epochs: usize,
    pub diverse_models: usize,
    pub single_models: usize,
    pub diverse: SeedStats,
    pub single: SeedStats,
}

#[derive(Clone, Debug)]
pub struct EpochSweepReport {
    pub seeds: Vec<u64>,
    pub points: Vec<EpochSweepPoint>,
}

/// Sweep the epoch count. Training runs once per seed at the largest grid
/// value; smaller values reuse the prefix of that trajectory. Each point
/// reports the dual-trajectory (diverse) and pretrained-only (single)
/// selections.
pub fn run_epoch_sweep(
    cfg: &ExperimentConfig,
    grid: &[usize],
    seeds: &[u64],
) -> Result<EpochSweepReport, EvalError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(EvalError::Insufficient {
            detail: String::from("epoch sweep needs a non-empty grid and seeds"),
        });
    }
    if grid.iter().any(|&c| c == 0) {
        return Err(EvalError::Insufficient {
            detail: String::from("epoch grid values must be at least 1"),
        });
    }
    let c_max = *grid.iter().max().expect("non-empty grid");
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.train.epochs = c_max;

    let mut diverse: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    let mut single: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    let mut diverse_counts = vec![0usize; grid.len()];
    let mut single_counts = vec![0usize; grid.len()];

    for &seed in seeds {
        let ctx = prepare_seed(&sweep_cfg, seed)?;
        for (gi, &c) in grid.iter().enumerate() {
            let div_models = select_checkpoints(&ctx.store, c)?;
            let sin_models = select_single(&ctx.store, c)?;
            diverse_counts[gi] = div_models.len();
            single_counts[gi] = sin_models.len();
            for (models, bucket) in [(&div_models, &mut diverse[gi]), (&sin_models, &mut single[gi])]
            {
                let (advs, targets) =
                    craft_pairs(&ctx.spec, models, &ctx.eval_data, &ctx.pairs, &cfg.attack)?;
                let report = asr(
                    &ctx.spec,
                    &ctx.victim,
                    "held-out-victim",
                    &advs,
                    &targets,
                    ctx.victim_threshold,
                )?;
                bucket.push(report.asr_percent);
            }
        }
    }

    Ok(EpochSweepReport {
        seeds: seeds.to_vec(),
        points: grid
            .iter()
            .enumerate()
            .map(|(gi, &c)| EpochSweepPoint {
                epochs: c,
                diverse_models: diverse_counts[gi],
                single_models: single_counts[gi],
                diverse: SeedStats::from_values(diverse[gi].clone()),
                single: SeedStats::from_values(single[gi].clone()),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_identical_orthogonal_opposite() {
        assert_eq!(embedding_distance(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(embedding_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(embedding_distance(&[1.0, 0.0], &[-5.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn distance_rejects_zero_vector() {
        assert!(matches!(
            embedding_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EvalError::ZeroVector)
        ));
    }

    #[test]
    fn threshold_is_second_smallest_at_milli_far() {
        let mut stream = Stream::new(40);
        let mut dists: Vec<f64> = (0..1000).map(|_| stream.uniform(0.1, 1.9)).collect();
        let t = far_threshold(&dists, 0.001).unwrap();
        dists.sort_unstable_by(f64::total_cmp);
        assert_eq!(t, dists[1]);
        let below = dists.iter().filter(|&&d| d < t).count();
        assert!(below <= 1);
    }

    #[test]
    fn threshold_at_zero_far_is_minimum() {
        let dists = [0.5, 0.2, 0.9];
        assert_eq!(far_threshold(&dists, 0.0).unwrap(), 0.2);
    }

    #[test]
    fn threshold_enumeration_example() {
        let dists = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(far_threshold(&dists, 0.25).unwrap(), 0.3);
    }

    #[test]
    fn threshold_scale_equivariance() {
        let dists = [0.3, 0.8, 0.1, 1.2, 0.05, 0.6];
        let t = far_threshold(&dists, 0.2).unwrap();
        let scaled: Vec<f64> = dists.iter().map(|d| d * 3.5).collect();
        let ts = far_threshold(&scaled, 0.2).unwrap();
        assert!((ts - 3.5 * t).abs() < 1e-15);
    }

    #[test]
    fn threshold_validates_inputs() {
        assert!(matches!(far_threshold(&[], 0.1), Err(EvalError::EmptyDistances)));
        assert!(matches!(
            far_threshold(&[0.1], 1.0),
            Err(EvalError::BadFar { .. })
        ));
    }

    #[test]
    fn asr_counting_is_strict() {
        let (succ, pct) = asr_from_distances(&[0.1, 0.5, 0.9], 0.5);
        assert_eq!(succ, 1);
        assert!((pct - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(asr_from_distances(&[0.1, 0.2], 0.5), (2, 100.0));
        assert_eq!(asr_from_distances(&[0.9, 0.8], 0.5).0, 0);
    }

    #[test]
    fn asr_is_monotone_in_threshold() {
        let dists = [0.1, 0.3, 0.5, 0.7, 0.9];
        let mut last = 0.0;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0] {
            let (_, pct) = asr_from_distances(&dists, t);
            assert!(pct >= last);
            last = pct;
        }
    }

    use crate::rng::Stream;

    #[test]
    fn protocol_pairs_have_correct_label_structure() {
        let ds = generate(5, 4, 6, 8, 4.0).unwrap();
        let proto = VerificationProtocol::build(&ds, 30, 50, 9).unwrap();
        assert_eq!(proto.genuine.len(), 30);
        assert_eq!(proto.impostor.len(), 50);
        for &(a, b) in &proto.genuine {
            assert_eq!(ds.label(a), ds.label(b));
            assert_ne!(a, b);
        }
        for &(a, b) in &proto.impostor {
            assert_ne!(ds.label(a), ds.label(b));
        }
    }
}
