//! Hard-model-aggregation attack crafting.
//!
//! One crafting iteration runs every surrogate forward as a chain of layer
//! segments split at the hook layers. From the second iteration on, each hook
//! feature map is shifted by `η · sign(∂L/∂ω)` taken from the previous
//! iteration — the direction that *increases* the loss — turning the
//! surrogate into a hard model. The aggregated loss is the mean over models
//! of the distance between the unit-normalized adversarial embedding and the
//! cached unit target embedding. The input update is one sign-descent step
//! followed by projection into the ε-ball around the source intersected with
//! the pixel range.
//!
//! Everything is sequential in fixed model order, so traces are reproducible
//! bit for bit.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{
    embed, forward_segment, trace_backbone, BackboneParams, BackboneSpec, ModelError, PIXEL_MAX,
};
use crate::tensor::{clip_box, sign, Tape, Tensor, TensorError};

/// Input transformation applied to the adversarial example each iteration.
/// Only the identity is defined; the tag is an extension point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransformTag {
    #[default]
    Identity,
}

/// Which norm the per-model embedding distance uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossNorm {
    /// Squared L2 (the cheaper default; identical descent signs).
    #[default]
    Squared,
    /// Plain L2.
    Plain,
}

/// All crafting knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Maximum L∞ perturbation, in pixel units.
    pub epsilon: f64,
    /// Sign-descent step size β.
    pub step_size: f64,
    /// Beneficial-perturbation step η on hook feature maps.
    pub eta: f64,
    /// Iteration count n.
    pub iterations: usize,
    /// Hook subset Φ; `None` uses every hook layer the backbone declares.
    pub hooks: Option<Vec<usize>>,
    pub transform: TransformTag,
    pub loss_norm: LossNorm,
    /// Echoed into traces; crafting itself is deterministic.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 10.0,
            step_size: 1.0,
            eta: 8e-4,
            iterations: 200,
            hooks: None,
            transform: TransformTag::Identity,
            loss_norm: LossNorm::Squared,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, spec: &BackboneSpec) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) {
            return Err(AttackError::BadConfig(String::from("epsilon must be non-negative")));
        }
        if !(self.step_size > 0.0) {
            return Err(AttackError::BadConfig(String::from("step_size must be positive")));
        }
        if !(self.eta >= 0.0) {
            return Err(AttackError::BadConfig(String::from("eta must be non-negative")));
        }
        if self.iterations == 0 {
            return Err(AttackError::BadConfig(String::from("iterations must be at least 1")));
        }
        if let Some(hooks) = &self.hooks {
            let increasing = hooks.windows(2).all(|w| w[0] < w[1]);
            let subset = hooks.iter().all(|h| spec.hook_layers.contains(h));
            if !increasing || !subset {
                return Err(AttackError::BadConfig(String::from(
                    "hooks must be a strictly increasing subset of the backbone hook layers",
                )));
            }
        }
        Ok(())
    }

    /// The effective hook set Φ for a given backbone.
    pub fn effective_hooks(&self, spec: &BackboneSpec) -> Vec<usize> {
        match &self.hooks {
            Some(h) => h.clone(),
            None => spec.hook_layers.clone(),
        }
    }

    fn with_eta(&self, eta: f64) -> AttackConfig {
        AttackConfig {
            eta,
            ..self.clone()
        }
    }
}

/// Per-model, per-hook sign buffers of the previous iteration's feature-map
/// gradients. Absent exactly at the first iteration.
#[derive(Clone, Debug, Default)]
pub struct HardState {
    buffers: Option<Vec<Vec<Tensor>>>,
}

impl HardState {
    pub fn empty() -> Self {
        HardState { buffers: None }
    }

    pub fn is_primed(&self) -> bool {
        self.buffers.is_some()
    }

    pub fn buffers_for(&self, model: usize) -> Option<&[Tensor]> {
        self.buffers.as_ref().map(|b| b[model].as_slice())
    }

    /// Replace the buffers with fresh sign tensors for the next iteration.
    pub fn prime(&mut self, signs: Vec<Vec<Tensor>>) {
        self.buffers = Some(signs);
    }
}

/// Loss curve, perturbation audit, and final example of one crafted attack.
#[derive(Clone, Debug)]
pub struct AttackTrace {
    /// Aggregated loss at each iteration (evaluated before that iteration's
    /// input update).
    pub losses: Vec<f64>,
    /// `‖x_adv − x_source‖∞` after each iteration's update.
    pub max_perturbation: Vec<f64>,
    pub adversarial: Tensor,
}

impl AttackTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Clone, Debug)]
pub enum AttackError {
    BadConfig(String),
    /// The aggregated loss went non-finite; carries the partial trace.
    NonFiniteLoss { iteration: usize, trace: AttackTrace },
    /// Inputs must sit inside the pixel range.
    PixelRange { index: usize, value: f64 },
    NoModels,
    /// Hard-state buffers do not match the hook set.
    BufferMismatch { expected: usize, got: usize },
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackError::BadConfig(detail) => write!(f, "invalid attack config: {detail}"),
            AttackError::NonFiniteLoss { iteration, .. } => {
                write!(f, "aggregated loss went non-finite at iteration {iteration}")
            }
            AttackError::PixelRange { index, value } => {
                write!(f, "input pixel {index} = {value} outside [0, {PIXEL_MAX}]")
            }
            AttackError::NoModels => write!(f, "attack needs at least one surrogate model"),
            AttackError::BufferMismatch { expected, got } => {
                write!(f, "hard-state buffer count {got} does not match hook count {expected}")
            }
            AttackError::Model(e) => write!(f, "{e}"),
            AttackError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AttackError {}

impl From<ModelError> for AttackError {
    fn from(e: ModelError) -> Self {
        AttackError::Model(e)
    }
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Tensor(e)
    }
}

/// Apply the configured input transformation. Identity returns the tensor
/// unchanged (same tape node).
pub fn input_transform(tag: TransformTag, x: &Tensor) -> Tensor {
    match tag {
        TransformTag::Identity => x.clone(),
    }
}

/// Unit-normalized target embeddings, one per surrogate. Computed once per
/// attack; the targets are constants across iterations.
pub fn target_embeddings(
    spec: &BackboneSpec,
    models: &[BackboneParams],
    x_target: &Tensor,
) -> Result<Vec<Tensor>, AttackError> {
    if models.is_empty() {
        return Err(AttackError::NoModels);
    }
    let mut out = Vec::with_capacity(models.len());
    for params in models {
        let mut tape = Tape::new();
        let traced = trace_backbone(&mut tape, spec, params, false)?;
        let (e, _) = embed(&mut tape, &traced, x_target, false)?;
        let unit = tape.l2_normalize_rows(&e)?;
        out.push(unit.detached());
    }
    Ok(out)
}

/// Forward through one surrogate with beneficial perturbations applied after
/// each hook layer. `buffers` must be `Some` exactly when this is not the
/// first iteration. Returns the embedding node and the (post-perturbation)
/// hook nodes, which is where gradients are taken.
pub fn hard_forward(
    tape: &mut Tape,
    spec: &BackboneSpec,
    params: &BackboneParams,
    x: &Tensor,
    buffers: Option<&[Tensor]>,
    hooks: &[usize],
    eta: f64,
) -> Result<(Tensor, Vec<Tensor>), AttackError> {
    let traced = trace_backbone(tape, spec, params, false)?;
    if let Some(bufs) = buffers {
        if bufs.len() != hooks.len() {
            return Err(AttackError::BufferMismatch {
                expected: hooks.len(),
                got: bufs.len(),
            });
        }
    }
    let z = spec.layer_count();
    let mut cur = x.clone();
    let mut hook_nodes = Vec::with_capacity(hooks.len());
    let mut start = 1usize;
    for (j, &h) in hooks.iter().enumerate() {
        cur = forward_segment(tape, &traced, start, h, &cur)?;
        if eta != 0.0 {
            if let Some(bufs) = buffers {
                let shift: Vec<f64> = bufs[j].data().iter().map(|s| eta * s).collect();
                let shift = Tensor::from_arc(bufs[j].shape().to_vec(), Arc::new(shift), None);
                let shift = tape.constant(&shift);
                cur = tape.add(&cur, &shift)?;
            }
        }
        hook_nodes.push(cur.clone());
        start = h + 1;
    }
    let embedding = forward_segment(tape, &traced, start, z, &cur)?;
    Ok((embedding, hook_nodes))
}

/// Aggregated embedding-distance loss over all hard models, plus the hook
/// nodes of every model for gradient capture. Whether beneficial
/// perturbations apply is decided by `state` being primed.
pub fn aggregate_loss(
    tape: &mut Tape,
    spec: &BackboneSpec,
    models: &[BackboneParams],
    x_adv: &Tensor,
    targets: &[Tensor],
    state: &HardState,
    config: &AttackConfig,
) -> Result<(Tensor, Vec<Vec<Tensor>>), AttackError> {
    if models.is_empty() {
        return Err(AttackError::NoModels);
    }
    if targets.len() != models.len() {
        return Err(AttackError::BufferMismatch {
            expected: models.len(),
            got: targets.len(),
        });
    }
    let hooks = config.effective_hooks(spec);
    let mut total: Option<Tensor> = None;
    let mut all_hooks = Vec::with_capacity(models.len());
    for (i, params) in models.iter().enumerate() {
        let (e, hook_nodes) = hard_forward(
            tape,
            spec,
            params,
            x_adv,
            state.buffers_for(i),
            &hooks,
            config.eta,
        )?;
        let unit = tape.l2_normalize_rows(&e)?;
        let target = tape.constant(&targets[i]);
        let diff = tape.sub(&unit, &target)?;
        let sq = tape.square(&diff)?;
        let mut term = tape.sum(&sq)?;
        if config.loss_norm == LossNorm::Plain {
            term = tape.sqrt_clamped(&term)?;
        }
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
        all_hooks.push(hook_nodes);
    }
    let total = total.expect("at least one model");
    let loss = tape.scale(&total, 1.0 / models.len() as f64)?;
    Ok((loss, all_hooks))
}

/// One sign-descent step followed by the box projection around the source.
pub fn attack_step(
    x_prev: &Tensor,
    gradient: &Tensor,
    x_source: &Tensor,
    config: &AttackConfig,
) -> Result<Tensor, AttackError> {
    if x_prev.shape() != gradient.shape() {
        return Err(AttackError::Tensor(TensorError::ShapeMismatch {
            op: "attack_step",
            lhs: x_prev.shape().to_vec(),
            rhs: gradient.shape().to_vec(),
        }));
    }
    let direction = sign(gradient);
    let stepped: Vec<f64> = x_prev
        .data()
        .iter()
        .zip(direction.data())
        .map(|(x, s)| x - config.step_size * s)
        .collect();
    let stepped = Tensor::from_arc(x_prev.shape().to_vec(), Arc::new(stepped), None);
    Ok(clip_box(&stepped, x_source, config.epsilon, 0.0, PIXEL_MAX)?)
}

fn check_pixels(x: &Tensor) -> Result<(), AttackError> {
    for (i, &v) in x.data().iter().enumerate() {
        if !(0.0..=PIXEL_MAX).contains(&v) {
            return Err(AttackError::PixelRange { index: i, value: v });
        }
    }
    Ok(())
}

fn check_input(spec: &BackboneSpec, name: &'static str, x: &Tensor) -> Result<(), AttackError> {
    if x.shape() != [1, spec.input_dim] {
        return Err(AttackError::Tensor(TensorError::ShapeMismatch {
            op: name,
            lhs: x.shape().to_vec(),
            rhs: vec![1, spec.input_dim],
        }));
    }
    check_pixels(x)
}

/// Craft an impersonation example against the aggregated hard models.
///
/// Iteration `t` evaluates the loss at the current example, refreshes the
/// beneficial-perturbation buffers from the hook gradients (used at `t+1`),
/// and takes one clipped sign step on the input. The first iteration runs
/// the plain models.
pub fn craft(
    spec: &BackboneSpec,
    models: &[BackboneParams],
    x_source: &Tensor,
    x_target: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace, AttackError> {
    config.validate(spec)?;
    if models.is_empty() {
        return Err(AttackError::NoModels);
    }
    check_input(spec, "craft source", x_source)?;
    check_input(spec, "craft target", x_target)?;

    let targets = target_embeddings(spec, models, x_target)?;
    let mut state = HardState::empty();
    let mut x_adv = x_source.detached();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut max_perturbation = Vec::with_capacity(config.iterations);

    for iteration in 1..=config.iterations {
        let mut tape = Tape::new();
        let x_node = tape.var(&x_adv);
        let x_in = input_transform(config.transform, &x_node);

        let (loss, hook_nodes) =
            match aggregate_loss(&mut tape, spec, models, &x_in, &targets, &state, config) {
                Ok(ok) => ok,
                Err(
                    AttackError::Tensor(TensorError::NonFinite { .. })
                    | AttackError::Model(ModelError::Tensor(TensorError::NonFinite { .. })),
                ) => {
                    return Err(AttackError::NonFiniteLoss {
                        iteration,
                        trace: AttackTrace {
                            losses,
                            max_perturbation,
                            adversarial: x_adv,
                        },
                    })
                }
                Err(e) => return Err(e),
            };
        let loss_value = loss.scalar_value()?;

        let x_id = x_node.node().expect("input is a tape leaf");
        let mut requested = vec![x_id];
        for model_hooks in &hook_nodes {
            for h in model_hooks {
                requested.push(h.node().expect("hook nodes live on the tape"));
            }
        }
        let grads = tape.backward(&loss, &requested)?;

        let signs: Vec<Vec<Tensor>> = hook_nodes
            .iter()
            .map(|model_hooks| {
                model_hooks
                    .iter()
                    .map(|h| sign(grads.grad(h.node().unwrap()).expect("requested gradient")))
                    .collect()
            })
            .collect();
        state.prime(signs);

        let gx = grads.grad(x_id).expect("input gradient was requested");
        x_adv = attack_step(&x_adv, gx, x_source, config)?;

        losses.push(loss_value);
        max_perturbation.push(x_adv.linf_distance(x_source)?);
    }

    Ok(AttackTrace {
        losses,
        max_perturbation,
        adversarial: x_adv,
    })
}

/// Ensemble attack over the plain (vanilla) models: `craft` with η forced to
/// zero, so no beneficial perturbations are ever applied.
pub fn craft_dma(
    spec: &BackboneSpec,
    models: &[BackboneParams],
    x_source: &Tensor,
    x_target: &Tensor,
    config: &AttackConfig,
) -> Result<AttackTrace, AttackError> {
    craft(spec, models, x_source, x_target, &config.with_eta(0.0))
}
