//! Embedding backbone and additive-angular-margin head.
//!
//! The backbone is a fully connected relu network over flat pixel vectors in
//! [0, 255]; the first layer folds in a 1/255 rescale so attack arithmetic
//! stays on the pixel scale. Layers are addressed 1-based so the network can
//! be run in segments (`forward_segment`), which is how the attack stage
//! injects feature-map perturbations between designated hook layers.
//!
//! The head turns embeddings into class logits through a cosine similarity
//! matrix with an additive angular margin on the true class:
//! `q = d · (h ⊙ p + (1 − h) ⊙ cos a)` where `p = cos(a + m)` while
//! `a < π − m` and `cos a − m·sin m` past that boundary. The boundary test is
//! evaluated as `cos a > cos(π − m)`, which is equivalent on [0, π] and needs
//! no arccos.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::{derive_n, Stream};
use crate::tensor::{Tape, Tensor, TensorError};

/// Pixel value ceiling; inputs live in [0, PIXEL_MAX].
pub const PIXEL_MAX: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    /// Spec construction failed validation.
    BadSpec { detail: String },
    /// Parameter tensor does not match the spec at the given layer (1-based).
    ParamShape {
        layer: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Layer range outside [1, layer_count].
    LayerRange { from: usize, to: usize, layers: usize },
    /// Head weight row with near-zero norm.
    ZeroHeadRow { row: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadSpec { detail } => write!(f, "invalid backbone spec: {detail}"),
            ModelError::ParamShape { layer, expected, got } => write!(
                f,
                "layer {layer}: parameter shape {got:?} does not match spec {expected:?}"
            ),
            ModelError::LayerRange { from, to, layers } => {
                write!(f, "segment {from}..{to} outside 1..{layers}")
            }
            ModelError::ZeroHeadRow { row } => write!(f, "head weight row {row} is all zero"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Architecture of the embedding backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
    /// 1-based hidden-layer indices where feature maps may be hooked.
    pub hook_layers: Vec<usize>,
}

impl BackboneSpec {
    /// Spec with hooks at every hidden layer.
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        embedding_dim: usize,
    ) -> Result<Self, ModelError> {
        let hooks = (1..=hidden_widths.len()).collect();
        Self::with_hooks(input_dim, hidden_widths, embedding_dim, hooks)
    }

    pub fn with_hooks(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        embedding_dim: usize,
        hook_layers: Vec<usize>,
    ) -> Result<Self, ModelError> {
        if input_dim == 0 {
            return Err(ModelError::BadSpec {
                detail: String::from("input_dim must be positive"),
            });
        }
        if embedding_dim < 2 {
            return Err(ModelError::BadSpec {
                detail: String::from("embedding_dim must be at least 2"),
            });
        }
        if hidden_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::BadSpec {
                detail: String::from("hidden widths must be positive"),
            });
        }
        let hidden = hidden_widths.len();
        let increasing = hook_layers.windows(2).all(|w| w[0] < w[1]);
        if !increasing || hook_layers.iter().any(|&h| h == 0 || h > hidden) {
            return Err(ModelError::BadSpec {
                detail: String::from("hook layers must be strictly increasing hidden-layer indices"),
            });
        }
        Ok(BackboneSpec {
            input_dim,
            hidden_widths,
            embedding_dim,
            hook_layers,
        })
    }

    /// Total layer count `z` (hidden layers plus the embedding layer).
    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// (fan_in, fan_out) of a 1-based layer index.
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let fan_in = if layer == 1 {
            self.input_dim
        } else {
            self.hidden_widths[layer - 2]
        };
        let fan_out = if layer == self.layer_count() {
            self.embedding_dim
        } else {
            self.hidden_widths[layer - 1]
        };
        (fan_in, fan_out)
    }
}

/// One dense layer: `x·W + b`, relu'd everywhere except the embedding layer.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backbone parameters; shapes follow a [`BackboneSpec`].
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub layers: Vec<LinearLayer>,
}

impl BackboneParams {
    /// Glorot-uniform weights (±√(6/(fan_in+fan_out))), zero biases,
    /// reproducible from the seed.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(spec.layer_count());
        for layer in 1..=spec.layer_count() {
            let (fan_in, fan_out) = spec.layer_dims(layer);
            let mut stream = Stream::new(derive_n(seed, b"backbone-layer", layer as u64));
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let weight = Tensor::from_arc(
                vec![fan_in, fan_out],
                Arc::new(stream.uniform_vec(fan_in * fan_out, -bound, bound)),
                None,
            );
            let bias = Tensor::zeros(vec![fan_out]);
            layers.push(LinearLayer { weight, bias });
        }
        BackboneParams { layers }
    }

    /// All-zero parameters, used by degenerate-path tests.
    pub fn zeros(spec: &BackboneSpec) -> Self {
        let layers = (1..=spec.layer_count())
            .map(|layer| {
                let (fan_in, fan_out) = spec.layer_dims(layer);
                LinearLayer {
                    weight: Tensor::zeros(vec![fan_in, fan_out]),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        BackboneParams { layers }
    }

    pub fn matches_spec(&self, spec: &BackboneSpec) -> Result<(), ModelError> {
        if self.layers.len() != spec.layer_count() {
            return Err(ModelError::BadSpec {
                detail: String::from("layer count does not match spec"),
            });
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let expected = spec.layer_dims(idx + 1);
            let ws = layer.weight.shape();
            let got = (ws[0], ws.get(1).copied().unwrap_or(0));
            if ws.len() != 2 || got != expected || layer.bias.shape() != [expected.1] {
                return Err(ModelError::ParamShape {
                    layer: idx + 1,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Bit-level equality of every parameter tensor.
    pub fn bitwise_eq(&self, other: &BackboneParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.bitwise_eq(&b.weight) && a.bias.bitwise_eq(&b.bias))
    }
}

/// Head weight matrix, one row per identity class.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub weight: Tensor,
}

impl HeadParams {
    pub fn init(classes: usize, embedding_dim: usize, seed: u64) -> Result<Self, ModelError> {
        let mut stream = Stream::new(derive_n(seed, b"head", 0));
        let bound = libm::sqrt(6.0 / (classes + embedding_dim) as f64);
        let weight = Tensor::from_arc(
            vec![classes, embedding_dim],
            Arc::new(stream.uniform_vec(classes * embedding_dim, -bound, bound)),
            None,
        );
        let head = HeadParams { weight };
        head.validate()?;
        Ok(head)
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Normalization in the cosine head requires nonzero rows.
    pub fn validate(&self) -> Result<(), ModelError> {
        let [s, r] = self.weight.shape() else {
            return Err(ModelError::BadSpec {
                detail: String::from("head weight must be rank 2"),
            });
        };
        let data = self.weight.data();
        for row in 0..*s {
            let norm2: f64 = data[row * r..(row + 1) * r].iter().map(|x| x * x).sum();
            if norm2 <= 1e-24 {
                return Err(ModelError::ZeroHeadRow { row });
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &HeadParams) -> bool {
        self.weight.bitwise_eq(&other.weight)
    }
}

/// Margin-head hyperparameters: logit scale `d` and angular margin `m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginSpec {
    pub scale: f64,
    pub margin: f64,
}

impl MarginSpec {
    pub fn new(scale: f64, margin: f64) -> Result<Self, ModelError> {
        if !(scale > 0.0) {
            return Err(ModelError::BadSpec {
                detail: String::from("margin scale must be positive"),
            });
        }
        if !(0.0..core::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(ModelError::BadSpec {
                detail: String::from("margin must lie in [0, pi/2)"),
            });
        }
        Ok(MarginSpec { scale, margin })
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        MarginSpec {
            scale: 32.0,
            margin: 0.5,
        }
    }
}

/// Backbone parameters registered on a tape.
pub struct TracedBackbone<'a> {
    pub spec: &'a BackboneSpec,
    pub layers: Vec<LinearLayer>,
}

/// Head weight registered on a tape.
pub struct TracedHead {
    pub weight: Tensor,
}

/// Register backbone parameters on `tape`. With `trainable` set, gradients
/// can be requested for every weight and bias node.
pub fn trace_backbone<'a>(
    tape: &mut Tape,
    spec: &'a BackboneSpec,
    params: &BackboneParams,
    trainable: bool,
) -> Result<TracedBackbone<'a>, ModelError> {
    params.matches_spec(spec)?;
    let layers = params
        .layers
        .iter()
        .map(|l| {
            if trainable {
                LinearLayer {
                    weight: tape.var(&l.weight),
                    bias: tape.var(&l.bias),
                }
            } else {
                LinearLayer {
                    weight: tape.constant(&l.weight),
                    bias: tape.constant(&l.bias),
                }
            }
        })
        .collect();
    Ok(TracedBackbone { spec, layers })
}

pub fn trace_head(tape: &mut Tape, head: &HeadParams, trainable: bool) -> Result<TracedHead, ModelError> {
    head.validate()?;
    let weight = if trainable {
        tape.var(&head.weight)
    } else {
        tape.constant(&head.weight)
    };
    Ok(TracedHead { weight })
}

/// Apply layers `from..=to` (1-based). Layer 1 starts with the 1/255 pixel
/// rescale, so running 1..z reproduces [`embed`] bit for bit.
pub fn forward_segment(
    tape: &mut Tape,
    traced: &TracedBackbone<'_>,
    from: usize,
    to: usize,
    input: &Tensor,
) -> Result<Tensor, ModelError> {
    let z = traced.spec.layer_count();
    if from == 0 || from > to || to > z {
        return Err(ModelError::LayerRange { from, to, layers: z });
    }
    let mut cur = input.clone();
    for layer in from..=to {
        if layer == 1 {
            cur = tape.scale(&cur, 1.0 / PIXEL_MAX)?;
        }
        let params = &traced.layers[layer - 1];
        let lin = tape.matmul(&cur, &params.weight)?;
        let with_bias = tape.add_row_bias(&lin, &params.bias)?;
        cur = if layer < z {
            tape.relu(&with_bias)?
        } else {
            with_bias
        };
    }
    Ok(cur)
}

/// Full forward pass. When `capture_hooks` is set, also returns the feature
/// map at every hook layer, in hook order; those tensors stay attached to the
/// tape so gradients can be requested at them.
pub fn embed(
    tape: &mut Tape,
    traced: &TracedBackbone<'_>,
    x: &Tensor,
    capture_hooks: bool,
) -> Result<(Tensor, Vec<Tensor>), ModelError> {
    let z = traced.spec.layer_count();
    if !capture_hooks || traced.spec.hook_layers.is_empty() {
        let e = forward_segment(tape, traced, 1, z, x)?;
        let hooks = if capture_hooks { Vec::new() } else { Vec::new() };
        return Ok((e, hooks));
    }
    let mut hooks = Vec::with_capacity(traced.spec.hook_layers.len());
    let mut cur = x.clone();
    let mut start = 1;
    for &h in &traced.spec.hook_layers {
        cur = forward_segment(tape, traced, start, h, &cur)?;
        hooks.push(cur.clone());
        start = h + 1;
    }
    let e = forward_segment(tape, traced, start, z, &cur)?;
    Ok((e, hooks))
}

/// Cosine similarity matrix between row-normalized embeddings and
/// row-normalized head weights: `cos a = ē · w̄ᵀ`.
pub fn cosine_matrix(
    tape: &mut Tape,
    embeddings: &Tensor,
    head: &TracedHead,
) -> Result<Tensor, ModelError> {
    let e_norm = tape.l2_normalize_rows(embeddings)?;
    let w_norm = tape.l2_normalize_rows(&head.weight)?;
    let w_t = tape.transpose(&w_norm)?;
    Ok(tape.matmul(&e_norm, &w_t)?)
}

/// Margin-adjusted, scaled logits.
pub fn margin_logits(
    tape: &mut Tape,
    cos_matrix: &Tensor,
    labels: &[usize],
    margin: &MarginSpec,
) -> Result<Tensor, ModelError> {
    let [b, s] = cos_matrix.shape() else {
        return Err(ModelError::Tensor(TensorError::NotMatrix {
            op: "margin_logits",
            shape: cos_matrix.shape().to_vec(),
        }));
    };
    let (b, s) = (*b, *s);
    if labels.len() != b {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "margin_logits",
            lhs: vec![b, s],
            rhs: vec![labels.len()],
        }));
    }
    for &y in labels {
        if y >= s {
            return Err(ModelError::Tensor(TensorError::LabelOutOfRange {
                label: y,
                classes: s,
            }));
        }
    }

    let cos_m = libm::cos(margin.margin);
    let sin_m = libm::sin(margin.margin);
    // Boundary of the margin branch; comparing cosines avoids arccos.
    let boundary = libm::cos(core::f64::consts::PI - margin.margin);

    let cos = tape.clamp_unit(cos_matrix)?;
    let cos_sq = tape.square(&cos)?;
    let neg_sq = tape.scale(&cos_sq, -1.0)?;
    let one_minus = tape.add_scalar(&neg_sq, 1.0)?;
    let sin = tape.sqrt_clamped(&one_minus)?;

    let cos_scaled = tape.scale(&cos, cos_m)?;
    let sin_scaled = tape.scale(&sin, sin_m)?;
    let cos_plus_m = tape.sub(&cos_scaled, &sin_scaled)?;
    let past_boundary = tape.add_scalar(&cos, -(margin.margin * sin_m))?;

    // Piecewise-constant branch mask, built from the forward values.
    let mask_data: Vec<f64> = cos
        .data()
        .iter()
        .map(|&v| if v > boundary { 1.0 } else { 0.0 })
        .collect();
    let inv_mask_data: Vec<f64> = mask_data.iter().map(|&v| 1.0 - v).collect();
    let mask = tape.constant(&Tensor::from_arc(vec![b, s], Arc::new(mask_data), None));
    let inv_mask = tape.constant(&Tensor::from_arc(vec![b, s], Arc::new(inv_mask_data), None));

    let in_branch = tape.hadamard(&mask, &cos_plus_m)?;
    let out_branch = tape.hadamard(&inv_mask, &past_boundary)?;
    let penalized = tape.add(&in_branch, &out_branch)?;

    let mut onehot_data = vec![0.0; b * s];
    let mut inv_onehot_data = vec![1.0; b * s];
    for (i, &y) in labels.iter().enumerate() {
        onehot_data[i * s + y] = 1.0;
        inv_onehot_data[i * s + y] = 0.0;
    }
    let onehot = tape.constant(&Tensor::from_arc(vec![b, s], Arc::new(onehot_data), None));
    let inv_onehot = tape.constant(&Tensor::from_arc(vec![b, s], Arc::new(inv_onehot_data), None));

    let true_part = tape.hadamard(&onehot, &penalized)?;
    let rest_part = tape.hadamard(&inv_onehot, &cos)?;
    let combined = tape.add(&true_part, &rest_part)?;
    Ok(tape.scale(&combined, margin.scale)?)
}

/// Full training loss: embed → cosine matrix → margin logits → cross-entropy.
pub fn arcface_loss(
    tape: &mut Tape,
    backbone: &TracedBackbone<'_>,
    head: &TracedHead,
    x: &Tensor,
    labels: &[usize],
    margin: &MarginSpec,
) -> Result<Tensor, ModelError> {
    let (e, _) = embed(tape, backbone, x, false)?;
    let cos = cosine_matrix(tape, &e, head)?;
    let q = margin_logits(tape, &cos, labels, margin)?;
    Ok(tape.softmax_cross_entropy(&q, labels)?)
}

/// Forward pass on a throwaway tape; returns the detached embedding matrix.
pub fn embed_detached(
    spec: &BackboneSpec,
    params: &BackboneParams,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let traced = trace_backbone(&mut tape, spec, params, false)?;
    let (e, _) = embed(&mut tape, &traced, x, false)?;
    Ok(e.detached())
}

/// Row-normalized detached embedding, the quantity verification compares.
pub fn unit_embedding(
    spec: &BackboneSpec,
    params: &BackboneParams,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let traced = trace_backbone(&mut tape, spec, params, false)?;
    let (e, _) = embed(&mut tape, &traced, x, false)?;
    let n = tape.l2_normalize_rows(&e)?;
    Ok(n.detached())
}
