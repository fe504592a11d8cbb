//! Finite-difference verification of every differentiable primitive and of
//! the composed losses, including gradients at intermediate hook nodes.
//!
//! Each check evaluates a scalar probe of one operation, compares the tape
//! gradient against central finite differences with a relative step, and
//! reports the worst relative error plus the fraction of coordinates inside
//! tolerance. An operation passes when at least [`REQUIRED_FRACTION`] of its
//! coordinates sit below its tolerance. Inputs are sampled away from the
//! non-differentiable kinks (relu at 0, the sqrt clamp, the unit clamp).

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attack::{aggregate_loss, target_embeddings, AttackConfig, HardState};
use crate::model::{
    arcface_loss, forward_segment, trace_backbone, trace_head, BackboneParams, BackboneSpec,
    HeadParams, LinearLayer, MarginSpec,
};
use crate::rng::{derive, Stream};
use crate::tensor::{Tape, Tensor};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for deep compositions (training loss, aggregated attack loss).
pub const COMPOSED_TOL: f64 = 1e-4;
/// Fraction of sampled coordinates that must sit inside tolerance.
pub const REQUIRED_FRACTION: f64 = 0.99;
/// Relative finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub coords: usize,
    pub worst_rel_err: f64,
    pub fraction_ok: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Central finite difference of a scalar function, one coordinate at a time,
/// with step `h_rel · max(1, |x_i|)`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h_rel: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let scale = if libm::fabs(x0[i]) > 1.0 {
            libm::fabs(x0[i])
        } else {
            1.0
        };
        let h = h_rel * scale;
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with a small floor so coordinates where both sides vanish
/// below finite-difference resolution count as matches.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric));
    if denom < 1e-8 {
        0.0
    } else {
        libm::fabs(analytic - numeric) / denom
    }
}

/// Compare an analytic gradient against a numeric one.
pub fn assess(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> OpCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    let mut ok = 0usize;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let e = relative_error(a, n);
        if e > worst {
            worst = e;
        }
        if e < tolerance {
            ok += 1;
        }
    }
    let coords = analytic.len();
    let fraction_ok = if coords == 0 {
        1.0
    } else {
        ok as f64 / coords as f64
    };
    OpCheck {
        name: String::from(name),
        coords,
        worst_rel_err: worst,
        fraction_ok,
        tolerance,
        pass: fraction_ok >= REQUIRED_FRACTION,
    }
}

/// Check one scalar-valued computation: `runner(flat, true)` must return the
/// analytic gradient alongside the value; `runner(flat, false)` only needs
/// the value.
pub fn fd_check(
    name: &str,
    x0: &[f64],
    tolerance: f64,
    runner: &mut dyn FnMut(&[f64], bool) -> (f64, Option<Vec<f64>>),
) -> OpCheck {
    let analytic = runner(x0, true).1.expect("runner must produce gradients");
    let mut eval = |d: &[f64]| runner(d, false).0;
    let numeric = central_difference(&mut eval, x0, FD_STEP);
    assess(name, &analytic, &numeric, tolerance)
}

fn signed_vec(stream: &mut Stream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = stream.uniform(lo, hi);
            if stream.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn probe_matrix(stream: &mut Stream, rows: usize, cols: usize) -> Tensor {
    Tensor::from_arc(
        vec![rows, cols],
        Arc::new(signed_vec(stream, rows * cols, 0.5, 1.5)),
        None,
    )
}

/// Probe-weighted check of a single-input op producing a matrix.
fn check_matrix_op(
    name: &str,
    stream: &mut Stream,
    rows: usize,
    cols: usize,
    x0: Vec<f64>,
    apply: &dyn Fn(&mut Tape, &Tensor) -> Tensor,
) -> OpCheck {
    let probe = probe_matrix(stream, rows, cols);
    let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::matrix(rows, cols, data.to_vec()).unwrap());
        let y = apply(&mut tape, &x);
        let weighted = tape.hadamard(&y, &probe).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let value = loss.scalar_value().unwrap();
        let grad = want.then(|| {
            tape.backward(&loss, &[x.node().unwrap()])
                .unwrap()
                .grad(x.node().unwrap())
                .unwrap()
                .data()
                .to_vec()
        });
        (value, grad)
    };
    fd_check(name, &x0.clone(), PRIMITIVE_TOL, &mut runner)
}

/// Probe-weighted check of a two-input op; the flat vector is the
/// concatenation of both operands and gradients cover both.
#[allow(clippy::too_many_arguments)]
fn check_binary_op(
    name: &str,
    stream: &mut Stream,
    rows: usize,
    cols: usize,
    a0: Vec<f64>,
    b0: Vec<f64>,
    b_shape: Vec<usize>,
    out_shape: (usize, usize),
    apply: &dyn Fn(&mut Tape, &Tensor, &Tensor) -> Tensor,
) -> OpCheck {
    let probe = probe_matrix(stream, out_shape.0, out_shape.1);
    let split = a0.len();
    let mut flat = a0;
    flat.extend_from_slice(&b0);
    let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::matrix(rows, cols, data[..split].to_vec()).unwrap());
        let b = tape.var(&Tensor::new(b_shape.clone(), data[split..].to_vec()).unwrap());
        let y = apply(&mut tape, &a, &b);
        let weighted = tape.hadamard(&y, &probe).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let value = loss.scalar_value().unwrap();
        let grad = want.then(|| {
            let grads = tape
                .backward(&loss, &[a.node().unwrap(), b.node().unwrap()])
                .unwrap();
            let mut g = grads.grad(a.node().unwrap()).unwrap().data().to_vec();
            g.extend_from_slice(grads.grad(b.node().unwrap()).unwrap().data());
            g
        });
        (value, grad)
    };
    fd_check(name, &flat.clone(), PRIMITIVE_TOL, &mut runner)
}

/// Finite-difference checks for every primitive, in a fixed order.
pub fn check_primitives(seed: u64) -> Vec<OpCheck> {
    let mut s = Stream::new(derive(seed, b"gradcheck-primitives"));
    let mut checks = Vec::new();

    let a34 = signed_vec(&mut s, 12, 0.2, 1.5);
    let b42 = signed_vec(&mut s, 8, 0.2, 1.5);
    checks.push(check_binary_op(
        "matmul",
        &mut s,
        3,
        4,
        a34,
        b42,
        vec![4, 2],
        (3, 2),
        &|tape, a, b| tape.matmul(a, b).unwrap(),
    ));

    let x0 = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push({
        let probe = probe_matrix(&mut s, 4, 3);
        let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.var(&Tensor::matrix(3, 4, data.to_vec()).unwrap());
            let t = tape.transpose(&x).unwrap();
            let weighted = tape.hadamard(&t, &probe).unwrap();
            let loss = tape.sum(&weighted).unwrap();
            let value = loss.scalar_value().unwrap();
            let grad = want.then(|| {
                tape.backward(&loss, &[x.node().unwrap()])
                    .unwrap()
                    .grad(x.node().unwrap())
                    .unwrap()
                    .data()
                    .to_vec()
            });
            (value, grad)
        };
        fd_check("transpose", &x0, PRIMITIVE_TOL, &mut runner)
    });

    let a = signed_vec(&mut s, 12, 0.2, 1.5);
    let b = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push(check_binary_op(
        "add",
        &mut s,
        3,
        4,
        a,
        b,
        vec![3, 4],
        (3, 4),
        &|tape, a, b| tape.add(a, b).unwrap(),
    ));

    let a = signed_vec(&mut s, 12, 0.2, 1.5);
    let b = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push(check_binary_op(
        "sub",
        &mut s,
        3,
        4,
        a,
        b,
        vec![3, 4],
        (3, 4),
        &|tape, a, b| tape.sub(a, b).unwrap(),
    ));

    let a = signed_vec(&mut s, 12, 0.2, 1.5);
    let b = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push(check_binary_op(
        "hadamard",
        &mut s,
        3,
        4,
        a,
        b,
        vec![3, 4],
        (3, 4),
        &|tape, a, b| tape.hadamard(a, b).unwrap(),
    ));

    let x0 = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push(check_matrix_op("scale", &mut s, 3, 4, x0, &|tape, x| {
        tape.scale(x, -1.7).unwrap()
    }));

    let x0 = signed_vec(&mut s, 12, 0.1, 1.5);
    checks.push(check_matrix_op("relu", &mut s, 3, 4, x0, &|tape, x| {
        tape.relu(x).unwrap()
    }));

    // Mix of clearly positive and clearly negative inputs; the clamp's zero
    // branch must also produce zero gradients.
    let mut x0 = Vec::new();
    x0.extend((0..6).map(|_| s.uniform(0.2, 2.0)));
    x0.extend((0..6).map(|_| -s.uniform(0.2, 2.0)));
    checks.push(check_matrix_op("sqrt-clamped", &mut s, 3, 4, x0, &|tape, x| {
        tape.sqrt_clamped(x).unwrap()
    }));

    let x0 = signed_vec(&mut s, 12, 0.2, 1.5);
    checks.push(check_matrix_op("square", &mut s, 3, 4, x0, &|tape, x| {
        tape.square(x).unwrap()
    }));

    // Inside and outside the unit interval, away from the corners at ±1.
    let mut x0 = Vec::new();
    x0.extend(signed_vec(&mut s, 6, 0.0, 0.9));
    x0.extend(signed_vec(&mut s, 6, 1.1, 2.0));
    checks.push(check_matrix_op("clamp-unit", &mut s, 3, 4, x0, &|tape, x| {
        tape.clamp_unit(x).unwrap()
    }));

    let a = signed_vec(&mut s, 12, 0.2, 1.5);
    let b = signed_vec(&mut s, 4, 0.2, 1.5);
    checks.push(check_binary_op(
        "add-row-bias",
        &mut s,
        3,
        4,
        a,
        b,
        vec![4],
        (3, 4),
        &|tape, a, b| tape.add_row_bias(a, b).unwrap(),
    ));

    let x0 = signed_vec(&mut s, 10, 0.3, 1.5);
    checks.push(check_matrix_op("l2-normalize-rows", &mut s, 2, 5, x0, &|tape, x| {
        tape.l2_normalize_rows(x).unwrap()
    }));

    // Cross-entropy is already scalar; no probe needed.
    {
        let x0 = signed_vec(&mut s, 20, 0.1, 2.0);
        let labels = [0usize, 3, 1, 4];
        let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let q = tape.var(&Tensor::matrix(4, 5, data.to_vec()).unwrap());
            let loss = tape.softmax_cross_entropy(&q, &labels).unwrap();
            let value = loss.scalar_value().unwrap();
            let grad = want.then(|| {
                tape.backward(&loss, &[q.node().unwrap()])
                    .unwrap()
                    .grad(q.node().unwrap())
                    .unwrap()
                    .data()
                    .to_vec()
            });
            (value, grad)
        };
        checks.push(fd_check("softmax-cross-entropy", &x0, PRIMITIVE_TOL, &mut runner));
    }

    {
        let x0 = signed_vec(&mut s, 9, 0.2, 1.5);
        let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.var(&Tensor::matrix(3, 3, data.to_vec()).unwrap());
            let loss = tape.sum(&x).unwrap();
            let value = loss.scalar_value().unwrap();
            let grad = want.then(|| {
                tape.backward(&loss, &[x.node().unwrap()])
                    .unwrap()
                    .grad(x.node().unwrap())
                    .unwrap()
                    .data()
                    .to_vec()
            });
            (value, grad)
        };
        checks.push(fd_check("sum", &x0, PRIMITIVE_TOL, &mut runner));
    }

    checks
}

fn tiny_spec() -> BackboneSpec {
    BackboneSpec::new(6, vec![5, 4], 3).unwrap()
}

fn params_from_flat(spec: &BackboneSpec, flat: &[f64]) -> (BackboneParams, HeadParams, usize) {
    let mut offset = 0;
    let mut layers = Vec::new();
    for layer in 1..=spec.layer_count() {
        let (fi, fo) = spec.layer_dims(layer);
        let weight = Tensor::matrix(fi, fo, flat[offset..offset + fi * fo].to_vec()).unwrap();
        offset += fi * fo;
        let bias = Tensor::vector(flat[offset..offset + fo].to_vec()).unwrap();
        offset += fo;
        layers.push(LinearLayer { weight, bias });
    }
    let classes = 4;
    let head = HeadParams {
        weight: Tensor::matrix(classes, spec.embedding_dim, flat[offset..offset + classes * spec.embedding_dim].to_vec())
            .unwrap(),
    };
    offset += classes * spec.embedding_dim;
    (BackboneParams { layers }, head, offset)
}

/// Composed check: the full margin training loss, differentiated w.r.t. the
/// input pixels, every backbone parameter, and the head weight.
pub fn check_arcface(seed: u64) -> OpCheck {
    let spec = tiny_spec();
    let margin = MarginSpec::default();
    let mut s = Stream::new(derive(seed, b"gradcheck-arcface"));
    let batch = 3;
    let labels = [0usize, 2, 3];

    let x0: Vec<f64> = (0..batch * spec.input_dim).map(|_| s.uniform(20.0, 235.0)).collect();
    let mut param_flat = Vec::new();
    for layer in 1..=spec.layer_count() {
        let (fi, fo) = spec.layer_dims(layer);
        param_flat.extend(signed_vec(&mut s, fi * fo, 0.05, 0.6));
        param_flat.extend(signed_vec(&mut s, fo, 0.01, 0.2));
    }
    param_flat.extend(signed_vec(&mut s, 4 * spec.embedding_dim, 0.1, 0.8));

    let mut flat = x0.clone();
    flat.extend_from_slice(&param_flat);
    let x_len = x0.len();

    let mut runner = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let (params, head, _) = params_from_flat(&spec, &data[x_len..]);
        let mut tape = Tape::new();
        let traced = trace_backbone(&mut tape, &spec, &params, true).unwrap();
        let traced_head = trace_head(&mut tape, &head, true).unwrap();
        let x = tape.var(&Tensor::matrix(batch, spec.input_dim, data[..x_len].to_vec()).unwrap());
        let loss = arcface_loss(&mut tape, &traced, &traced_head, &x, &labels, &margin).unwrap();
        let value = loss.scalar_value().unwrap();
        let grad = want.then(|| {
            let mut ids = vec![x.node().unwrap()];
            for layer in &traced.layers {
                ids.push(layer.weight.node().unwrap());
                ids.push(layer.bias.node().unwrap());
            }
            ids.push(traced_head.weight.node().unwrap());
            let grads = tape.backward(&loss, &ids).unwrap();
            let mut g = Vec::new();
            for id in ids {
                g.extend_from_slice(grads.grad(id).unwrap().data());
            }
            g
        });
        (value, grad)
    };
    fd_check("arcface-loss", &flat, COMPOSED_TOL, &mut runner)
}

struct AggregateFixture {
    spec: BackboneSpec,
    models: Vec<BackboneParams>,
    x0: Vec<f64>,
    targets: Vec<Tensor>,
    buffers: Vec<Vec<Tensor>>,
    config: AttackConfig,
}

fn aggregate_fixture(seed: u64) -> AggregateFixture {
    let spec = BackboneSpec::new(5, vec![4, 4], 3).unwrap();
    let mut s = Stream::new(derive(seed, b"gradcheck-aggregate"));
    let models = vec![
        BackboneParams::init(&spec, s.next_u64()),
        BackboneParams::init(&spec, s.next_u64()),
    ];
    let x0: Vec<f64> = (0..spec.input_dim).map(|_| s.uniform(30.0, 225.0)).collect();
    let x_t = Tensor::row((0..spec.input_dim).map(|_| s.uniform(30.0, 225.0)).collect()).unwrap();
    let targets = target_embeddings(&spec, &models, &x_t).unwrap();
    // Previous-iteration sign buffers: random ±1, as the attack would hold.
    let buffers: Vec<Vec<Tensor>> = (0..models.len())
        .map(|_| {
            spec.hook_layers
                .iter()
                .map(|&h| {
                    let w = spec.layer_dims(h).1;
                    let data: Vec<f64> =
                        (0..w).map(|_| if s.next_f64() < 0.5 { -1.0 } else { 1.0 }).collect();
                    Tensor::matrix(1, w, data).unwrap()
                })
                .collect()
        })
        .collect();
    let config = AttackConfig {
        eta: 5e-3,
        ..AttackConfig::default()
    };
    AggregateFixture {
        spec,
        models,
        x0,
        targets,
        buffers,
        config,
    }
}

/// Aggregated hard-model loss with an optional probe offset added to one
/// hook's post-perturbation feature map. Assembled from `forward_segment`
/// directly, independently of the attack-side wiring.
fn aggregate_value_with_probe(fx: &AggregateFixture, x_data: &[f64], probe: Option<(usize, usize, &[f64])>) -> f64 {
    let z = fx.spec.layer_count();
    let hooks = fx.config.effective_hooks(&fx.spec);
    let mut total = 0.0;
    for (i, params) in fx.models.iter().enumerate() {
        let mut tape = Tape::new();
        let traced = trace_backbone(&mut tape, &fx.spec, params, false).unwrap();
        let mut cur = tape.constant(&Tensor::matrix(1, fx.spec.input_dim, x_data.to_vec()).unwrap());
        let mut start = 1;
        for (j, &h) in hooks.iter().enumerate() {
            cur = forward_segment(&mut tape, &traced, start, h, &cur).unwrap();
            let shift: Vec<f64> = fx.buffers[i][j]
                .data()
                .iter()
                .map(|s| fx.config.eta * s)
                .collect();
            let shift = tape.constant(&Tensor::matrix(1, shift.len(), shift).unwrap());
            cur = tape.add(&cur, &shift).unwrap();
            if let Some((pi, pj, offset)) = probe {
                if pi == i && pj == j {
                    let p = tape.constant(&Tensor::matrix(1, offset.len(), offset.to_vec()).unwrap());
                    cur = tape.add(&cur, &p).unwrap();
                }
            }
            start = h + 1;
        }
        let emb = forward_segment(&mut tape, &traced, start, z, &cur).unwrap();
        let unit = tape.l2_normalize_rows(&emb).unwrap();
        let tgt = tape.constant(&fx.targets[i]);
        let diff = tape.sub(&unit, &tgt).unwrap();
        let sq = tape.square(&diff).unwrap();
        total += tape.sum(&sq).unwrap().scalar_value().unwrap();
    }
    total / fx.models.len() as f64
}

fn aggregate_analytic(fx: &AggregateFixture) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let mut tape = Tape::new();
    let x = tape.var(&Tensor::matrix(1, fx.spec.input_dim, fx.x0.clone()).unwrap());
    let mut state = HardState::empty();
    state.prime(fx.buffers.clone());
    let (loss, hook_nodes) = aggregate_loss(
        &mut tape,
        &fx.spec,
        &fx.models,
        &x,
        &fx.targets,
        &state,
        &fx.config,
    )
    .unwrap();
    let mut ids = vec![x.node().unwrap()];
    for mh in &hook_nodes {
        for h in mh {
            ids.push(h.node().unwrap());
        }
    }
    let grads = tape.backward(&loss, &ids).unwrap();
    let gx = grads.grad(x.node().unwrap()).unwrap().data().to_vec();
    let mut hook_grads = Vec::new();
    for mh in &hook_nodes {
        let mut per_model = Vec::new();
        for h in mh {
            per_model.push(grads.grad(h.node().unwrap()).unwrap().data().to_vec());
        }
        hook_grads.push(per_model);
    }
    (gx, hook_grads)
}

/// Composed check: aggregated loss gradient at the input pixels, with the
/// beneficial-perturbation path active.
pub fn check_aggregate_input(seed: u64) -> OpCheck {
    let fx = aggregate_fixture(seed);
    let (analytic, _) = aggregate_analytic(&fx);
    let mut eval = |d: &[f64]| aggregate_value_with_probe(&fx, d, None);
    let numeric = central_difference(&mut eval, &fx.x0, FD_STEP);
    assess("aggregate-loss-input", &analytic, &numeric, COMPOSED_TOL)
}

/// Composed check: aggregated loss gradients at every hook node, verified by
/// perturb-and-replay around the post-perturbation feature maps.
pub fn check_aggregate_hooks(seed: u64) -> OpCheck {
    let fx = aggregate_fixture(seed);
    let (_, hook_grads) = aggregate_analytic(&fx);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, per_model) in hook_grads.iter().enumerate() {
        for (j, grad) in per_model.iter().enumerate() {
            analytic.extend_from_slice(grad);
            let width = grad.len();
            let mut probe = vec![0.0; width];
            let mut eval = |p: &[f64]| aggregate_value_with_probe(&fx, &fx.x0, Some((i, j, p)));
            numeric.extend(central_difference(&mut eval, &probe.clone(), FD_STEP));
            probe.clear();
        }
    }
    assess("aggregate-loss-hooks", &analytic, &numeric, COMPOSED_TOL)
}

/// Every check in the canonical order.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
    pub pass: bool,
}

pub fn run_full_suite(seed: u64) -> SuiteReport {
    let mut checks = check_primitives(seed);
    checks.push(check_arcface(seed));
    checks.push(check_aggregate_input(seed));
    checks.push(check_aggregate_hooks(seed));
    let pass = checks.iter().all(|c| c.pass);
    SuiteReport { checks, pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_tiny_values() {
        assert_eq!(relative_error(1e-12, -1e-12), 0.0);
        assert!(relative_error(1.0, 1.5) > 0.3);
    }

    #[test]
    fn assess_flags_corrupted_gradients() {
        let analytic = [1.0, 2.0, 3.0, 4.0];
        let mut corrupted = analytic;
        corrupted[1] *= 1.5;
        let check = assess("negative-control", &corrupted, &analytic, PRIMITIVE_TOL);
        assert!(!check.pass);
        assert!(check.worst_rel_err > 0.1);
    }
}
