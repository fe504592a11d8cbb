//! Finite-difference oracles for the differentiable primitives and for
//! gradients taken at intermediate nodes.

use dpa_core::gradcheck::{
    assess, central_difference, check_aggregate_hooks, check_aggregate_input, check_arcface,
    check_primitives, relative_error, run_full_suite, COMPOSED_TOL, FD_STEP, PRIMITIVE_TOL,
};
use dpa_core::model::{forward_segment, trace_backbone, BackboneParams, BackboneSpec};
use dpa_core::rng::Stream;
use dpa_core::tensor::{sign, Tape, Tensor};

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

#[test]
fn matmul_backward_matches_finite_differences_tightly() {
    let mut s = Stream::new(101);
    let a0 = signed_vec(&mut s, 12, 0.2, 1.5);
    let b0 = signed_vec(&mut s, 8, 0.2, 1.5);
    let probe = Tensor::matrix(3, 2, signed_vec(&mut s, 6, 0.5, 1.5)).unwrap();
    let mut flat = a0.clone();
    flat.extend_from_slice(&b0);

    let run = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let a = tape.var(&Tensor::matrix(3, 4, data[..12].to_vec()).unwrap());
        let b = tape.var(&Tensor::matrix(4, 2, data[12..].to_vec()).unwrap());
        let prod = tape.matmul(&a, &b).unwrap();
        let weighted = tape.hadamard(&prod, &probe).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let grad = want.then(|| {
            let grads = tape
                .backward(&loss, &[a.node().unwrap(), b.node().unwrap()])
                .unwrap();
            let mut g = grads.grad(a.node().unwrap()).unwrap().data().to_vec();
            g.extend_from_slice(grads.grad(b.node().unwrap()).unwrap().data());
            g
        });
        (loss.scalar_value().unwrap(), grad)
    };

    let analytic = run(&flat, true).1.unwrap();
    let mut eval = |d: &[f64]| run(d, false).0;
    let numeric = central_difference(&mut eval, &flat, FD_STEP);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-6, "analytic {a} vs numeric {n}");
    }
}

#[test]
fn relu_backward_matches_finite_differences() {
    let mut s = Stream::new(103);
    let x0 = signed_vec(&mut s, 12, 0.1, 1.5);
    let probe = Tensor::matrix(3, 4, signed_vec(&mut s, 12, 0.5, 1.5)).unwrap();
    let run = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::matrix(3, 4, data.to_vec()).unwrap());
        let y = tape.relu(&x).unwrap();
        let weighted = tape.hadamard(&y, &probe).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let grad = want.then(|| {
            tape.backward(&loss, &[x.node().unwrap()])
                .unwrap()
                .grad(x.node().unwrap())
                .unwrap()
                .data()
                .to_vec()
        });
        (loss.scalar_value().unwrap(), grad)
    };
    let analytic = run(&x0, true).1.unwrap();
    let mut eval = |d: &[f64]| run(d, false).0;
    let numeric = central_difference(&mut eval, &x0, FD_STEP);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-6);
    }
}

#[test]
fn row_normalization_backward_matches_finite_differences() {
    let mut s = Stream::new(107);
    let x0 = signed_vec(&mut s, 10, 0.3, 1.5);
    let probe = Tensor::matrix(2, 5, signed_vec(&mut s, 10, 0.5, 1.5)).unwrap();
    let run = |data: &[f64], want: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let x = tape.var(&Tensor::matrix(2, 5, data.to_vec()).unwrap());
        let y = tape.l2_normalize_rows(&x).unwrap();
        let weighted = tape.hadamard(&y, &probe).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let grad = want.then(|| {
            tape.backward(&loss, &[x.node().unwrap()])
                .unwrap()
                .grad(x.node().unwrap())
                .unwrap()
                .data()
                .to_vec()
        });
        (loss.scalar_value().unwrap(), grad)
    };
    let analytic = run(&x0, true).1.unwrap();
    let mut eval = |d: &[f64]| run(d, false).0;
    let numeric = central_difference(&mut eval, &x0, FD_STEP);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) < 1e-6);
    }
}

/// Gradient at a hidden feature map of a two-layer network, checked by
/// perturb-and-replay: shift the hidden value by ±h and rerun the tail.
#[test]
fn intermediate_node_gradient_matches_replay() {
    let spec = BackboneSpec::new(6, vec![5], 3).unwrap();
    let mut params = BackboneParams::init(&spec, 11);
    for layer in &mut params.layers {
        let w = layer.bias.numel();
        layer.bias = Tensor::vector(vec![0.05; w]).unwrap();
    }
    let mut s = Stream::new(113);
    let x = Tensor::row(s.uniform_vec(6, 10.0, 245.0)).unwrap();
    let probe = Tensor::matrix(1, 3, signed_vec(&mut s, 3, 0.5, 1.5)).unwrap();

    // Analytic gradient at the hidden node.
    let mut tape = Tape::new();
    let traced = trace_backbone(&mut tape, &spec, &params, false).unwrap();
    let xn = tape.var(&x);
    let hidden = forward_segment(&mut tape, &traced, 1, 1, &xn).unwrap();
    let emb = forward_segment(&mut tape, &traced, 2, 2, &hidden).unwrap();
    let weighted = tape.hadamard(&emb, &probe).unwrap();
    let loss = tape.sum(&weighted).unwrap();
    let grads = tape.backward(&loss, &[hidden.node().unwrap()]).unwrap();
    let analytic = grads.grad(hidden.node().unwrap()).unwrap().data().to_vec();

    // Replay: perturb the hidden value, rerun only the tail.
    let hidden_value = hidden.detached();
    let mut eval = |delta: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let traced = trace_backbone(&mut tape, &spec, &params, false).unwrap();
        let shifted: Vec<f64> = hidden_value
            .data()
            .iter()
            .zip(delta)
            .map(|(v, d)| v + d)
            .collect();
        let h = tape.constant(&Tensor::matrix(1, 5, shifted).unwrap());
        let emb = forward_segment(&mut tape, &traced, 2, 2, &h).unwrap();
        let weighted = tape.hadamard(&emb, &probe).unwrap();
        tape.sum(&weighted).unwrap().scalar_value().unwrap()
    };
    let zero = vec![0.0; 5];
    let numeric = central_difference(&mut eval, &zero, FD_STEP);
    let check = assess("intermediate-node", &analytic, &numeric, 1e-5);
    assert!(check.pass, "worst {}", check.worst_rel_err);
}

/// The gradients of ‖v‖² and ‖v‖ point the same way for nonzero v.
#[test]
fn squared_and_plain_norm_gradients_share_signs() {
    let mut s = Stream::new(127);
    for _ in 0..20 {
        let v0 = Tensor::vector(signed_vec(&mut s, 6, 0.05, 2.0)).unwrap();
        let grad_of = |plain: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let v = tape.var(&v0);
            let sq = tape.square(&v).unwrap();
            let mut loss = tape.sum(&sq).unwrap();
            if plain {
                loss = tape.sqrt_clamped(&loss).unwrap();
            }
            tape.backward(&loss, &[v.node().unwrap()])
                .unwrap()
                .grad(v.node().unwrap())
                .unwrap()
                .data()
                .to_vec()
        };
        let gs = Tensor::vector(grad_of(false)).unwrap();
        let gp = Tensor::vector(grad_of(true)).unwrap();
        assert!(sign(&gs).bitwise_eq(&sign(&gp)));
    }
}

#[test]
fn primitive_suite_is_within_tolerance() {
    for check in check_primitives(2024) {
        assert!(
            check.pass,
            "{} failed: worst {} fraction {}",
            check.name, check.worst_rel_err, check.fraction_ok
        );
        assert!(check.coords > 0);
    }
}

#[test]
fn composed_losses_are_within_tolerance() {
    let arc = check_arcface(2024);
    assert!(arc.pass, "arcface worst {}", arc.worst_rel_err);
    assert!(arc.tolerance == COMPOSED_TOL);

    let agg_in = check_aggregate_input(2024);
    assert!(agg_in.pass, "aggregate input worst {}", agg_in.worst_rel_err);

    let agg_hooks = check_aggregate_hooks(2024);
    assert!(agg_hooks.pass, "aggregate hooks worst {}", agg_hooks.worst_rel_err);
}

#[test]
fn full_suite_passes_and_negative_control_fails() {
    let report = run_full_suite(7);
    assert!(report.pass);
    assert!(report.checks.len() >= 14);

    // Negative control: a corrupted gradient must be caught.
    let analytic = [0.4, -1.2, 3.3, 0.9];
    let mut corrupted = analytic;
    corrupted[2] *= 1.01; // 1% off is far outside primitive tolerance
    let check = assess("corrupted", &corrupted, &analytic, PRIMITIVE_TOL);
    assert!(!check.pass);
}
