//! Finite-difference verification of every tape op at f64.

use super::*;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        crate::scalar::Scalar::standard_normal(rng)
    })
}

/// Builds a graph over leaves, projects the output onto fixed random
/// coefficients to get a scalar, and compares backward gradients against
/// central finite differences on every input element.
fn fd_check(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    tol: f64,
) {
    let mut rng = ChaCha12Rng::seed_from_u64(7);

    // probe output shape to fix projection coefficients
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let coeffs = if out_shape.is_empty() {
        None
    } else {
        Some(randn(&mut rng, &out_shape))
    };

    let loss_of = |ins: &[ArrayD<f64>]| -> (f64, Vec<ArrayD<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = match &coeffs {
            None => out,
            Some(c) => project_scalar(&mut tape, out, c),
        };
        let grads = tape.backward(loss);
        let gs = vars
            .iter()
            .zip(ins.iter())
            .map(|(v, x)| grads.get_or_zeros(*v, x.shape()))
            .collect();
        (tape.scalar(loss), gs)
    };

    let (_, grads) = loss_of(inputs);

    let h = 1e-5;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[i] += h;
            let (lp, _) = loss_of(&plus);
            let mut minus = inputs.to_vec();
            minus[k].as_slice_mut().unwrap()[i] -= h;
            let (lm, _) = loss_of(&minus);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[k].as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            assert!(
                rel <= tol,
                "input {k} elem {i}: analytic {an:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
            );
        }
    }
}

/// sum(out .* c) as a scalar node, built from existing ops:
/// mse(out, -c) * n/4 - mse(out, c) * n/4 = sum(out .* c).
fn project_scalar(tape: &mut Tape<f64>, out: Var, c: &ArrayD<f64>) -> Var {
    let n = c.len() as f64;
    let neg_c = tape.constant(c.mapv(|v| -v));
    let pos_c = tape.constant(c.clone());
    let a = tape.mse(out, neg_c);
    let b = tape.mse(out, pos_c);
    let d = tape.sub(a, b);
    tape.scale(d, n / 4.0)
}

#[test]
fn fd_add_sub_scale() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[2, 3, 3]);
    let b = randn(&mut rng, &[2, 3, 3]);
    fd_check(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[0]);
        t.scale(d, 1.7)
    }, 1e-6);
}

#[test]
fn fd_silu_tanh() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[3, 4]);
    fd_check(&[a.clone()], |t, v| t.silu(v[0]), 1e-6);
    fd_check(&[a], |t, v| t.tanh(v[0]), 1e-6);
}

#[test]
fn fd_clamp_interior_and_saturated() {
    // values away from the clamp knees so central differences are valid
    let a = ArrayD::from_shape_vec(IxDyn(&[5]), vec![-2.0, -0.5, 0.1, 0.9, 3.0]).unwrap();
    fd_check(&[a], |t, v| t.clamp(v[0], -1.5, 1.5), 1e-6);
}

#[test]
fn fd_linear() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[5]);
    let w = randn(&mut rng, &[4, 5]);
    let b = randn(&mut rng, &[4]);
    fd_check(&[x, w, b], |t, v| t.linear(v[0], v[1], v[2]), 1e-6);
}

#[test]
fn fd_conv2d_stride1() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    fd_check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1), 1e-5);
}

#[test]
fn fd_conv2d_stride2() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 6, 6]);
    let w = randn(&mut rng, &[4, 2, 3, 3]);
    let b = randn(&mut rng, &[4]);
    fd_check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1), 1e-5);
}

#[test]
fn fd_conv2d_1x1() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[3, 4, 4]);
    let w = randn(&mut rng, &[2, 3, 1, 1]);
    let b = randn(&mut rng, &[2]);
    fd_check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0), 1e-5);
}

#[test]
fn fd_group_norm() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[4, 3, 3]);
    let gamma = randn(&mut rng, &[4]);
    let beta = randn(&mut rng, &[4]);
    fd_check(&[x, gamma, beta], |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5), 1e-5);
}

#[test]
fn fd_film() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[3, 2, 2]);
    let sc = randn(&mut rng, &[3]);
    let sh = randn(&mut rng, &[3]);
    fd_check(&[x, sc, sh], |t, v| t.film(v[0], v[1], v[2]), 1e-6);
}

#[test]
fn fd_upsample_and_pool() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 3, 3]);
    fd_check(&[x.clone()], |t, v| t.upsample_nearest2(v[0]), 1e-6);
    fd_check(&[x], |t, v| t.global_avg_pool(v[0]), 1e-6);
}

#[test]
fn fd_concat_broadcast_shift_slice() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let a = randn(&mut rng, &[2, 3, 3]);
    let b = randn(&mut rng, &[1, 3, 3]);
    fd_check(&[a.clone(), b], |t, v| t.concat_c(v[0], v[1]), 1e-6);

    let vvec = randn(&mut rng, &[3]);
    fd_check(&[vvec], |t, v| t.broadcast_chw(v[0], 2, 2), 1e-6);

    fd_check(&[a], |t, v| t.shift2d(v[0], 1, -2), 1e-6);

    let long = randn(&mut rng, &[8]);
    fd_check(&[long], |t, v| t.slice_vec(v[0], 2, 4), 1e-6);
}

#[test]
fn fd_rows_sum() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let table = randn(&mut rng, &[5, 4]);
    fd_check(&[table], |t, v| t.rows_sum(v[0], &[0, 2, 4]), 1e-6);
}

#[test]
fn fd_losses() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let a = randn(&mut rng, &[3, 3]);
    let b = randn(&mut rng, &[3, 3]);
    fd_check(&[a, b], |t, v| t.mse(v[0], v[1]), 1e-6);

    let logits = randn(&mut rng, &[6]);
    let targets = Array1::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    fd_check(&[logits.clone()], |t, v| t.bce_logits(v[0], &targets), 1e-6);

    fd_check(&[logits], |t, v| t.ce_logits(v[0], 2), 1e-6);
}

#[test]
fn fd_composite_graph_with_shared_subexpression() {
    // one value feeding two consumers must receive summed gradients
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[2, 4, 4]);
    let w = randn(&mut rng, &[2, 2, 3, 3]);
    let b = randn(&mut rng, &[2]);
    fd_check(&[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1);
        let s = t.silu(y);
        let z = t.add(s, y); // y used twice
        let tgt = t.constant(ArrayD::zeros(IxDyn(&[2, 4, 4])));
        t.mse(z, tgt)
    }, 1e-5);
}

#[test]
fn detach_blocks_gradient() {
    let mut rng = ChaCha12Rng::seed_from_u64(14);
    let xv = randn(&mut rng, &[4]);

    // detach preserves the forward value
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone(), true);
    let d = tape.detach(x);
    assert_eq!(tape.value(x), tape.value(d));

    // but no gradient flows into a purely detached path
    let t2 = tape.constant(ArrayD::zeros(IxDyn(&[4])));
    let loss = tape.mse(d, t2);
    let grads = tape.backward(loss);
    assert!(grads.get(x).is_none(), "gradient leaked through detach");

    // while the undetached path still receives one
    let mut tape2 = Tape::<f64>::new();
    let x2 = tape2.leaf(xv, true);
    let t3 = tape2.constant(ArrayD::zeros(IxDyn(&[4])));
    let loss2 = tape2.mse(x2, t3);
    let grads2 = tape2.backward(loss2);
    assert!(grads2.get(x2).is_some());
}

#[test]
fn non_trainable_leaf_gets_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.0), false);
    let b = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0), true);
    let s = tape.add(a, b);
    let tgt = tape.constant(ArrayD::zeros(IxDyn(&[3])));
    let loss = tape.mse(s, tgt);
    let grads = tape.backward(loss);
    assert!(grads.get(a).is_none());
    assert!(grads.get(b).is_some());
}

#[test]
fn im2col_col2im_roundtrip_shapes() {
    let mut rng = ChaCha12Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[3, 8, 8]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let cols = im2col(&x, 3, 3, stride, pad);
        let oh = (8 + 2 * pad - 3) / stride + 1;
        assert_eq!(cols.shape(), &[27, oh * oh]);
        let back = col2im(&cols, &[3, 8, 8], 3, 3, stride, pad);
        assert_eq!(back.shape(), &[3, 8, 8]);
    }
}
