use super::*;
use crate::error::Error;
use ndarray::{Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0f64.max(a.abs()).max(b.abs())
}

/// Central finite differences against tape gradients, step 1e-5.
fn gradcheck(inputs: &[Arr], build: impl Fn(&Tape, &[Tensor]) -> Tensor, tol: f64) {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&tape, &leaves);
    loss.backward().unwrap();
    let grads: Vec<Arr> = leaves.iter().map(|l| l.grad().unwrap()).collect();

    let eval = |inputs: &[Arr]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        build(&tape, &leaves).value()[[0]]
    };
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let tape_g = grads[i].as_slice().unwrap()[flat];
            assert!(
                close(fd, tape_g, tol),
                "input {i} element {flat}: fd {fd} vs tape {tape_g}"
            );
        }
        let _ = input;
    }
}

#[test]
fn relu_values_and_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[-1.0, 2.0]), true);
    let y = x.relu();
    assert_eq!(y.value().as_slice().unwrap(), &[0.0, 2.0]);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[0.0, 1.0]);
}

#[test]
fn exp_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[0.0]), true);
    let y = x.exp();
    assert_eq!(y.value()[[0]], 1.0);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap()[[0]], 1.0);
}

#[test]
fn cos_analytic() {
    let tape = Tape::new();
    let x = tape.constant(arr1(&[0.0, std::f64::consts::FRAC_PI_2]));
    let y = x.cos();
    assert!((y.value()[[0]] - 1.0).abs() < 1e-12);
    assert!(y.value()[[1]].abs() < 1e-12);
}

#[test]
fn div_by_zero_is_inf() {
    let tape = Tape::new();
    let a = tape.constant(arr1(&[1.0, -1.0]));
    let b = tape.constant(arr1(&[0.0, 0.0]));
    let y = a.div(&b).unwrap();
    assert_eq!(y.value()[[0]], f64::INFINITY);
    assert_eq!(y.value()[[1]], f64::NEG_INFINITY);
}

#[test]
fn broadcast_mismatch_errors() {
    let tape = Tape::new();
    let a = tape.constant(arr1(&[1.0, 2.0, 3.0]));
    let b = tape.constant(arr1(&[1.0, 2.0]));
    assert!(matches!(a.add(&b), Err(Error::Broadcast(_))));
}

#[test]
fn broadcast_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_arr(&mut rng, &[3, 1, 4]);
    let b = rand_arr(&mut rng, &[2, 4]);
    let tape = Tape::new();
    let (ta, tb) = (tape.constant(a), tape.constant(b));
    assert_eq!(
        ta.add(&tb).unwrap().value().as_slice().unwrap(),
        tb.add(&ta).unwrap().value().as_slice().unwrap()
    );
    assert_eq!(
        ta.mul(&tb).unwrap().value().as_slice().unwrap(),
        tb.mul(&ta).unwrap().value().as_slice().unwrap()
    );
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let tape = Tape::new();
    let eye = tape.constant(Array2::<f64>::eye(2).into_dyn());
    let v = tape.constant(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![3.0, 4.0]).unwrap());
    assert_eq!(
        eye.matmul(&v).unwrap().value().as_slice().unwrap(),
        &[3.0, 4.0]
    );
    let a = tape.constant(Arr::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Arr::from_shape_vec(IxDyn(&[2, 1]), vec![3.0, 4.0]).unwrap());
    assert_eq!(a.matmul(&b).unwrap().value()[[0, 0]], 11.0);
}

#[test]
fn matmul_dimension_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Arr::zeros(IxDyn(&[2, 3])));
    let b = tape.constant(Arr::zeros(IxDyn(&[4, 2])));
    assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_arr(&mut rng, &[4, 5]);
    let b = rand_arr(&mut rng, &[5, 3]);
    let w = rand_arr(&mut rng, &[4, 3]);
    gradcheck(
        &[a, b],
        |tape, leaves| {
            let weight = tape.constant(w.clone());
            leaves[0]
                .matmul(&leaves[1])
                .unwrap()
                .mul(&weight)
                .unwrap()
                .sum()
        },
        1e-6,
    );
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let x = tape.constant(arr1(&[1.0, 2.0, 3.0]));
    assert_eq!(x.sum().value()[[0]], 6.0);
    let m = tape.constant(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(
        m.mean_axis(0).unwrap().value().as_slice().unwrap(),
        &[2.0, 3.0]
    );
    assert!(matches!(m.sum_axis(5), Err(Error::Shape(_))));
}

#[test]
fn max_gradient_tie_breaks_to_lowest_index() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[2.0, 5.0, 5.0]), true);
    x.max().backward().unwrap();
    assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn square_loss_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[3.0]), true);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap()[[0]], 6.0);
}

#[test]
fn backward_without_grad_enabled_inputs_is_noop() {
    let tape = Tape::new();
    let x = tape.constant(arr1(&[1.0, 2.0]));
    let loss = x.sum();
    loss.backward().unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn backward_twice_errors() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[1.0]), true);
    let loss = x.sum();
    loss.backward().unwrap();
    assert!(matches!(loss.backward(), Err(Error::Tape(_))));
}

#[test]
fn backward_on_non_scalar_errors() {
    let tape = Tape::new();
    let x = tape.leaf(arr1(&[1.0, 2.0]), true);
    assert!(matches!(x.backward(), Err(Error::Shape(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.leaf(rand_arr(&mut rng, &[6, 4]), true);
        let w = tape.leaf(rand_arr(&mut rng, &[4, 4]), true);
        let y = x.matmul(&w).unwrap().sigmoid().mul(&x).unwrap().mean();
        y.backward().unwrap();
        let mut out = x.grad().unwrap().as_slice().unwrap().to_vec();
        out.extend(w.grad().unwrap().as_slice().unwrap());
        out
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn identity_kernel(k: usize, c: usize) -> Arr {
    let mut kernel = Array3::<f64>::zeros((k, c, c));
    for i in 0..c {
        kernel[[k / 2, i, i]] = 1.0;
    }
    kernel.into_dyn()
}

#[test]
fn conv1d_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(n, c) in &[(1usize, 1usize), (4, 3), (9, 5)] {
        let x = rand_arr(&mut rng, &[n, c]);
        let tape = Tape::new();
        let f = tape.constant(x.clone());
        let k = tape.constant(identity_kernel(3, c));
        let s = tape.constant(Arr::ones(IxDyn(&[n, 3])));
        let y = Tensor::conv1d(&f, &k, &s, n).unwrap();
        assert_eq!(y.value().as_slice().unwrap(), x.as_slice().unwrap());
    }
}

#[test]
fn conv1d_cosine_scaled_all_ones() {
    // constant feature 1, single channel, all-ones kernel, interior scale row
    // [cos(pi/4), 1, cos(pi/4)] -> 1 + 2 cos(pi/4)
    let n = 5;
    let tape = Tape::new();
    let f = tape.constant(Arr::ones(IxDyn(&[n, 1])));
    let k = tape.constant(Arr::ones(IxDyn(&[3, 1, 1])));
    let c = std::f64::consts::FRAC_PI_4.cos();
    let mut scale = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        scale[[i, 0]] = c;
        scale[[i, 1]] = 1.0;
        scale[[i, 2]] = c;
    }
    let s = tape.constant(scale.into_dyn());
    let y = Tensor::conv1d(&f, &k, &s, n).unwrap();
    for i in 1..n - 1 {
        assert!((y.value()[[i, 0]] - 2.414213562373095).abs() < 1e-12);
    }
}

#[test]
fn conv1d_even_kernel_rejected() {
    let tape = Tape::new();
    let f = tape.constant(Arr::ones(IxDyn(&[4, 1])));
    let k = tape.constant(Arr::ones(IxDyn(&[2, 1, 1])));
    let s = tape.constant(Arr::ones(IxDyn(&[4, 2])));
    assert!(matches!(
        Tensor::conv1d(&f, &k, &s, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_arr(&mut rng, &[7, 2]);
    let k = rand_arr(&mut rng, &[3, 2, 3]);
    let s = rand_arr(&mut rng, &[7, 3]);
    let w = rand_arr(&mut rng, &[7, 3]);
    gradcheck(
        &[x, k, s],
        |tape, leaves| {
            let weight = tape.constant(w.clone());
            Tensor::conv1d(&leaves[0], &leaves[1], &leaves[2], 7)
                .unwrap()
                .mul(&weight)
                .unwrap()
                .sum()
        },
        1e-6,
    );
}

#[test]
fn conv1d_segmented_matches_per_segment() {
    // Two segments of 4 behave like two independent length-4 convolutions.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_arr(&mut rng, &[8, 2]);
    let k = rand_arr(&mut rng, &[3, 2, 2]);
    let s = rand_arr(&mut rng, &[8, 3]);
    let tape = Tape::new();
    let y = Tensor::conv1d(
        &tape.constant(x.clone()),
        &tape.constant(k.clone()),
        &tape.constant(s.clone()),
        4,
    )
    .unwrap();
    for seg in 0..2 {
        let xs = x
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(seg * 4..seg * 4 + 4))
            .to_owned();
        let ss = s
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(seg * 4..seg * 4 + 4))
            .to_owned();
        let ys = Tensor::conv1d(
            &tape.constant(xs),
            &tape.constant(k.clone()),
            &tape.constant(ss),
            4,
        )
        .unwrap();
        for i in 0..4 {
            for j in 0..2 {
                // Not bitwise: BLAS kernels may reorder the inner-product
                // accumulation differently for different matrix heights.
                let (a, b) = (y.value()[[seg * 4 + i, j]], ys.value()[[i, j]]);
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn batch_norm_matches_explicit_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_arr(&mut rng, &[6, 4]);
    let scale = rand_arr(&mut rng, &[4]);
    let shift = rand_arr(&mut rng, &[4]);
    let eps = 1e-5;

    let tape = Tape::new();
    let (fused, mean, var) = Tensor::batch_norm(
        &tape.constant(x.clone()),
        &tape.constant(scale.clone()),
        &tape.constant(shift.clone()),
        eps,
    )
    .unwrap();

    let xt = tape.constant(x.clone());
    let mu = xt.mean_axis(0).unwrap();
    let centered = xt.sub(&mu).unwrap();
    let v = centered.mul(&centered).unwrap().mean_axis(0).unwrap();
    let chain = centered
        .div(&v.add_scalar(eps).sqrt())
        .unwrap()
        .mul(&tape.constant(scale))
        .unwrap()
        .add(&tape.constant(shift))
        .unwrap();
    for (a, b) in fused.value().iter().zip(chain.value().iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for j in 0..4 {
        assert!((mean[j] - mu.value()[[j]]).abs() < 1e-14);
        assert!((var[j] - v.value()[[j]]).abs() < 1e-14);
    }
}

#[test]
fn batch_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = rand_arr(&mut rng, &[6, 4]);
    let scale = rand_arr(&mut rng, &[4]);
    let shift = rand_arr(&mut rng, &[4]);
    let probe = rand_arr(&mut rng, &[6, 4]);
    gradcheck(
        &[x, scale, shift],
        |tape, t| {
            let (y, _, _) = Tensor::batch_norm(&t[0], &t[1], &t[2], 1e-5).unwrap();
            y.mul(&tape.constant(probe.clone())).unwrap().sum()
        },
        1e-5,
    );
}

#[test]
fn composite_expression_gradient() {
    // Exercises div, softplus, sigmoid, cumsum, concat, narrow, mean/max axis.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = rand_arr(&mut rng, &[5, 3]);
    let b = rand_arr(&mut rng, &[5, 3]).mapv(|v| v.abs() + 1.0);
    gradcheck(
        &[a, b],
        |_, leaves| {
            let q = leaves[0].div(&leaves[1]).unwrap();
            let sp = q.softplus().cumsum_exclusive();
            let sg = q.sigmoid();
            let cat = Tensor::concat(&[&sp, &sg], 1).unwrap();
            let sl = cat.narrow(1, 1, 4).unwrap();
            let m = sl.mean_axis(0).unwrap();
            let mx = sl.max_axis(1).unwrap();
            m.sum().add(&mx.mean()).unwrap()
        },
        1e-4,
    );
}

#[test]
fn elementwise_unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    // keep away from relu kinks and log/sqrt domain edges
    let x = rand_arr(&mut rng, &[8]).mapv(|v| v.abs() + 0.1);
    gradcheck(
        &[x],
        |_, leaves| {
            let l = &leaves[0];
            let t = l
                .log()
                .add(&l.sqrt())
                .unwrap()
                .add(&l.sin().mul(&l.cos()).unwrap())
                .unwrap()
                .add(&l.relu())
                .unwrap()
                .sub(&l.neg().exp())
                .unwrap();
            t.mul_scalar(0.5).add_scalar(1.0).sum()
        },
        1e-6,
    );
}
