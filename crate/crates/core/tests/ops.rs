use percgan_core::tensor::gradcheck::grad_check;
use percgan_core::tensor::{adam_step, AdamConfig, AdamState, BnMode};
use percgan_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Quadruple loop over output positions, summing input channel, kernel row,
/// kernel column in that order, then adding the bias.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xv, wv) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (oy * stride + kh) as isize - pad as isize;
                                let ix = (ox * stride + kw) as isize - pad as isize;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    xv[((i * c + ic) * h + iy as usize) * wd + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += wv[((oc * c + ic) * k + kh) * k + kw] * v;
                            }
                        }
                    }
                    out.push(acc + b[oc]);
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>, Error> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, Some(bv), stride, pad)?;
    Ok(tape.value(y).clone())
}

fn conv_t(y: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>, Error> {
    let mut tape = Tape::new();
    let (yv, wv) = (tape.constant(y.clone()), tape.constant(w.clone()));
    let x = tape.conv_transpose2d(yv, wv, None, stride, pad)?;
    Ok(tape.value(x).clone())
}

#[test]
fn scalar_kernel_scales_input() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn strided_conv_matches_nested_loops() {
    let x = randn(&[1, 1, 4, 4], 1);
    let w = randn(&[1, 1, 2, 2], 2);
    let b = t(&[1], &[0.0]);
    let y = conv(&x, &w, &b, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), naive_conv(&x, &w, b.data(), 2, 0).as_slice());
}

#[test]
fn zero_kernels_give_zero_outputs() {
    let x = randn(&[2, 3, 6, 6], 3);
    let y = conv(&x, &Tensor::zeros(&[4, 3, 3, 3]), &Tensor::zeros(&[4]), 1, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, 6, 6]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    let z = conv_t(&randn(&[2, 3, 3, 3], 4), &Tensor::zeros(&[3, 2, 4, 4]), 2, 1).unwrap();
    assert_eq!(z.shape(), &[2, 2, 6, 6]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_rejects_bad_geometry() {
    let x = randn(&[1, 2, 5, 5], 5);
    let b = Tensor::zeros(&[1]);
    assert!(matches!(conv(&x, &randn(&[1, 3, 3, 3], 6), &b, 1, 0), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(conv(&x, &randn(&[1, 2, 2, 2], 6), &b, 2, 0), Err(Error::InvalidShape { .. })));
    assert!(matches!(conv(&x, &randn(&[1, 2, 7, 7], 6), &b, 1, 0), Err(Error::InvalidShape { .. })));
    assert!(matches!(conv(&x, &randn(&[1, 2, 3, 3], 6), &b, 0, 0), Err(Error::InvalidShape { .. })));
}

#[test]
fn transposed_conv_doubles_resolution() {
    let y = conv_t(&randn(&[1, 1, 2, 2], 7), &randn(&[1, 1, 2, 2], 8), 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
}

#[test]
fn transposed_conv_is_adjoint_on_fixed_case() {
    let x = randn(&[1, 2, 5, 5], 9);
    let w = randn(&[3, 2, 3, 3], 10);
    let y = randn(&[1, 3, 3, 3], 11);
    let lhs = conv(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap().dot(&y).unwrap();
    let rhs = x.dot(&conv_t(&y, &w, 1, 0).unwrap()).unwrap();
    assert!((lhs - rhs).abs() < 1e-5);
}

fn bn_train(x: &Tensor<f64>) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[c], 1.0));
    let b = tape.constant(Tensor::zeros(&[c]));
    let (y, stats) = tape.batchnorm(xv, g, b, 1e-5, BnMode::Train).unwrap();
    assert!(stats.is_some());
    tape.value(y).clone()
}

#[test]
fn batchnorm_centres_each_channel() {
    let x = randn(&[4, 3, 2, 2], 12);
    let y = bn_train(&x);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|i| (0..4).map(move |p| (i, p))).map(|(i, p)| y.data()[(i * 3 + c) * 4 + p]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_constant_channel_is_zero() {
    let y = bn_train(&Tensor::full(&[2, 1, 2, 2], 3.5));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_needs_two_values_per_channel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.batchnorm(x, g, b, 1e-5, BnMode::Train), Err(Error::DegenerateBatch { count: 1 })));
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let x = randn(&[3, 2, 2, 2], 13);
    let f = |tape: &mut Tape<f64>, x: Var| {
        let g = tape.constant(t(&[2], &[1.3, 0.7]));
        let b = tape.constant(t(&[2], &[0.1, -0.2]));
        let (y, _) = tape.batchnorm(x, g, b, 1e-5, BnMode::Train)?;
        let y = tape.sigmoid(y)?;
        tape.mean(y)
    };
    assert!(grad_check(f, &x, 1e-5, 1e-4).unwrap().passed());
}

fn unary(x: &[f64], op: impl Fn(&mut Tape<f64>, Var) -> Result<Var, Error>) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(t(&[x.len()], x));
    let y = op(&mut tape, v).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn activation_values() {
    assert_eq!(unary(&[-1.0, 0.0, 2.0], |t, v| t.relu(v)), vec![0.0, 0.0, 2.0]);
    assert_eq!(unary(&[0.0], |t, v| t.sigmoid(v)), vec![0.5]);
    assert!((unary(&[-2.0], |t, v| t.leaky_relu(v, 0.2))[0] + 0.4).abs() < 1e-15);
    let s = unary(&[-30.0, -1.0, 1.0, 30.0], |t, v| t.sigmoid(v));
    assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    let th = unary(&[-3.0, 0.5, 3.0], |t, v| t.tanh(v));
    assert!(th.iter().all(|&v| v > -1.0 && v < 1.0));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 1.0]));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn linear_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[3.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);

    let xi = randn(&[3, 4], 14);
    let mut tape = Tape::new();
    let x = tape.constant(xi.clone());
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 5] = 1.0);
    let w = tape.constant(t(&[4, 4], &eye));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y), &xi);

    let f = |tape: &mut Tape<f64>, x: Var| {
        let w = tape.constant(randn(&[4, 2], 15));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.linear(x, w, b)?;
        let y = tape.tanh(y)?;
        tape.sq_l2(y)
    };
    assert!(grad_check(f, &xi, 1e-5, 1e-4).unwrap().passed());
}

#[test]
fn concat_values_shapes_and_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2], &[1.0, 2.0]));
    let b = tape.param(t(&[1], &[3.0]));
    let c = tape.concat(a, b, 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0]);

    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let h = tape.constant(Tensor::zeros(&[1, 128, 4, 4]));
    let j = tape.concat(f, h, 1).unwrap();
    assert_eq!(tape.shape(j), &[1, 132, 4, 4]);
    let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
    assert!(tape.concat(f, bad, 1).is_err());
}

#[test]
fn reduction_values() {
    assert_eq!(unary(&[3.0, 4.0], |t, v| t.sq_l2(v)), vec![25.0]);
    assert_eq!(unary(&[2.5; 7], |t, v| t.mean(v)), vec![2.5]);
    assert_eq!(unary(&[1.0], |t, v| t.log(v)), vec![0.0]);
    let mut tape = Tape::new();
    let v = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(v), Err(Error::Domain { .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(randn(&[5], 16));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, -2.0]));
    let s = tape.sq_l2(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Detached)));
}

#[test]
fn conv_relu_mean_matches_finite_differences() {
    let x = randn(&[2, 2, 5, 5], 17);
    let f = |tape: &mut Tape<f64>, x: Var| {
        let w = tape.constant(randn(&[3, 2, 3, 3], 18));
        let b = tape.constant(t(&[3], &[0.1, 0.0, -0.1]));
        let y = tape.conv2d(x, w, Some(b), 2, 1)?;
        let y = tape.relu(y)?;
        tape.mean(y)
    };
    assert!(grad_check(f, &x, 1e-5, 1e-4).unwrap().passed());
}

fn gram_of(a: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let g = tape.gram(v).unwrap();
    tape.value(g).clone()
}

#[test]
fn gram_hand_case_and_zero_case() {
    let g = gram_of(&t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(g.shape(), &[1, 2, 2]);
    for (a, b) in g.data().iter().zip([1.25, 2.75, 2.75, 6.25]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(gram_of(&Tensor::zeros(&[2, 3, 2, 2])).data().iter().all(|&v| v == 0.0));
}

/// Smallest eigenvalue of a symmetric matrix by power iteration on
/// `σI - S`, with `σ` an upper bound on the spectrum.
fn min_eigenvalue(s: &[f64], c: usize) -> f64 {
    let sigma: f64 = (0..c).map(|i| (0..c).map(|j| s[i * c + j].abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + i as f64 * 0.1).collect();
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let mut w = vec![0.0; c];
        for i in 0..c {
            w[i] = sigma * v[i] - (0..c).map(|j| s[i * c + j] * v[j]).sum::<f64>();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    sigma - lambda
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_exactly(
        n in 1usize..=2, c in 1usize..=4, o in 1usize..=3, h in 3usize..=8,
        k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        prop_assume!((h + 2 * pad - k) % stride == 0);
        let x = randn(&[n, c, h, h], seed);
        let w = randn(&[o, c, k, k], seed ^ 1);
        let b = randn(&[o], seed ^ 2);
        let y = conv(&x, &w, &b, stride, pad).unwrap();
        let expected = naive_conv(&x, &w, b.data(), stride, pad);
        prop_assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn conv_transpose_is_adjoint(
        n in 1usize..=2, c in 1usize..=3, o in 1usize..=3, oh in 1usize..=5,
        k in 1usize..=4, stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        let h = (oh - 1) * stride + k;
        prop_assume!(h > 2 * pad);
        let h = h - 2 * pad;
        let x = randn(&[n, c, h, h], seed);
        let w = randn(&[o, c, k, k], seed ^ 3);
        let y = randn(&[n, o, oh, oh], seed ^ 4);
        let lhs = conv(&x, &w, &Tensor::zeros(&[o]), stride, pad).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_t(&y, &w, stride, pad).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn gram_is_symmetric_psd(c in 1usize..=8, h in 1usize..=4, w in 1usize..=4, seed in any::<u64>()) {
        let g = gram_of(&randn(&[1, c, h, w], seed));
        let s = g.data();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((s[i * c + j] - s[j * c + i]).abs() < 1e-7);
            }
        }
        prop_assert!(min_eigenvalue(s, c) >= -1e-6);
    }

    #[test]
    fn identical_params_stay_identical(v in -2.0f64..2.0, g in proptest::collection::vec(-1.0f64..1.0, 1..6)) {
        let mut params = vec![Tensor::full(&[1], v), Tensor::full(&[1], v)];
        let mut state = AdamState::new(&params);
        for gi in &g {
            let grads = vec![Tensor::full(&[1], *gi), Tensor::full(&[1], *gi)];
            adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(params[0].data()[0].to_bits(), params[1].data()[0].to_bits());
    }
}

#[test]
fn adam_first_step_matches_hand_recurrence() {
    let mut params = vec![Tensor::full(&[1], 1.0f64)];
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };
    adam_step(&mut params, &[Tensor::full(&[1], 1.0)], &mut state, &cfg).unwrap();
    let m_hat = 0.5 * 1.0 / (1.0 - 0.5);
    let v_hat = 0.001 * 1.0 / (1.0 - 0.999);
    let expected = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
    assert!((params[0].data()[0] - expected).abs() < 1e-12);
    assert!((params[0].data()[0] - 0.9).abs() < 1e-6);
}
