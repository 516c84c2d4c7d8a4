mod common;

use common::{max_grad_error, naive_conv, naive_matmul, random_tensor, rng};
use proptest::prelude::*;
use xmodal_core::{Error, RngState, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

const GRAD_TOL: f64 = 1e-4;

#[test]
fn matmul_identity_and_hand_cases() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);
}

#[test]
fn matmul_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = random_tensor(&mut r, &[4, 5], 1.0);
    let b = random_tensor(&mut r, &[5, 3], 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    assert!(tape.value(out).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn conv_identity_kernel() {
    let input = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let out = tape.conv2d(x, k, b, 0).unwrap();
    assert_eq!(tape.value(out), &input);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng(12);
    let input = random_tensor(&mut r, &[2, 3, 8, 8], 1.0);
    let kernel = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let bias = random_tensor(&mut r, &[4], 1.0);
    let mut tape = Tape::new();
    let (x, k, b) = (
        tape.constant(input.clone()),
        tape.constant(kernel.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.conv2d(x, k, b, 1).unwrap();
    let expected = naive_conv(&input, &kernel, bias.data(), 1);
    assert_eq!(tape.shape(out), &[2, 4, 8, 8]);
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, k, b, 1), Err(Error::Dimension { .. })));
}

#[test]
fn activations_at_zero() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let th = tape.tanh(z).unwrap();
    let sg = tape.sigmoid(z).unwrap();
    let sm = tape.softmax(z).unwrap();
    assert_eq!(tape.value(th).data()[0], 0.0);
    assert_eq!(tape.value(sg).data()[0], 0.5);
    assert_eq!(tape.value(sm).data(), &[0.25; 4]);
}

#[test]
fn non_finite_input_is_a_numeric_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.tanh(x), Err(Error::Numeric { .. })));
    assert!(matches!(tape.softmax(x), Err(Error::Numeric { .. })));
}

#[test]
fn batch_norm_train_normalises() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[16, 5], 10.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[5], 1.0));
    let b = tape.constant(Tensor::zeros(&[5]));
    let (y, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
    let y = tape.value(y);
    for f in 0..5 {
        let col: Vec<f64> = (0..16).map(|i| y.data()[i * 5 + f]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_constant_feature_gives_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 2], 3.0));
    let g = tape.constant(Tensor::full(&[2], 2.0));
    let b = tape.constant(t(&[2], &[0.25, -0.5]));
    let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(2) {
        assert!((row[0] - 0.25).abs() < 1e-12 && (row[1] + 0.5).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_hand_computed() {
    let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let (mean, var) = ([2.0, 3.0], [4.0, 0.25]);
    let (gamma, beta) = ([0.5, 2.0], [1.0, -1.0]);
    let eps = 1e-5;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(t(&[2], &gamma));
    let b = tape.constant(t(&[2], &beta));
    let y = tape.batch_norm_eval(xv, g, b, &mean, &var, eps).unwrap();
    for i in 0..3 {
        for f in 0..2 {
            let expected =
                (x.data()[i * 2 + f] - mean[f]) / (var[f] + eps).sqrt() * gamma[f] + beta[f];
            assert!((tape.value(y).data()[i * 2 + f] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_rejects_single_sample_batch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.batch_norm_train(x, g, b, 1e-5),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn dropout_identity_cases_and_bad_rate() {
    let mut rng = RngState::new(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 3], 2.0));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.9, false, &mut rng).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = RngState::new(5);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[100_000], 1.5));
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
    assert!((mean - 1.5).abs() / 1.5 < 0.02, "mean {mean}");
}

#[test]
fn dropout_is_deterministic_per_seed() {
    let run = |seed| {
        let mut rng = RngState::new(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[64], 1.0));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::full(&[2, 4], 0.25));
    let target = t(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let ce = tape.cross_entropy(uniform, &target).unwrap();
    assert!((tape.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let exact = tape.constant(target.clone());
    let ce = tape.cross_entropy(exact, &target).unwrap();
    assert!(tape.value(ce).item().unwrap().abs() < 1e-12);

    let pred = tape.constant(t(&[1, 2], &[0.25, 0.75]));
    let ce = tape.cross_entropy(pred, &t(&[1, 2], &[0.5, 0.5])).unwrap();
    let hand = -(0.5 * 0.25f64.ln() + 0.5 * 0.75f64.ln());
    assert!((tape.value(ce).item().unwrap() - hand).abs() < 1e-12);
    assert!((hand - 0.8370).abs() < 1e-4);
}

#[test]
fn cross_entropy_rejects_unnormalised_rows() {
    let mut tape = Tape::new();
    let pred = tape.constant(t(&[1, 2], &[0.5, 0.6]));
    assert!(matches!(
        tape.cross_entropy(pred, &t(&[1, 2], &[1.0, 0.0])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn mse_reference_values() {
    let mut r = rng(4);
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let same = tape.mse(x, x).unwrap();
    assert_eq!(tape.value(same).item().unwrap(), 0.0);
    let l = tape.mse(x, z).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 5.0);

    let a = random_tensor(&mut r, &[6, 7], 1.0);
    let b = random_tensor(&mut r, &[6, 7], 1.0);
    let mut oracle = 0.0;
    for i in 0..a.len() {
        oracle += (a.data()[i] - b.data()[i]).powi(2);
    }
    oracle /= 6.0;
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let l = tape.mse(va, vb).unwrap();
    assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-12);

    let wrong = tape.constant(Tensor::zeros(&[7, 6]));
    assert!(matches!(tape.mse(va, wrong), Err(Error::Dimension { .. })));
}

#[test]
fn concat_shapes_and_values() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[2.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

    let x = tape.constant(Tensor::zeros(&[3, 2]));
    let y = tape.constant(Tensor::zeros(&[3, 5]));
    let z = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(tape.shape(z), &[3, 7]);
    let bad = tape.constant(Tensor::zeros(&[4, 5]));
    assert!(tape.concat(&[x, bad], 1).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::full(&[2, 3, 4], 0.7));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_accumulates_and_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::full(&[3], 1.0));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn single_layer_mse_gradient_closed_form() {
    // loss = mse(x W, y); dL/dW = 2/batch * x^T (xW - y)
    let mut r = rng(21);
    let x = random_tensor(&mut r, &[5, 3], 1.0);
    let w = random_tensor(&mut r, &[3, 2], 1.0);
    let y = random_tensor(&mut r, &[5, 2], 1.0);
    let mut tape = Tape::new();
    let (xv, wv, yv) = (
        tape.constant(x.clone()),
        tape.variable(w.clone()),
        tape.constant(y.clone()),
    );
    let pred = tape.matmul(xv, wv).unwrap();
    let loss = tape.mse(pred, yv).unwrap();
    tape.backward(loss).unwrap();

    let resid: Vec<f64> = naive_matmul(&x, &w)
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, t)| p - t)
        .collect();
    for i in 0..3 {
        for j in 0..2 {
            let mut expected = 0.0;
            for n in 0..5 {
                expected += x.data()[n * 3 + i] * resid[n * 2 + j];
            }
            expected *= 2.0 / 5.0;
            assert!((tape.grad(wv).unwrap().data()[i * 2 + j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut r = rng(99);
    let checks: Vec<(&str, f64)> = vec![
        (
            "matmul",
            max_grad_error(
                &[random_tensor(&mut r, &[4, 5], 1.0), random_tensor(&mut r, &[5, 3], 1.0)],
                1,
                |t, v| t.matmul(v[0], v[1]),
            ),
        ),
        (
            "add_bias",
            max_grad_error(
                &[random_tensor(&mut r, &[3, 4, 2, 2], 1.0), random_tensor(&mut r, &[4], 1.0)],
                2,
                |t, v| t.add_bias(v[0], v[1]),
            ),
        ),
        (
            "add",
            max_grad_error(
                &[random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[3, 4], 1.0)],
                3,
                |t, v| t.add(v[0], v[1]),
            ),
        ),
        (
            "tanh",
            max_grad_error(&[random_tensor(&mut r, &[3, 4], 2.0)], 4, |t, v| t.tanh(v[0])),
        ),
        (
            "sigmoid",
            max_grad_error(&[random_tensor(&mut r, &[3, 4], 2.0)], 5, |t, v| t.sigmoid(v[0])),
        ),
        (
            "leaky_relu",
            max_grad_error(&[random_tensor(&mut r, &[3, 4], 2.0)], 6, |t, v| {
                t.leaky_relu(v[0], 0.2)
            }),
        ),
        (
            "softmax",
            max_grad_error(&[random_tensor(&mut r, &[3, 5], 2.0)], 7, |t, v| t.softmax(v[0])),
        ),
        (
            "log",
            max_grad_error(
                &[Tensor::new(vec![6], vec![0.3, 0.5, 1.2, 2.0, 0.9, 0.1]).unwrap()],
                8,
                |t, v| t.log_clamped(v[0], 1e-12),
            ),
        ),
        (
            "conv2d",
            max_grad_error(
                &[
                    random_tensor(&mut r, &[2, 3, 5, 5], 1.0),
                    random_tensor(&mut r, &[4, 3, 3, 3], 1.0),
                    random_tensor(&mut r, &[4], 1.0),
                ],
                9,
                |t, v| t.conv2d(v[0], v[1], v[2], 1),
            ),
        ),
        (
            "batch_norm (2d)",
            max_grad_error(
                &[
                    random_tensor(&mut r, &[6, 4], 2.0),
                    random_tensor(&mut r, &[4], 1.0),
                    random_tensor(&mut r, &[4], 1.0),
                ],
                10,
                |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
            ),
        ),
        (
            "batch_norm (4d)",
            max_grad_error(
                &[
                    random_tensor(&mut r, &[3, 2, 3, 3], 2.0),
                    random_tensor(&mut r, &[2], 1.0),
                    random_tensor(&mut r, &[2], 1.0),
                ],
                11,
                |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
            ),
        ),
        (
            "batch_norm_eval",
            max_grad_error(
                &[
                    random_tensor(&mut r, &[3, 2], 2.0),
                    random_tensor(&mut r, &[2], 1.0),
                    random_tensor(&mut r, &[2], 1.0),
                ],
                12,
                |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[1.5, 0.5], 1e-5),
            ),
        ),
        (
            "concat",
            max_grad_error(
                &[random_tensor(&mut r, &[3, 2], 1.0), random_tensor(&mut r, &[3, 4], 1.0)],
                13,
                |t, v| t.concat(&[v[0], v[1]], 1),
            ),
        ),
        (
            "avg_pool",
            max_grad_error(&[random_tensor(&mut r, &[2, 3, 3, 3], 1.0)], 14, |t, v| {
                t.avg_pool(v[0])
            }),
        ),
        (
            "broadcast_spatial",
            max_grad_error(&[random_tensor(&mut r, &[2, 3], 1.0)], 15, |t, v| {
                t.broadcast_spatial(v[0], 3, 2)
            }),
        ),
        (
            "mse",
            max_grad_error(
                &[random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[3, 4], 1.0)],
                16,
                |t, v| t.mse(v[0], v[1]),
            ),
        ),
        (
            "cross_entropy",
            max_grad_error(&[random_tensor(&mut r, &[4, 3], 1.0)], 17, |t, v| {
                let p = t.softmax(v[0])?;
                let target = Tensor::new(
                    vec![4, 3],
                    vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0],
                )?;
                t.cross_entropy(p, &target)
            }),
        ),
        (
            "mean",
            max_grad_error(&[random_tensor(&mut r, &[3, 4], 1.0)], 18, |t, v| t.mean(v[0])),
        ),
        (
            "affine",
            max_grad_error(&[random_tensor(&mut r, &[3, 4], 1.0)], 19, |t, v| {
                t.affine(v[0], -1.0, 1.0)
            }),
        ),
    ];
    for (name, err) in checks {
        assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[rows, cols], 20.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn matmul_agrees_with_loops(m in 1usize..16, k in 1usize..16, n in 1usize..16, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, k], 1.0);
        let b = random_tensor(&mut r, &[k, n], 1.0);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn conv_agrees_with_loops(
        ch in 1usize..4, out in 1usize..5, side in 3usize..12, half in 0usize..3, seed in 0u64..1000
    ) {
        let ksize = 2 * half + 1;
        prop_assume!(ksize <= side);
        let mut r = rng(seed);
        let input = random_tensor(&mut r, &[2, ch, side, side], 1.0);
        let kernel = random_tensor(&mut r, &[out, ch, ksize, ksize], 1.0);
        let bias = random_tensor(&mut r, &[out], 1.0);
        let mut tape = Tape::new();
        let (x, k, b) = (tape.constant(input.clone()), tape.constant(kernel.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(x, k, b, half).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&naive_conv(&input, &kernel, bias.data(), half)) < 1e-12);
    }

    #[test]
    fn batch_norm_train_mean_is_zero(batch in 2usize..20, feats in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[batch, feats], 5.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[feats], 1.0));
        let b = tape.constant(Tensor::zeros(&[feats]));
        let (y, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
        for f in 0..feats {
            let mean: f64 = (0..batch).map(|i| tape.value(y).data()[i * feats + f]).sum::<f64>() / batch as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
