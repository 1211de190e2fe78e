use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identity_matmul_returns_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_array(&mut rng, &[3, 3]);
    let g = Graph::new();
    let out = g.constant(&Array::eye(3)).matmul(g.constant(&a)).unwrap();
    assert_eq!(out.value(), a);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let g = Graph::new();
    let x = g.constant(&Array::zeros(&[4]));
    let y = x.softmax().unwrap().value();
    assert_eq!(y.data(), &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn layer_norm_centres_and_scales() {
    let g = Graph::new();
    let x = g.constant(&Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let gain = g.constant(&Array::filled(&[3], 1.0));
    let bias = g.constant(&Array::zeros(&[3]));
    let y = x.layer_norm(gain, bias).unwrap().value();
    let mean = y.data().iter().sum::<f64>() / 3.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_constant_row_stays_finite() {
    let g = Graph::new();
    let x = g.param(ParamId(0), &Array::filled(&[2, 5], 3.0));
    let gain = g.constant(&Array::filled(&[5], 1.0));
    let bias = g.constant(&Array::zeros(&[5]));
    let y = x.layer_norm(gain, bias).unwrap();
    assert!(y.value().is_finite());
    let loss = y.mul(y).unwrap().sum().unwrap();
    assert!(g.backprop(loss).unwrap().get(ParamId(0)).unwrap().is_finite());
}

#[test]
fn grad_of_sum_is_ones() {
    let g = Graph::new();
    let x = g.param(ParamId(7), &Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let grads = g.backprop(x.sum().unwrap()).unwrap();
    assert_eq!(grads.get(ParamId(7)).unwrap().data(), &[1.0; 6]);
}

#[test]
fn grad_of_square_sum() {
    let g = Graph::new();
    let x = g.param(ParamId(0), &Array::new(vec![2], vec![1.0, -2.0]).unwrap());
    let grads = g.backprop(x.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn weighted_combination_of_shared_reads_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_array(&mut rng, &[3, 4]);
    let w1 = random_array(&mut rng, &[4, 2]);
    let w2 = random_array(&mut rng, &[4, 5]);
    let lambda = 0.7;
    let err = check_gradients(
        |g, leaves| {
            let p = leaves[0];
            let a = p.matmul(g.constant(&w1))?.relu()?.sum()?;
            let b = p.matmul(g.constant(&w2))?.softmax()?.log(1e-12)?.sum()?;
            a.scale(lambda)?.add(b.scale(1.0 - lambda)?)
        },
        &[p],
        &GradCheck::with_step(1e-4),
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn quadratic_form_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_array(&mut rng, &[4, 4]);
    let x = random_array(&mut rng, &[1, 4]);
    let err = check_gradients(
        |g, l| l[0].matmul(g.constant(&q))?.mul(l[0])?.sum(),
        &[x],
        &GradCheck::with_step(1e-4),
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn constant_function_has_zero_error() {
    let err = check_gradients(
        |g, _l| g.constant(&Array::scalar(2.5)).sum(),
        &[Array::zeros(&[3])],
        &GradCheck::with_step(1e-4),
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_rejects_bad_step_and_nonfinite_values() {
    assert!(check_gradients(|_g, l| l[0].sum(), &[Array::zeros(&[2])], &GradCheck::with_step(0.0)).is_err());
    let err = check_gradients(
        |_g, l| l[0].scale(1e308)?.scale(1e10)?.sum(),
        &[Array::filled(&[1], 1.0)],
        &GradCheck::with_step(1e-4),
    );
    assert!(matches!(err, Err(TensorError::NonFinite { .. })));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let g = Graph::new();
    let a = g.constant(&Array::zeros(&[2, 3]));
    let b = g.constant(&Array::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = g.constant(&Array::zeros(&[3, 2]));
    assert!(matches!(a.add(c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn non_finite_intermediate_is_rejected() {
    let g = Graph::new();
    let a = g.constant(&Array::filled(&[2], 1e200));
    assert_eq!(a.mul(a).unwrap_err(), TensorError::NonFinite { op: "mul" });
}

#[test]
fn backprop_preconditions() {
    let g = Graph::new();
    let x = g.param(ParamId(0), &Array::zeros(&[2]));
    assert!(matches!(g.backprop(x), Err(TensorError::NotScalar(_))));
    let ng = Graph::no_grad();
    let y = ng.param(ParamId(0), &Array::zeros(&[2])).sum().unwrap();
    assert_eq!(ng.backprop(y).unwrap_err(), TensorError::NotRecorded);
}

#[test]
fn dropout_identity_in_eval_and_deterministic_in_train() {
    let g = Graph::new();
    let x = g.constant(&Array::filled(&[50], 1.0));
    let same = x.dropout(0.3, None).unwrap();
    assert_eq!(same.value(), x.value());
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let a = x.dropout(0.3, Some(&mut r1)).unwrap().value();
    let b = x.dropout(0.3, Some(&mut r2)).unwrap().value();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    assert!(a.data().iter().any(|&v| v == 0.0));
}

#[test]
fn masked_softmax_zeroes_disallowed_keys() {
    let mask = AttentionMask::padding(&[2], 3, 3, true);
    let g = Graph::new();
    let s = g.constant(&Array::zeros(&[2, 3, 3])); // 1 group x 2 heads
    let p = s.masked_softmax(&mask).unwrap().value();
    for h in 0..2 {
        let base = h * 9;
        assert_eq!(&p.data()[base..base + 3], &[1.0, 0.0, 0.0]);
        assert_eq!(&p.data()[base + 3..base + 6], &[0.5, 0.5, 0.0]);
        assert_eq!(&p.data()[base + 6..base + 9], &[0.5, 0.5, 0.0]);
    }
}

#[test]
fn split_and_merge_heads_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_array(&mut rng, &[2 * 3, 8]);
    let g = Graph::new();
    let t = g.constant(&x);
    let back = t.split_heads(2, 3, 4).unwrap().merge_heads(2, 3, 4).unwrap();
    assert_eq!(back.value(), x);
}

/// Projects any tensor to a scalar with fixed, position-dependent weights.
fn readout<'g>(t: Tensor<'g>, proj: &[f64]) -> Result<Tensor<'g>> {
    let w: Vec<f64> = (0..t.len()).map(|i| proj[i % proj.len()] + 0.1 * i as f64).collect();
    t.weighted_sum(w)
}

/// Builds each primitive on random inputs and checks backprop against central differences.
fn primitive_case(which: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // inputs kept away from the relu kink and the log floor
    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) { v } else { -v }
                })
                .collect(),
        )
        .unwrap()
    };
    let proj = random_array(&mut rng, &[12]);
    let proj = proj.data();
    let step = 1e-5;
    let opts = GradCheck::with_step(step);
    match which {
        0 => {
            let pts = [random_array(&mut rng, &[3, 4]), random_array(&mut rng, &[4, 2])];
            check_gradients(|_g, l| readout(l[0].matmul(l[1])?, proj), &pts, &opts)
        }
        1 => {
            let pts = [random_array(&mut rng, &[2, 3, 4]), random_array(&mut rng, &[2, 5, 4])];
            check_gradients(|_g, l| readout(l[0].bmm(l[1], true, 0.5)?, proj), &pts, &opts)
        }
        2 => {
            let pts = [random_array(&mut rng, &[2, 3, 4]), random_array(&mut rng, &[2, 4, 5])];
            check_gradients(|_g, l| readout(l[0].bmm(l[1], false, 1.3)?, proj), &pts, &opts)
        }
        3 => {
            let pts = [random_array(&mut rng, &[2, 3]), random_array(&mut rng, &[2, 3])];
            check_gradients(|_g, l| readout(l[0].add(l[1])?.mul(l[0])?, proj), &pts, &opts)
        }
        4 => {
            let pts = [random_array(&mut rng, &[3, 4]), random_array(&mut rng, &[4])];
            check_gradients(|_g, l| readout(l[0].add_row(l[1])?.scale(-2.0)?, proj), &pts, &opts)
        }
        5 => {
            let pts = [away(&mut rng, &[3, 4])];
            check_gradients(|_g, l| readout(l[0].relu()?, proj), &pts, &opts)
        }
        6 => {
            let pts = [random_array(&mut rng, &[3, 5])];
            check_gradients(|_g, l| readout(l[0].softmax()?, proj), &pts, &opts)
        }
        7 => {
            let mask = AttentionMask::padding(&[2, 3], 3, 3, true);
            let pts = [random_array(&mut rng, &[4, 3, 3])];
            check_gradients(|_g, l| readout(l[0].masked_softmax(&mask)?, proj), &pts, &opts)
        }
        8 => {
            let pts = [
                random_array(&mut rng, &[3, 6]),
                random_array(&mut rng, &[6]),
                random_array(&mut rng, &[6]),
            ];
            check_gradients(|_g, l| readout(l[0].layer_norm(l[1], l[2])?, proj), &pts, &opts)
        }
        9 => {
            let pts = [random_array(&mut rng, &[5, 3])];
            check_gradients(|_g, l| readout(l[0].embedding(&[4, 0, 4, 2])?, proj), &pts, &opts)
        }
        10 => {
            let pts = [random_array(&mut rng, &[4, 6])];
            let keep_seed = seed;
            check_gradients(
                |_g, l| {
                    let mut r = ChaCha8Rng::seed_from_u64(keep_seed);
                    readout(l[0].dropout(0.4, Some(&mut r))?, proj)
                },
                &pts,
                &opts,
            )
        }
        11 => {
            let pts = [random_array(&mut rng, &[4, 6])];
            check_gradients(
                |_g, l| readout(l[0].split_heads(2, 2, 3)?.scale(1.5)?.merge_heads(2, 2, 3)?, proj),
                &pts,
                &opts,
            )
        }
        12 => {
            let pts = [random_array(&mut rng, &[4, 3])];
            check_gradients(|_g, l| readout(l[0].gather_rows(&[3, 1, 3])?.reshape(&[9])?, proj), &pts, &opts)
        }
        13 => {
            let pts = [Array::new(vec![5], (0..5).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap()];
            check_gradients(|_g, l| readout(l[0].log(1e-12)?, proj), &pts, &opts)
        }
        _ => {
            let pts = [random_array(&mut rng, &[3, 3])];
            check_gradients(|_g, l| l[0].mul(l[0])?.sum(), &pts, &opts)
        }
    }
    .unwrap()
}

#[test]
fn every_primitive_matches_finite_differences() {
    for which in 0..15 {
        for seed in 0..5 {
            let err = primitive_case(which, seed);
            assert!(err < 1e-4, "primitive {which} seed {seed}: relative error {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalized(vals in proptest::collection::vec(-30.0f64..30.0, 6..24)) {
        let d = 6;
        let rows = vals.len() / d;
        let x = Array::new(vec![rows, d], vals[..rows * d].to_vec()).unwrap();
        let g = Graph::no_grad();
        let y = g.constant(&x).softmax().unwrap().value();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluation_is_bit_reproducible(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_array(&mut rng, &[4, 5]);
            let w = random_array(&mut rng, &[5, 3]);
            let g = Graph::new();
            let mut drop = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            g.constant(&a)
                .matmul(g.constant(&w)).unwrap()
                .dropout(0.1, Some(&mut drop)).unwrap()
                .softmax().unwrap()
                .value()
        };
        let (x, y) = (run(), run());
        prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn shared_input_accumulates_gradients() {
    let g = Graph::new();
    let x = g.param(ParamId(0), &Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.constant(&Array::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = x.matmul(w).unwrap().sum().unwrap();
    let b = x.sum().unwrap();
    let grads = g.backprop(a.add(b).unwrap()).unwrap();
    assert!(close(grads.get(ParamId(0)).unwrap().data(), &[2.0, 2.0], 1e-15));
}
