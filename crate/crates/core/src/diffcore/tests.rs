use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::PasclError;

fn t(dims: &[usize], data: &[f64]) -> TensorBuf<f64> {
    TensorBuf::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> TensorBuf<f64> {
    let n = dims.iter().product();
    t(dims, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

/// `sum(dot_rows(y, r))` for a fixed random `r`, turning any output into a scalar.
fn probe(tape: &mut Tape<f64>, y: NodeId, seed: u64) -> crate::error::Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let dims = tape.value(y).dims().to_vec();
    let r = tape.constant(random(&mut rng, &dims, -1.0, 1.0));
    let d = tape.dot_rows(y, r)?;
    tape.sum(d)
}

#[test]
fn row_logsumexp_of_equal_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.row_logsumexp(x).unwrap();
    assert!((tape.value(y).data()[0] - 3f64.ln()).abs() < 1e-15);
    assert_eq!(tape.value(y).dims(), &[1]);
}

#[test]
fn row_l2_normalize_three_four_five() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.row_l2_normalize(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, -1.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn mean_of_relu_gradient() {
    let mut tape = Tape::new();
    let x = tape.parameter(t(&[2], &[1.0, -1.0]));
    let r = tape.relu(x).unwrap();
    let m = tape.mean(r).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.0]);
    // finite-difference cross check
    let report = grad_check(
        |tp, x| {
            let r = tp.relu(x)?;
            tp.mean(r)
        },
        &t(&[2], &[1.0, -1.0]),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.parameter(t(&[1], &[0.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);
}

#[test]
fn dot_of_self_gradient() {
    let mut tape = Tape::new();
    let x = tape.parameter(t(&[1], &[3.0]));
    let d = tape.dot_rows(x, x).unwrap();
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = random(&mut rng, &[5], -3.0, 3.0);
    let mut tape = Tape::new();
    let x = tape.parameter(point.clone());
    let y = tape.row_logsumexp(x).unwrap();
    tape.backward(y).unwrap();
    let g = tape.grad(x).unwrap().to_vec();
    // oracle: central differences of the directly evaluated function
    let f = |v: &[f64]| v.iter().map(|a| a.exp()).sum::<f64>().ln();
    for i in 0..5 {
        let mut p = point.data().to_vec();
        let mut m = point.data().to_vec();
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let fd = (f(&p) - f(&m)) / 2e-5;
        assert!((g[i] - fd).abs() < 1e-8, "coord {i}: {} vs {fd}", g[i]);
    }
    let z: f64 = point.data().iter().map(|a| a.exp()).sum();
    for (gi, xi) in g.iter().zip(point.data()) {
        assert!((gi - xi.exp() / z).abs() < 1e-14);
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let report = grad_check(
        |tp, x| {
            let d = tp.dot_rows(x, x)?;
            tp.sum(d)
        },
        &t(&[3], &[1.0, 2.0, 3.0]),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn grad_check_constant_function_is_exact() {
    let report = grad_check(
        |tp, _x| Ok(tp.constant(TensorBuf::scalar(4.0))),
        &t(&[3], &[1.0, 2.0, 3.0]),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.max_abs_error, 0.0);
    assert_eq!(report.max_rel_error, 0.0);
    assert!(report.pass);
}

#[test]
fn grad_check_log_softmax_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = random(&mut rng, &[4, 5], -2.0, 2.0);
    let labels = [1usize, 4, 0, 2];
    let report = grad_check(
        |tp, x| {
            let ls = tp.row_log_softmax(x)?;
            let mut onehot = vec![0.0; 20];
            for (r, &l) in labels.iter().enumerate() {
                onehot[r * 5 + l] = 1.0;
            }
            let oh = tp.constant(t(&[4, 5], &onehot));
            let picked = tp.dot_rows(ls, oh)?;
            tp.mean(picked)
        },
        &point,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn grad_check_rejects_non_scalar_function() {
    let err = grad_check(|tp, x| tp.relu(x), &t(&[2], &[1.0, 2.0]), 1e-5, 1e-4).unwrap_err();
    assert!(matches!(err, PasclError::InvalidInput(_)));
}

/// One entry per primitive: builds the primitive around the checked input and
/// produces the sampling range that keeps the primitive smooth.
type Case = (&'static str, [usize; 2], (f64, f64), fn(&mut Tape<f64>, NodeId, &mut ChaCha8Rng) -> crate::error::Result<NodeId>);

fn cases() -> Vec<Case> {
    vec![
        ("matmul_left", [3, 4], (-1.0, 1.0), |tp, x, rng| {
            let w = tp.constant(random(rng, &[4, 2], -1.0, 1.0));
            tp.matmul(x, w)
        }),
        ("matmul_right", [3, 4], (-1.0, 1.0), |tp, x, rng| {
            let a = tp.constant(random(rng, &[2, 3], -1.0, 1.0));
            tp.matmul(a, x)
        }),
        ("transpose", [3, 4], (-1.0, 1.0), |tp, x, _| tp.transpose(x)),
        ("add", [3, 4], (-1.0, 1.0), |tp, x, rng| {
            let b = tp.constant(random(rng, &[3, 4], -1.0, 1.0));
            tp.add(x, b)
        }),
        ("add_row_broadcast", [1, 4], (-1.0, 1.0), |tp, x, rng| {
            let a = tp.constant(random(rng, &[3, 4], -1.0, 1.0));
            tp.add(a, x)
        }),
        ("scale", [3, 4], (-1.0, 1.0), |tp, x, _| tp.scale(x, -2.5)),
        ("relu", [3, 4], (-1.0, 1.0), |tp, x, _| tp.relu(x)),
        ("row_log_softmax", [3, 4], (-3.0, 3.0), |tp, x, _| tp.row_log_softmax(x)),
        ("row_logsumexp", [3, 4], (-3.0, 3.0), |tp, x, _| tp.row_logsumexp(x)),
        ("row_logsumexp_masked", [3, 4], (-3.0, 3.0), |tp, x, _| {
            let mask = (0..12).map(|i| i % 3 != 1).collect();
            tp.row_logsumexp_masked(x, mask)
        }),
        ("row_l2_normalize", [3, 4], (-1.0, 1.0), |tp, x, _| tp.row_l2_normalize(x)),
        ("exp", [3, 4], (-1.0, 1.0), |tp, x, _| tp.exp(x)),
        ("log", [3, 4], (0.5, 2.0), |tp, x, _| tp.log(x)),
        ("sum", [3, 4], (-1.0, 1.0), |tp, x, _| tp.sum(x)),
        ("mean", [3, 4], (-1.0, 1.0), |tp, x, _| tp.mean(x)),
        ("gather_rows", [3, 4], (-1.0, 1.0), |tp, x, _| tp.gather_rows(x, vec![2, 0, 2])),
        ("concat_rows", [3, 4], (-1.0, 1.0), |tp, x, rng| {
            let b = tp.constant(random(rng, &[2, 4], -1.0, 1.0));
            tp.concat_rows(&[b, x, x])
        }),
        ("dot_rows", [3, 4], (-1.0, 1.0), |tp, x, rng| {
            let b = tp.constant(random(rng, &[3, 4], -1.0, 1.0));
            tp.dot_rows(x, b)
        }),
        ("batch_norm_train_x", [6, 3], (-1.0, 1.0), |tp, x, rng| {
            let g = tp.constant(random(rng, &[3], 0.5, 1.5));
            let b = tp.constant(random(rng, &[3], -0.5, 0.5));
            tp.apply(Primitive::BatchNormTrain { eps: 1e-5 }, &[x, g, b])
        }),
        ("batch_norm_train_gamma", [1, 3], (0.5, 1.5), |tp, g, rng| {
            let x = tp.constant(random(rng, &[6, 3], -1.0, 1.0));
            let b = tp.constant(random(rng, &[3], -0.5, 0.5));
            tp.apply(Primitive::BatchNormTrain { eps: 1e-5 }, &[x, g, b])
        }),
        ("batch_norm_train_beta", [1, 3], (-0.5, 0.5), |tp, b, rng| {
            let x = tp.constant(random(rng, &[6, 3], -1.0, 1.0));
            let g = tp.constant(random(rng, &[3], 0.5, 1.5));
            tp.apply(Primitive::BatchNormTrain { eps: 1e-5 }, &[x, g, b])
        }),
        ("batch_norm_eval_x", [4, 3], (-1.0, 1.0), |tp, x, rng| {
            let g = tp.constant(random(rng, &[3], 0.5, 1.5));
            let b = tp.constant(random(rng, &[3], -0.5, 0.5));
            let mean = vec![0.1, -0.2, 0.3];
            let var = vec![0.5, 1.5, 2.0];
            tp.apply(Primitive::BatchNormEval { mean, var, eps: 1e-5 }, &[x, g, b])
        }),
        ("batch_norm_eval_gamma", [1, 3], (0.5, 1.5), |tp, g, rng| {
            let x = tp.constant(random(rng, &[4, 3], -1.0, 1.0));
            let b = tp.constant(random(rng, &[3], -0.5, 0.5));
            let mean = vec![0.1, -0.2, 0.3];
            let var = vec![0.5, 1.5, 2.0];
            tp.apply(Primitive::BatchNormEval { mean, var, eps: 1e-5 }, &[x, g, b])
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    for (name, dims, (lo, hi), build) in cases() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = random(&mut rng, &dims, lo, hi);
            let report = grad_check(
                |tp, x| {
                    let mut inner = ChaCha8Rng::seed_from_u64(seed + 1000);
                    let y = build(tp, x, &mut inner)?;
                    probe(tp, y, seed)
                },
                &point,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn logsumexp_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let l = random(&mut rng, &[7], -5.0, 5.0);
        let c: f64 = rng.random_range(-100.0..100.0);
        let shifted = t(&[7], &l.data().iter().map(|v| v + c).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let a = tape.constant(l);
        let b = tape.constant(shifted);
        let la = tape.row_logsumexp(a).unwrap();
        let lb = tape.row_logsumexp(b).unwrap();
        let diff = tape.value(lb).data()[0] - (tape.value(la).data()[0] + c);
        assert!(diff.abs() <= 1e-12, "shift {c}: {diff}");
    }
}

#[test]
fn logsumexp_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
    let y = tape.row_logsumexp(x).unwrap();
    assert!((tape.value(y).data()[0] - (1000.0 + 3f64.ln())).abs() < 1e-10);
}

#[test]
fn backward_twice_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.parameter(random(&mut rng, &[4, 3], -1.0, 1.0));
    let w = tape.parameter(random(&mut rng, &[3, 2], -1.0, 1.0));
    let h = tape.matmul(x, w).unwrap();
    let l = tape.row_log_softmax(h).unwrap();
    let s = tape.mean(l).unwrap();
    tape.backward(s).unwrap();
    let first = (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec());
    tape.backward(s).unwrap();
    assert_eq!(first.0, tape.grad(x).unwrap());
    assert_eq!(first.1, tape.grad(w).unwrap());
}

#[test]
fn evaluation_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let x = tape.parameter(random(&mut rng, &[5, 3], -1.0, 1.0));
        let n = tape.row_l2_normalize(x).unwrap();
        let nt = tape.transpose(n).unwrap();
        let s = tape.matmul(n, nt).unwrap();
        let l = tape.row_logsumexp(s).unwrap();
        let m = tape.mean(l).unwrap();
        tape.backward(m).unwrap();
        (tape.value(m).data()[0].to_bits(), tape.grad(x).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}

#[test]
fn unused_nodes_get_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.parameter(t(&[2], &[1.0, 2.0]));
    let unused = tape.parameter(t(&[2], &[5.0, 6.0]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    assert_eq!(tape.parameters().count(), 2);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[0.0; 6]));
    let b = tape.constant(t(&[2, 3], &[0.0; 6]));
    assert!(matches!(tape.matmul(a, b), Err(PasclError::InvalidInput(_))));
    let c = tape.constant(t(&[3, 2], &[0.0; 6]));
    assert!(matches!(tape.add(a, c), Err(PasclError::InvalidInput(_))));
    assert!(matches!(tape.gather_rows(a, vec![2]), Err(PasclError::InvalidInput(_))));
    assert!(matches!(
        tape.apply(Primitive::Relu, &[a, b]),
        Err(PasclError::InvalidInput(_))
    ));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1000.0, 0.0]));
    assert!(matches!(tape.exp(a), Err(PasclError::NumericOverflow(_))));
    let z = tape.constant(t(&[2], &[0.0, 1.0]));
    assert!(matches!(tape.log(z), Err(PasclError::NumericOverflow(_))));
    // nothing was appended for the failed ops
    assert_eq!(tape.len(), 2);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::new();
    let a = tape.parameter(t(&[2], &[1.0, 2.0]));
    let r = tape.relu(a).unwrap();
    assert!(matches!(tape.backward(r), Err(PasclError::InvalidInput(_))));
}

#[test]
fn batch_norm_train_needs_two_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let r = tape.apply(Primitive::BatchNormTrain { eps: 1e-5 }, &[x, g, b]);
    assert!(matches!(r, Err(PasclError::InvalidInput(_))));
}

#[test]
fn tensor_rejects_bad_extents() {
    assert!(TensorBuf::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(TensorBuf::<f64>::new(vec![0], vec![]).is_err());
    assert!(TensorBuf::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn f32_tape_evaluates() {
    let mut tape = Tape::<f32>::new();
    let x = tape.parameter(TensorBuf::new(vec![3], vec![0.0f32, 0.0, 0.0]).unwrap());
    let y = tape.row_logsumexp(x).unwrap();
    tape.backward(y).unwrap();
    assert!((tape.value(y).data()[0] - 3f32.ln()).abs() < 1e-6);
    assert!(tape.grad(x).unwrap().iter().all(|g| (g - 1.0 / 3.0).abs() < 1e-6));
}
