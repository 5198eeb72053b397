use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{contract, grad_check, op_cases, op_suite, rand_t};
use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

// ------------------------------------------------------------- examples

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t64(&[2, 2], &[1., 0., 0., 0.]));
    let b = g.constant(t64(&[2, 1], &[0., 5.]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[0., 0.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4, 2]);
    let r = grad_check(
        "matmul",
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y, 1)
        },
        &[a, b],
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], &[0., 0.]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t64(&[2], &[0., 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

    // Without max-subtraction exp(1000) overflows; with it the large entry
    // gets exactly 1 and the other underflows to 0 (true value e^-1000).
    let x = g.constant(t64(&[2], &[1000., 0.]));
    let y = g.softmax(x, 0).unwrap();
    assert!(1000f64.exp().is_infinite());
    let reference = [1.0 / (1.0 + (-1000f64).exp()), (-1000f64).exp()];
    assert_eq!(g.value(y).data(), &reference);
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], &[f64::NAN, 0.]));
    assert!(matches!(g.softmax(x, 0), Err(TensorError::Numeric { .. })));
    assert!(matches!(g.softmax(x, 1), Err(TensorError::Domain { .. })));
}

#[test]
fn softmax_along_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[2, 3, 4]);
    let mut g = Graph::<f64>::new();
    let v = g.constant(x);
    let y = g.softmax(v, 1).unwrap();
    let d = g.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|k| d[(o * 3 + k) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn weighted_softmax_zero_weight_removes_key() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 3], &[0.3, 2.0, -1.0]));
    let w = g.constant(t64(&[3], &[1., 0., 1.]));
    let y = g.weighted_softmax(x, w).unwrap();
    let x2 = g.constant(t64(&[2], &[0.3, -1.0]));
    let y2 = g.softmax(x2, 0).unwrap();
    let (a, b) = (g.value(y).data().to_vec(), g.value(y2).data().to_vec());
    assert_eq!(a[1], 0.0);
    assert!((a[0] - b[0]).abs() < 1e-15 && (a[2] - b[1]).abs() < 1e-15);
}

#[test]
fn weighted_softmax_with_unit_weights_is_bitwise_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_t(&mut rng, &[3, 5]);
    let mut g = Graph::<f64>::new();
    let v = g.constant(x);
    let w = g.constant(Tensor::full(vec![5], 1.0));
    let a = g.weighted_softmax(v, w).unwrap();
    let b = g.softmax(v, 1).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::full(vec![3], 1.0));
    let zero = g.constant(Tensor::zeros(vec![3]));
    let x = g.constant(t64(&[1, 3], &[2.5, 2.5, 2.5]));
    let y = g.layernorm(x, Some(one), Some(zero), 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    let one2 = g.constant(Tensor::full(vec![2], 1.0));
    let zero2 = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(t64(&[1, 2], &[-1., 1.]));
    let y = g.layernorm(x, Some(one2), Some(zero2), 1e-12).unwrap();
    for (a, b) in g.value(y).data().iter().zip([-1., 1.]) {
        assert!((a - b).abs() < 1e-11);
    }
    assert!(matches!(g.layernorm(x, Some(one), None, 1e-6), Err(TensorError::Shape { .. })));
    assert!(g.layernorm(x, None, None, 0.0).is_err());
}

#[test]
fn layernorm_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[2, 8]);
    let gamma = rand_t(&mut rng, &[8]);
    let beta = rand_t(&mut rng, &[8]);
    let r = grad_check(
        "layernorm",
        |g, v| {
            let y = g.layernorm(v[0], Some(v[1]), Some(v[2]), 1e-6)?;
            contract(g, y, 2)
        },
        &[x, gamma, beta],
        1e-4,
        1e-5,
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], &[-0.3, 0.0]));
    let r = g.relu(x);
    let ge = g.gelu(x);
    assert_eq!(g.value(r).data()[0], 0.0);
    assert_eq!(g.value(ge).data()[1], 0.0);

    let a = g.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let b = g.constant(t64(&[3], &[10., 20., 30.]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
    let bad = g.constant(t64(&[2], &[1., 1.]));
    assert!(matches!(g.add(a, bad), Err(TensorError::Shape { .. })));
    let c = g.constant(Tensor::scalar(2.0));
    let m = g.mul(a, c).unwrap();
    assert_eq!(g.value(m).data(), &[2., 4., 6., 8., 10., 12.]);
}

#[test]
fn reduce_examples() {
    let mut g = Graph::<f64>::new();
    // two candidates (n axis first), two coordinates
    let x = g.input(t64(&[2, 2], &[1., -2., 0., 3.]));
    let m = g.reduce(x, ReduceKind::Max, 0).unwrap();
    assert_eq!(g.value(m).data(), &[1., 3.]);
    let v = g.constant(t64(&[2], &[2., 4.]));
    let mean = g.reduce(v, ReduceKind::Mean, 0).unwrap();
    assert_eq!(g.value(mean).item(), 3.0);
    let e = g.constant(t64(&[2], &[2., 4.]));
    assert!(g.reduce(e, ReduceKind::Sum, 1).is_err());
}

#[test]
fn max_tie_routes_gradient_to_lowest_index() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[2], &[5., 5.]));
    let m = g.reduce(x, ReduceKind::Max, 0).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 0.]);

    // Oracle on a perturbed input: nudging index 0 up makes it the strict
    // maximum, and the finite-difference gradient agrees with the tie rule.
    let r = grad_check(
        "max_tie_perturbed",
        |g, v| g.reduce(v[0], ReduceKind::Max, 0),
        &[t64(&[2], &[5. + 1e-3, 5.])],
        1e-4,
        1e-8,
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn l2_distance_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.input(t64(&[2], &[0.5, -1.]));
    let d = g.l2_distance(a, a).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
    g.backward(d).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[0., 0.]);

    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[2], &[1., 0.]));
    let b = g.constant(t64(&[2], &[0., 0.]));
    let d = g.l2_distance(a, b).unwrap();
    assert_eq!(g.value(d).item(), 1.0);
}

#[test]
fn l2_distance_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_t(&mut rng, &[5]);
    let b = rand_t(&mut rng, &[5]);
    let r = grad_check("l2", |g, v| g.l2_distance(v[0], v[1]), &[a, b], 1e-4, 1e-5).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn gradcheck_examples() {
    let r = grad_check(
        "sum_sq",
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum_all(sq)
        },
        &[t64(&[2], &[1., 2.])],
        1e-4,
        1e-8,
    )
    .unwrap();
    assert!(r.passed(), "{r}");

    // constant function: analytic gradient absent (zeros), numeric ~0
    let r = grad_check(
        "constant",
        |g, _v| Ok::<_, TensorError>(g.constant(Tensor::scalar(3.0))),
        &[t64(&[3], &[1., 2., 3.])],
        1e-4,
        1e-8,
    )
    .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn gradcheck_detects_corrupted_backward() {
    // x * detach(x) has true derivative 2x but the tape only sees x.
    let r = grad_check(
        "corrupted",
        |g, v| {
            let d = g.detach(v[0]);
            let p = g.mul(v[0], d)?;
            g.sum_all(p)
        },
        &[t64(&[3], &[0.5, -1.0, 2.0])],
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(!r.passed());
    let w = r.worst.unwrap();
    assert!((w.numeric - 2.0 * w.analytic).abs() < 1e-6);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn graph_replay_is_bit_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let a = g.input(rand_t(&mut rng, &[4, 6]).cast());
        let b = g.input(rand_t(&mut rng, &[6, 3]).cast());
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y);
        let y = g.softmax(y, 1).unwrap();
        let s = g.sum_all(y).unwrap();
        let ln = g.layernorm(a, None, None, 1e-6).unwrap();
        let t = g.sum_all(ln).unwrap();
        let tot = g.add(s, t).unwrap();
        g.backward(tot).unwrap();
        (g.value(y).clone(), g.grad(a).unwrap(), g.grad(b).unwrap())
    };
    let (y1, ga1, gb1) = build();
    let (y2, ga2, gb2) = build();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&y1), bits(&y2));
    assert_eq!(bits(&ga1), bits(&ga2));
    assert_eq!(bits(&gb1), bits(&gb2));
}

// --------------------------------------------------- property sweeps

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let reports = op_suite(0..100, 1e-4, 1e-4);
    assert_eq!(reports.len(), op_cases().len());
    for r in reports {
        assert!(r.passed(), "{r}");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
            let y = g.softmax(x, 1).unwrap();
            for r in 0..3 {
                let row = g.value(y).row(r);
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn broadcasting_is_commutative_and_associative_on_integers(
            a in proptest::collection::vec(-20i32..20, 6),
            b in proptest::collection::vec(-20i32..20, 3),
            c in proptest::collection::vec(-20i32..20, 3),
        ) {
            let f = |v: &[i32], s: &[usize]| Tensor::<f64>::new(s.to_vec(), v.iter().map(|&x| x as f64).collect()).unwrap();
            let mut g = Graph::<f64>::new();
            let (ta, tb, tc) = (g.constant(f(&a, &[2, 3])), g.constant(f(&b, &[3])), g.constant(f(&c, &[3])));
            let ab = g.add(ta, tb).unwrap();
            let ba = g.add(tb, ta).unwrap();
            prop_assert_eq!(g.value(ab).data(), g.value(ba).data());
            let ab_c = g.add(ab, tc).unwrap();
            let bc = g.add(tb, tc).unwrap();
            let a_bc = g.add(ta, bc).unwrap();
            prop_assert_eq!(g.value(ab_c).data(), g.value(a_bc).data());
            let mab = g.mul(ta, tb).unwrap();
            let mba = g.mul(tb, ta).unwrap();
            prop_assert_eq!(g.value(mab).data(), g.value(mba).data());
            let mab_c = g.mul(mab, tc).unwrap();
            let mbc = g.mul(tb, tc).unwrap();
            let ma_bc = g.mul(ta, mbc).unwrap();
            prop_assert_eq!(g.value(mab_c).data(), g.value(ma_bc).data());
        }
    }
}

#[test]
fn zero_weight_keys_do_not_shift_live_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&mut rng, &[2, 4]);
    let mut wide = Vec::new();
    for r in 0..2 {
        wide.extend_from_slice(x.row(r));
        wide.extend_from_slice(&[50.0, -3.0]);
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(x);
    let wa = g.constant(Tensor::full(vec![4], 1.0));
    let b = g.constant(t64(&[2, 6], &wide));
    let wb = g.constant(t64(&[6], &[1., 1., 1., 1., 0., 0.]));
    let sa = g.weighted_softmax(a, wa).unwrap();
    let sb = g.weighted_softmax(b, wb).unwrap();
    for r in 0..2 {
        assert_eq!(&g.value(sb).row(r)[..4], g.value(sa).row(r));
        assert_eq!(&g.value(sb).row(r)[4..], &[0.0, 0.0]);
    }
}
