use mdcm::tensor::{grad_check, grad_check_many, Tape, Tensor};
use mdcm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, d.to_vec()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (mm, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; mm * n];
    for i in 0..mm {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = t.leaf(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = t.leaf(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.leaf(m(1, 2, &[1.0, 2.0]));
    let b = t.leaf(m(2, 1, &[3.0, 4.0]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    close(t.value(c).data(), &naive_matmul(&a, &b), 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[2, 3]));
    let e = t.matmul(a, b).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.leaf(m(1, 3, &[0.0, 0.0, 0.0]));
    let y = t.softmax(x);
    close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

    let x = t.leaf(m(1, 2, &[1000.0, 0.0]));
    let y = t.softmax(x);
    let d = t.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert_eq!(d[0], 1.0);
    assert!(d[1] < 1e-300);

    let x = t.leaf(m(1, 3, &[1.0, 2.0, 3.0]));
    let y = t.softmax(x);
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    close(t.value(y).data(), &oracle, 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.leaf(Tensor::ones(&[3]));
    let b = t.leaf(Tensor::zeros(&[3]));
    let x = t.leaf(m(1, 3, &[2.5, 2.5, 2.5]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.leaf(Tensor::ones(&[2]));
    let b2 = t.leaf(Tensor::zeros(&[2]));
    let x = t.leaf(m(1, 2, &[1.0, 3.0]));
    let y = t.layer_norm(x, g2, b2, 1e-12).unwrap();
    close(t.value(y).data(), &[-1.0, 1.0], 1e-9);

    let v = [0.3, -1.2, 2.0, 0.7];
    let g4 = t.leaf(Tensor::vector(vec![1.0, 2.0, 0.5, -1.0]));
    let b4 = t.leaf(Tensor::vector(vec![0.0, 0.1, 0.2, 0.3]));
    let x = t.leaf(m(1, 4, &v));
    let y = t.layer_norm(x, g4, b4, 1e-5).unwrap();
    let mean = v.iter().sum::<f64>() / 4.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    let oracle: Vec<f64> = v
        .iter()
        .zip([1.0, 2.0, 0.5, -1.0])
        .zip([0.0, 0.1, 0.2, 0.3])
        .map(|((x, g), b)| (x - mean) / (var + 1e-5).sqrt() * g + b)
        .collect();
    close(t.value(y).data(), &oracle, 1e-10);
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0]));
    let y = t.sigmoid(x);
    assert_eq!(t.value(y).data(), &[0.5]);

    let x = t.leaf(Tensor::vector(vec![-2.0, 3.0, 0.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 3.0, 0.0]);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0], "relu gradient at 0 is 0");

    let mut t = Tape::new();
    let a = t.leaf(Tensor::scalar(2.0));
    let b = t.leaf(Tensor::scalar(5.0));
    let p = t.mul(a, b).unwrap();
    let g = t.backward(p).unwrap();
    assert_eq!(g.get(a).unwrap().item(), 5.0);
    assert_eq!(g.get(b).unwrap().item(), 2.0);
    let e = grad_check_many(|t, v| t.mul(v[0], v[1]), &[Tensor::scalar(2.0), Tensor::scalar(5.0)], 1e-5).unwrap();
    assert!(e < 1e-9);
}

#[test]
fn incompatible_broadcast_is_an_error() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    let c = t.leaf(Tensor::zeros(&[3]));
    assert!(matches!(t.mul(a, c), Err(Error::Shape { .. })));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), Tensor::ones(&[2, 3]));

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(t.backward(sq), Err(Error::Contract(_))), "non-scalar loss");
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = t.mul(x, c).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().shape(), &[2]);
}

#[test]
fn fan_out_accumulates() {
    // x feeds both a sigmoid and a matmul; both paths must contribute.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[2, 2], |_| rng.random_range(-1.0..1.0));
    let e = grad_check(
        |t, v| {
            let a = t.sigmoid(v);
            let b = t.matmul(v, v)?;
            let c = t.mul(a, b)?;
            Ok(t.sum(c))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8, "{e}");
}

#[test]
fn grad_check_examples() {
    let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 1.0);
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap() < 1e-10);

    let x = Tensor::matrix(1, 4, vec![0.1, -0.3, 2.0, 0.5]).unwrap();
    let e = grad_check(
        |t, v| {
            let s = t.softmax(v);
            Ok(t.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-8);

    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.1).is_err(), "h above 1e-2");
}

fn rand_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-2.0..2.0))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[rows, cols], {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            move |_| rng.random_range(-scale..scale)
        }));
        let y = t.softmax(x);
        let out = t.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn matmul_matches_naive(seed in 0u64..1000, mm in 1usize..7, k in 1usize..7, n in 1usize..7) {
        let a = rand_matrix(seed, mm, k);
        let b = rand_matrix(seed + 1, k, n);
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in t.value(c).data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn differentiable_ops_pass_grad_check(seed in 0u64..10) {
        let x = rand_matrix(seed, 3, 4);
        let w = rand_matrix(seed + 100, 3, 4);
        let checks: Vec<f64> = vec![
            grad_check(|t, v| { let y = t.softmax(v); let c = t.constant(w.clone()); let p = t.mul(y, c)?; Ok(t.sum(p)) }, &x, 1e-5).unwrap(),
            grad_check(|t, v| { let y = t.sigmoid(v); let c = t.constant(w.clone()); let p = t.mul(y, c)?; Ok(t.sum(p)) }, &x, 1e-5).unwrap(),
            grad_check(|t, v| { let y = t.gelu(v); let c = t.constant(w.clone()); let p = t.mul(y, c)?; Ok(t.sum(p)) }, &x, 1e-5).unwrap(),
            grad_check(|t, v| {
                let g = t.constant(Tensor::vector(vec![1.0, 0.5, -1.0, 2.0]));
                let b = t.constant(Tensor::zeros(&[4]));
                let y = t.layer_norm(v, g, b, 1e-5)?;
                let c = t.constant(w.clone());
                let p = t.mul(y, c)?;
                Ok(t.sum(p))
            }, &x, 1e-5).unwrap(),
            grad_check_many(|t, v| { let y = t.matmul_nt(v[0], v[1])?; Ok(t.sum(y)) }, &[x.clone(), w.clone()], 1e-5).unwrap(),
        ];
        for e in checks {
            prop_assert!(e < 1e-4, "relative error {}", e);
        }
    }
}
