mod common;

use mdcm::losses::{contrastive, smooth_target, smoothed_ce, total_loss, LossConfig};
use mdcm::optim::{cosine_lr, sgd_step, OptimConfig, OptimState};
use mdcm::params::{ParamStore, Session};
use mdcm::tensor::{rel_err, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[test]
fn smooth_target_examples() {
    assert_eq!(smooth_target(2, 1.0, 4, false), vec![0.0, 0.0, 1.0, 0.0]);
    assert!(close(&smooth_target(0, 0.6, 4, false), &[0.6, 0.1, 0.1, 0.1], 1e-15));
    assert!((smooth_target(0, 0.6, 4, false).iter().sum::<f64>() - 0.9).abs() < 1e-12);
    assert!((smooth_target(3, 0.6, 4, true).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn ce(logits: &[Vec<f64>], betas: &[f64], label: usize) -> f64 {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let vars: Vec<Var> = logits.iter().map(|l| s.constant(Tensor::vector(l.clone()))).collect();
    let l = smoothed_ce(&mut s, &vars, betas, label, false).unwrap();
    s.value(l).item()
}

#[test]
fn smoothed_ce_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| r.random_range(-3.0..3.0)).collect()).collect();

    let onehot: f64 = logits.iter().map(|l| -log_softmax(l)[1]).sum();
    assert!((ce(&logits, &[1.0; 5], 1) - onehot).abs() < 1e-10);

    assert!((ce(&[vec![0.0; 4]], &[1.0], 3) - 4f64.ln()).abs() < 1e-12);

    let oracle: f64 = -smooth_target(4, 0.7, 5, false)
        .iter()
        .zip(log_softmax(&logits[0]))
        .map(|(t, lp)| t * lp)
        .sum::<f64>();
    assert!((ce(&logits[..1], &[0.7], 4) - oracle).abs() < 1e-10);

    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let v = s.constant(Tensor::zeros(&[4]));
    assert!(smoothed_ce(&mut s, &[v, v], &[1.0], 0, false).is_err());
    assert!(smoothed_ce(&mut s, &[v], &[1.0], 4, false).is_err());
}

fn con(rows: &[Vec<f64>], labels: &[usize]) -> mdcm::Result<f64> {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let flat: Vec<f64> = rows.concat();
    let e = s.constant(Tensor::new(&[rows.len(), rows[0].len()], flat)?);
    let l = contrastive(&mut s, e, labels)?;
    Ok(s.value(l).item())
}

#[test]
fn contrastive_examples() {
    assert!(con(&[vec![0.3, -1.0]], &[2]).unwrap().abs() < 1e-15);
    assert!(con(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[0, 0]).unwrap().abs() < 1e-15);
    assert_eq!(con(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap(), 0.0);
    // Two ordered opposite pairs, each contributing 2, over B² = 4.
    assert!((con(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[0, 0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(con(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[0, 1]).is_err());
    assert!(con(&[vec![1.0, 0.0]], &[0, 1]).is_err());
}

fn rand_rows(r: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..c).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn total_loss_examples_and_linearity() {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let (ls, lc) = (s.constant(Tensor::scalar(2.0)), s.constant(Tensor::scalar(1.0)));
    let l = total_loss(&mut s, ls, lc, 0.1).unwrap();
    assert!((s.value(l).item() - 2.1).abs() < 1e-15);
    let l = total_loss(&mut s, ls, lc, 0.0).unwrap();
    assert_eq!(s.value(l).item(), 2.0);
    assert!(total_loss(&mut s, ls, lc, -1.0).is_err());

    let mut r = ChaCha8Rng::seed_from_u64(2);
    let emb = Tensor::new(&[4, 3], rand_rows(&mut r, 4, 3).concat()).unwrap();
    let labels = [0, 1, 0, 2];
    let alpha = 0.1;
    let grads = |which: u8| {
        let mut s = Session::new(&store, true);
        let e = s.tape.leaf(emb.clone());
        let logits = s.tape.row(e, 0).unwrap();
        let ls = smoothed_ce(&mut s, &[logits], &[0.8], 1, false).unwrap();
        let lc = contrastive(&mut s, e, &labels).unwrap();
        let out = match which {
            0 => ls,
            1 => lc,
            _ => total_loss(&mut s, ls, lc, alpha).unwrap(),
        };
        let value = s.value(out).item();
        (s.tape.backward(out).unwrap().get(e).unwrap(), value)
    };
    let ((gs, _), (gc, _), (gt, lt)) = (grads(0), grads(1), grads(2));
    for ((a, b), t) in gs.data().iter().zip(gc.data()).zip(gt.data()) {
        assert!((a + alpha * b - t).abs() < 1e-6);
    }
    // And the combined gradient agrees with central differences.
    let h = 1e-5;
    for j in 0..emb.numel() {
        let eval = |d: f64| {
            let mut e2 = emb.clone();
            e2.data_mut()[j] += d;
            let mut s = Session::new(&store, false);
            let e = s.constant(e2);
            let logits = s.tape.row(e, 0).unwrap();
            let ls = smoothed_ce(&mut s, &[logits], &[0.8], 1, false).unwrap();
            let lc = contrastive(&mut s, e, &labels).unwrap();
            let l = total_loss(&mut s, ls, lc, alpha).unwrap();
            s.value(l).item()
        };
        assert!(rel_err(gt.data()[j], (eval(h) - eval(-h)) / (2.0 * h)) < 1e-6);
    }
    assert!(lt.is_finite());
}

fn single_param_store(value: Tensor) -> (ParamStore, mdcm::params::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("p", value);
    (store, id)
}

fn state(store: &ParamStore, lr: f64, total: usize) -> OptimState {
    OptimState::new(store, &OptimConfig { lr, momentum: 0.9, weight_decay: 0.0 }, total)
}

#[test]
fn sgd_examples() {
    let p0 = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let g = Tensor::vector(vec![0.3, 0.1, -0.4]);
    // total_steps 0 keeps the rate constant.
    let (mut store, id) = single_param_store(p0.clone());
    let mut st = state(&store, 0.1, 0);
    sgd_step(&mut store, &[Some(g.clone())], &mut st).unwrap();
    let want: Vec<f64> = p0.data().iter().zip(g.data()).map(|(p, g)| p - 0.1 * g).collect();
    assert!(close(store.get(id).data(), &want, 1e-15));

    let before = store.get(id).clone();
    let v_before = st.velocity[0].clone().unwrap();
    sgd_step(&mut store, &[Some(Tensor::zeros(&[3]))], &mut st).unwrap();
    let v_after = st.velocity[0].clone().unwrap();
    assert!(close(v_after.data(), &v_before.data().iter().map(|v| 0.9 * v).collect::<Vec<_>>(), 1e-15));
    // Zero gradients still move the parameters by the decayed velocity.
    let drift: Vec<f64> = before.data().iter().zip(v_after.data()).map(|(p, v)| p - 0.1 * v).collect();
    assert!(close(store.get(id).data(), &drift, 1e-15));

    // From a zero velocity, zero gradients leave the parameters alone.
    let (mut store, id) = single_param_store(p0.clone());
    let mut st = state(&store, 0.1, 0);
    sgd_step(&mut store, &[Some(Tensor::zeros(&[3]))], &mut st).unwrap();
    assert_eq!(store.get(id), &p0);

    // Three scripted steps under the cosine schedule.
    let gs = [0.5, -1.0, 2.0];
    let (mut store, id) = single_param_store(Tensor::scalar(1.0));
    let mut st = state(&store, 0.2, 3);
    for g in gs {
        sgd_step(&mut store, &[Some(Tensor::scalar(g))], &mut st).unwrap();
    }
    let (mut p, mut v) = (1.0, 0.0);
    for (k, g) in gs.iter().enumerate() {
        v = 0.9 * v + g;
        p -= 0.2 * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / 3.0).cos()) * v;
    }
    assert!((store.get(id).item() - p).abs() < 1e-15);
    assert_eq!(st.step, 3);

    assert!(sgd_step(&mut store, &[Some(Tensor::zeros(&[2]))], &mut st).is_err());
    assert!(sgd_step(&mut store, &[], &mut st).is_err());
}

#[test]
fn sgd_skips_buffers() {
    let mut store = ParamStore::new();
    let b = store.add_buffer("b", Tensor::scalar(3.0));
    let mut st = state(&store, 0.1, 0);
    sgd_step(&mut store, &[Some(Tensor::scalar(1.0))], &mut st).unwrap();
    assert_eq!(store.get(b).item(), 3.0);
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 100, 0.045), 0.045);
    assert_eq!(cosine_lr(100, 100, 0.045), 0.0);
    assert!((cosine_lr(50, 100, 0.045) - 0.0225).abs() < 1e-15);
    assert_eq!(cosine_lr(150, 100, 0.045), 0.0);
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = [
        LossConfig { betas: [0.6, 0.8, 0.7, 0.9, 1.0], ..LossConfig::default() },
        LossConfig { betas: [0.6, 0.7, 0.8, 0.9, 1.1], ..LossConfig::default() },
        LossConfig { alpha: -0.1, ..LossConfig::default() },
    ];
    for b in bad {
        assert!(b.validate().is_err(), "{b:?}");
    }
}

proptest! {
    #[test]
    fn ce_nonnegative_in_safe_beta_range(seed in 0u64..1000, n in 2usize..8, t in 0.0f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = vec![(0..n).map(|_| r.random_range(-5.0..5.0)).collect::<Vec<f64>>()];
        let lo = (n - 1) as f64 / n as f64;
        let beta = lo + t * (1.0 - lo);
        prop_assert!(ce(&logits, &[beta], r.random_range(0..n)) >= 0.0);
    }

    #[test]
    fn contrastive_is_permutation_invariant(seed in 0u64..1000, b in 1usize..7) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rows = rand_rows(&mut r, b, 4);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plab: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = con(&rows, &labels).unwrap();
        let p = con(&prow, &plab).unwrap();
        prop_assert!((a - p).abs() < 1e-12);
    }
}
