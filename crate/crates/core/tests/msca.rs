use mdcm::backbone::TokenSeq;
use mdcm::msca::{accumulate_maps, apply_mask, cls_attention_map, resize_bilinear, scale_mask, ActivationMap, ScaleMask};
use mdcm::params::{ParamStore, Session};
use mdcm::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corner-aligned bilinear resize as a sum of tent weights over every
/// source cell.
fn tent_resize(values: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let coord = |d: usize, src: usize, dst: usize| {
        if dst <= 1 || src <= 1 {
            0.0
        } else {
            d as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let tent = |a: f64, b: usize| (1.0 - (a - b as f64).abs()).max(0.0);
    let mut out = Vec::new();
    for y in 0..to.0 {
        for x in 0..to.1 {
            let (sy, sx) = (coord(y, from.0, to.0), coord(x, from.1, to.1));
            let mut acc = 0.0;
            for i in 0..from.0 {
                for j in 0..from.1 {
                    acc += tent(sy, i) * tent(sx, j) * values[i * from.1 + j];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn random_map(seed: u64, grid: (usize, usize)) -> ActivationMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..grid.0 * grid.1).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ActivationMap {
        values: raw.iter().map(|v| v / total).collect(),
        grid,
    }
}

#[test]
fn random_softmax_row_drop_and_divide() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let row: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let map = cls_attention_map(&row, (4, 4)).unwrap();
    let rest: f64 = row[1..].iter().sum();
    for (m, r) in map.values.iter().zip(&row[1..]) {
        assert!((m - r / rest).abs() < 1e-12);
    }
}

#[test]
fn hot_cell_resize_matches_tent_oracle() {
    for (from, to) in [((4, 4), (2, 2)), ((4, 4), (3, 3)), ((8, 8), (3, 5)), ((5, 7), (2, 3))] {
        for hot in [0, from.0 * from.1 / 2 + 1, from.0 * from.1 - 1] {
            let mut v = vec![0.0; from.0 * from.1];
            v[hot] = 1.0;
            let got = resize_bilinear(&v, from, to);
            let want = tent_resize(&v, from, to);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{from:?}->{to:?} hot {hot}");
            }
        }
    }
}

fn seq_of(s: &mut Session, t: &Tensor, grid: (usize, usize)) -> TokenSeq {
    TokenSeq {
        tokens: s.constant(t.clone()),
        grid,
    }
}

#[test]
fn apply_mask_examples() {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let x = Tensor::from_fn(&[5, 3], |i| i as f64 - 4.0);

    let zero = ScaleMask { weights: vec![0.0; 4], gamma: 1.0 };
    let seq = seq_of(&mut s, &x, (2, 2));
    let out = apply_mask(&mut s, seq, &zero, 0.05).unwrap();
    assert_eq!(s.value(out.tokens), &x);

    let one = ScaleMask { weights: vec![0.0, 1.0, 0.0, 0.0], gamma: 1.0 };
    let seq = seq_of(&mut s, &x, (2, 2));
    let out = apply_mask(&mut s, seq, &one, 0.05).unwrap();
    let y = s.value(out.tokens);
    for r in 0..5 {
        let f = if r == 2 { 2.0 } else { 1.0 };
        for (a, b) in y.row(r).iter().zip(x.row(r)) {
            assert_eq!(*a, f * b);
        }
    }

    // Extreme suppression is clamped instead of flipping signs.
    let neg = ScaleMask { weights: vec![-3.0, 0.0, 0.0, 0.0], gamma: 1.0 };
    let seq = seq_of(&mut s, &x, (2, 2));
    let out = apply_mask(&mut s, seq, &neg, 0.05).unwrap();
    let y = s.value(out.tokens).clone();
    for (a, b) in y.row(1).iter().zip(x.row(1)) {
        assert!((a - 0.05 * b).abs() < 1e-15);
    }

    let short = ScaleMask { weights: vec![0.0; 3], gamma: 1.0 };
    let seq = seq_of(&mut s, &x, (2, 2));
    assert!(apply_mask(&mut s, seq, &short, 0.05).is_err());
}

#[test]
fn mask_is_a_constant_for_backward() {
    let store = ParamStore::new();
    let mut s = Session::new(&store, true);
    let x = Tensor::from_fn(&[5, 2], |i| (i as f64).sin());
    let xv = s.tape.leaf(x.clone());
    let mask = scale_mask(&random_map(3, (2, 2)), 0.3).unwrap();
    let out = apply_mask(&mut s, TokenSeq { tokens: xv, grid: (2, 2) }, &mask, 0.05).unwrap();
    let w = s.constant(Tensor::from_fn(&[5, 2], |i| i as f64 + 1.0));
    let p = s.tape.mul(out.tokens, w).unwrap();
    let loss = s.tape.sum(p);
    let g = s.tape.backward(loss).unwrap().get(xv).unwrap();
    for r in 0..5 {
        let f = if r == 0 { 1.0 } else { (1.0 + mask.weights[r - 1]).max(0.05) };
        for c in 0..2 {
            assert_eq!(g.data()[r * 2 + c], f * (r * 2 + c + 1) as f64);
        }
    }
}

proptest! {
    #[test]
    fn scale_mask_is_a_z_score(seed in 0u64..500, h in 1usize..6, w in 2usize..6, shift in -5.0f64..5.0) {
        let map = random_map(seed, (h, w));
        let m = scale_mask(&map, 1.0).unwrap();
        let n = m.weights.len() as f64;
        let mean = m.weights.iter().sum::<f64>() / n;
        let var = m.weights.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);

        let m3 = scale_mask(&map, 0.3).unwrap();
        prop_assert!((m3.weights.iter().sum::<f64>() / n).abs() < 1e-9);

        let shifted = ActivationMap { values: map.values.iter().map(|v| v + shift).collect(), grid: map.grid };
        let ms = scale_mask(&shifted, 0.3).unwrap();
        for (a, b) in ms.weights.iter().zip(&m3.weights) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulated_maps_are_distributions(seed in 0u64..500, levels in 0usize..3) {
        let current = random_map(seed, (2, 2));
        let history: Vec<ActivationMap> = (0..levels)
            .map(|i| random_map(seed + 1 + i as u64, (2 << (levels - i), 2 << (levels - i))))
            .collect();
        let acc = accumulate_maps(&history, &current).unwrap();
        prop_assert!((acc.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(acc.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_mask_after_mask_is_single_mask(seed in 0u64..200) {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));
        let mask = scale_mask(&random_map(seed, (2, 2)), 0.3).unwrap();
        let zero = ScaleMask { weights: vec![0.0; 4], gamma: 0.3 };
        let seq = seq_of(&mut s, &x, (2, 2));
        let once = apply_mask(&mut s, seq, &mask, 0.05).unwrap();
        let twice = apply_mask(&mut s, once, &zero, 0.05).unwrap();
        prop_assert_eq!(s.value(once.tokens), s.value(twice.tokens));
    }
}
