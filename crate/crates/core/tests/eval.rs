use mdcm::data::manifest::{generate_split, LoadedSplit, Split};
use mdcm::data::{Bucket, SynthSpec};
use mdcm::eval::{
    aggregate_score, bucketed_accuracy, correction_score, metrics_csv, overlay_cell, percent, quartile_buckets,
    render_selection_overlay, run_ablation, EvalRecord, RunSpec, ScoreMode, OVERLAY_COLOR,
};
use mdcm::losses::LossConfig;
use mdcm::model::{AblationConfig, ModelConfig};
use mdcm::msda::Aggregation;
use mdcm::optim::OptimConfig;
use mdcm::tensor::Tensor;
use mdcm::train::TrainConfig;
use proptest::prelude::*;

/// The 32 correctness patterns of (y₁..y₄, y₅) with label 0; a wrong
/// prediction is class 1.
fn cases() -> Vec<([usize; 4], usize)> {
    (0..32u32)
        .map(|m| {
            let pre = [0, 1, 2, 3].map(|i| ((m >> i) & 1) as usize);
            (pre, ((m >> 4) & 1) as usize)
        })
        .collect()
}

#[test]
fn correction_score_enumeration() {
    for (pre, post) in cases() {
        let right = pre.iter().filter(|&&p| p == 0).count() as i32;
        let wrong = 4 - right;
        let prose = if post == 0 { wrong } else { -right };
        let equation = if post == 0 { right } else { -wrong };
        let p = correction_score(&pre, post, 0, ScoreMode::Prose);
        let e = correction_score(&pre, post, 0, ScoreMode::Equation);
        assert_eq!(p, prose, "{pre:?} {post}");
        assert_eq!(e, equation, "{pre:?} {post}");
        assert!((-4..=4).contains(&p) && (-4..=4).contains(&e));
        // Flipping every correctness negates the prose score.
        let flipped = pre.map(|x| 1 - x);
        assert_eq!(correction_score(&flipped, 1 - post, 0, ScoreMode::Prose), -p);
    }
    assert_eq!(correction_score(&[1; 4], 0, 0, ScoreMode::Prose), 4);
    assert_eq!(correction_score(&[0; 4], 1, 0, ScoreMode::Prose), -4);
    assert_eq!(correction_score(&[0; 4], 0, 0, ScoreMode::Prose), 0);
    assert_eq!(correction_score(&[0; 4], 0, 0, ScoreMode::Equation), 4);
}

fn record(stages: [usize; 4], fin: usize, label: usize, bucket: Bucket) -> EvalRecord {
    EvalRecord { stages: Some(stages), final_class: fin, gate: Some(fin), sum: Some(label), label, bucket }
}

#[test]
fn aggregate_score_examples() {
    assert_eq!(aggregate_score(&[], Aggregation::Gate, ScoreMode::Prose), Some(0));
    let two = [
        record([1, 1, 0, 0], 0, 0, Bucket::Small),
        record([0, 2, 2, 2], 2, 0, Bucket::Small),
    ];
    assert_eq!(aggregate_score(&two, Aggregation::Gate, ScoreMode::Prose), Some(1));
    assert_eq!(aggregate_score(&two, Aggregation::Sum, ScoreMode::Prose), Some(5));
    let bare = EvalRecord { stages: None, gate: None, sum: None, ..two[0].clone() };
    assert_eq!(aggregate_score(&[bare], Aggregation::Gate, ScoreMode::Prose), None);
}

#[test]
fn bucketed_examples() {
    let all: Vec<EvalRecord> = Bucket::ALL.iter().map(|&b| record([0; 4], 1, 1, b)).collect();
    let acc = bucketed_accuracy(&all);
    assert_eq!(acc.overall(), Some(100.0));
    for b in Bucket::ALL {
        assert_eq!(acc.bucket(b), Some(100.0));
    }
    let half = [record([0; 4], 0, 0, Bucket::Small), record([0; 4], 0, 1, Bucket::Small)];
    let acc = bucketed_accuracy(&half);
    assert_eq!(acc.bucket(Bucket::Small), Some(50.0));
    assert_eq!(acc.bucket(Bucket::Medium), None);
    assert_eq!(acc.bucket(Bucket::Large), None);
    assert_eq!(percent(1, 3), 33.3);
}

#[test]
fn quartile_examples() {
    let areas = [5.0, 1.0, 8.0, 3.0, 7.0, 2.0, 6.0, 4.0];
    let b = quartile_buckets(&areas);
    let want = [
        Bucket::Medium,
        Bucket::Small,
        Bucket::Large,
        Bucket::Medium,
        Bucket::Large,
        Bucket::Small,
        Bucket::Medium,
        Bucket::Medium,
    ];
    assert_eq!(b, want);
    assert!(quartile_buckets(&[]).is_empty());
}

#[test]
fn overlay_examples() {
    let img = Tensor::from_fn(&[16, 16, 3], |i| (i % 7) as f64 / 10.0);
    assert_eq!(overlay_cell(4, 1), 8);
    assert_eq!(overlay_cell(4, 3), 32);

    assert_eq!(render_selection_overlay(&img, &[], (2, 2), 8).unwrap(), img);

    let one = render_selection_overlay(&img, &[0], (2, 2), 8).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let px = &one.data()[(y * 16 + x) * 3..][..3];
            let orig = &img.data()[(y * 16 + x) * 3..][..3];
            let edge = x < 8 && y < 8 && (x == 0 || y == 0 || x == 7 || y == 7);
            if edge {
                assert_eq!(px, OVERLAY_COLOR);
            } else {
                assert_eq!(px, orig);
            }
        }
    }

    let all = render_selection_overlay(&img, &[0, 1, 2, 3], (2, 2), 8).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let on_grid = [0, 7, 8, 15].contains(&x) || [0, 7, 8, 15].contains(&y);
            assert_eq!(&all.data()[(y * 16 + x) * 3..][..3] == OVERLAY_COLOR, on_grid);
        }
    }

    assert!(render_selection_overlay(&img, &[4], (2, 2), 8).is_err());
    assert!(render_selection_overlay(&img, &[0], (3, 3), 8).is_err());
}

fn tiny_spec(ablation: AblationConfig) -> RunSpec {
    let mut model = ModelConfig::default();
    model.backbone.patch_size = 4;
    model.backbone.stage_dims = [8, 16, 32, 64];
    model.backbone.stage_depths = [1; 4];
    model.backbone.stage_heads = [1; 4];
    model.ablation = ablation;
    RunSpec {
        model,
        loss: LossConfig::default(),
        optim: OptimConfig { lr: 0.01, ..OptimConfig::default() },
        train: TrainConfig { epochs: 1, batch_size: 8 },
        seed: 3,
    }
}

#[test]
fn ablation_is_deterministic_and_reconciles() {
    let spec = SynthSpec::default();
    let train = LoadedSplit::from_samples(generate_split(&spec, Split::Train, 16, 1).unwrap(), Split::Train);
    let test = LoadedSplit::from_samples(generate_split(&spec, Split::Test, 12, 1).unwrap(), Split::Test);
    let rows = [AblationConfig::BASELINE, AblationConfig::FULL];
    let run = || run_ablation(&tiny_spec(AblationConfig::FULL), &rows, &[1], &train, &test, ScoreMode::Prose, |_, _, _| {});
    let a = run().unwrap();
    let b = run().unwrap();
    assert_eq!(metrics_csv(&a), metrics_csv(&b));
    assert_eq!(a[0].config, "baseline");
    assert_eq!(a[0].score_gate, None);
    assert!(a[1].score_gate.is_some() && a[1].score_sum.is_some());
    for row in &a {
        let acc = &row.accuracy;
        let (c, n) = acc.counts.values().fold((0, 0), |(c, n), &(bc, bn)| (c + bc, n + bn));
        assert_eq!((c, n), (acc.correct, acc.total));
        assert_eq!(n, 12);
    }

    let bad = AblationConfig { msts: false, msda: true, msca: false };
    let err = run_ablation(&tiny_spec(AblationConfig::FULL), &[bad], &[1], &train, &test, ScoreMode::Prose, |_, _, _| {})
        .unwrap_err();
    assert!(err.to_string().contains("msts"));
}

proptest! {
    #[test]
    fn totals_reconcile_with_buckets(
        recs in prop::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..60),
    ) {
        let records: Vec<EvalRecord> = recs
            .iter()
            .map(|&(p, l, b)| record([0; 4], p, l, Bucket::ALL[b]))
            .collect();
        let acc = bucketed_accuracy(&records);
        let (c, n) = acc.counts.values().fold((0, 0), |(c, n), &(bc, bn)| (c + bc, n + bn));
        prop_assert_eq!(c, acc.correct);
        prop_assert_eq!(n, records.len());
        prop_assert_eq!(c, records.iter().filter(|r| r.final_class == r.label).count());
        prop_assert!(acc.counts.values().all(|&(_, bn)| bn > 0));
    }

    #[test]
    fn quartiles_split_into_quarters(areas in prop::collection::vec(0.0f64..100.0, 4..80)) {
        let b = quartile_buckets(&areas);
        let n = areas.len();
        let small = b.iter().filter(|&&x| x == Bucket::Small).count();
        let large = b.iter().filter(|&&x| x == Bucket::Large).count();
        prop_assert_eq!(small, n.div_ceil(4));
        prop_assert_eq!(large, n - (3 * n).div_ceil(4));
        for i in 0..n {
            for j in 0..n {
                if b[i] == Bucket::Small && b[j] == Bucket::Large {
                    prop_assert!(areas[i] <= areas[j]);
                }
            }
        }
    }
}
