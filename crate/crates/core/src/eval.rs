//! Accuracy, scale-bucketed accuracy, aggregation correction scores,
//! ablation runs and token-selection overlays.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::augment;
use crate::data::manifest::LoadedSplit;
use crate::data::Bucket;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{predict, AblationConfig, Model, ModelConfig};
use crate::msda::Aggregation;
use crate::optim::{OptimConfig, OptimState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{train_epoch, EpochLog, TrainConfig};

/// Predictions of one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// `argmax η₁..η₄`; absent without stage heads.
    pub stages: Option<[usize; 4]>,
    /// Prediction of the trained final head.
    pub final_class: usize,
    pub gate: Option<usize>,
    pub sum: Option<usize>,
    pub label: usize,
    pub bucket: Bucket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Corrected wrong heads count up, destroyed right heads count down.
    #[default]
    Prose,
    /// Literal form: matching heads count up when right, mismatching
    /// heads count down when wrong.
    Equation,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(ScoreMode::Prose),
            "equation" => Ok(ScoreMode::Equation),
            other => Err(Error::Config(format!("score mode must be prose or equation, got `{other}`"))),
        }
    }
}

/// Score in `[-4, 4]` of one aggregated prediction against the four
/// pre-aggregation predictions.
pub fn correction_score(pre: &[usize; 4], post: usize, label: usize, mode: ScoreMode) -> i32 {
    let right = pre.iter().filter(|&&p| p == label).count() as i32;
    let wrong = 4 - right;
    match (post == label, mode) {
        (true, ScoreMode::Prose) => wrong,
        (false, ScoreMode::Prose) => -right,
        (true, ScoreMode::Equation) => right,
        (false, ScoreMode::Equation) => -wrong,
    }
}

/// Sum of correction scores of one aggregation over the records, or
/// `None` if the records lack stage predictions or that aggregation.
pub fn aggregate_score(records: &[EvalRecord], agg: Aggregation, mode: ScoreMode) -> Option<i64> {
    let mut total = 0i64;
    for r in records {
        let pre = r.stages?;
        let post = match agg {
            Aggregation::Gate => r.gate?,
            Aggregation::Sum => r.sum?,
        };
        total += correction_score(&pre, post, r.label, mode) as i64;
    }
    Some(total)
}

/// Percentage with 0.1 resolution.
pub fn percent(correct: usize, total: usize) -> f64 {
    (1000.0 * correct as f64 / total as f64).round() / 10.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketedAccuracy {
    /// `(correct, total)` per non-empty bucket.
    pub counts: BTreeMap<Bucket, (usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl BucketedAccuracy {
    /// Percentage of a bucket, absent when it has no records.
    pub fn bucket(&self, b: Bucket) -> Option<f64> {
        self.counts.get(&b).map(|&(c, n)| percent(c, n))
    }

    pub fn overall(&self) -> Option<f64> {
        (self.total > 0).then(|| percent(self.correct, self.total))
    }
}

/// Accuracy of the final head per bucket and overall.
pub fn bucketed_accuracy(records: &[EvalRecord]) -> BucketedAccuracy {
    bucketed_accuracy_by(records, |r| r.final_class)
}

pub fn bucketed_accuracy_by(records: &[EvalRecord], pred: impl Fn(&EvalRecord) -> usize) -> BucketedAccuracy {
    let mut counts: BTreeMap<Bucket, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for r in records {
        let hit = pred(r) == r.label;
        let e = counts.entry(r.bucket).or_default();
        e.0 += hit as usize;
        e.1 += 1;
        correct += hit as usize;
    }
    BucketedAccuracy {
        counts,
        correct,
        total: records.len(),
    }
}

/// Buckets by bounding-box area quartiles: the lowest quarter is small,
/// the highest quarter large, the rest medium. Ties keep input order.
pub fn quartile_buckets(areas: &[f64]) -> Vec<Bucket> {
    let n = areas.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| areas[a].total_cmp(&areas[b]).then(a.cmp(&b)));
    let mut out = vec![Bucket::Medium; n];
    for (rank, &i) in order.iter().enumerate() {
        if 4 * rank < n {
            out[i] = Bucket::Small;
        } else if 4 * rank >= 3 * n {
            out[i] = Bucket::Large;
        }
    }
    out
}

/// Evaluation-mode predictions over a split (center-cropped views).
pub fn evaluate(model: &Model, store: &ParamStore, split: &LoadedSplit) -> Result<Vec<EvalRecord>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    split
        .images
        .iter()
        .zip(&split.entries)
        .map(|(img, e)| {
            let view = augment(img, false, &mut unused)?;
            let (p, _) = predict(model, store, &view)?;
            Ok(EvalRecord {
                stages: p.stages,
                final_class: p.final_class,
                gate: p.gate,
                sum: p.sum,
                label: e.label,
                bucket: e.bucket,
            })
        })
        .collect()
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

pub struct TrainedRun {
    pub model: Model,
    pub store: ParamStore,
    pub optim: OptimState,
    pub logs: Vec<EpochLog>,
}

/// Initialize from `spec.seed` and train to completion.
pub fn train_run(spec: &RunSpec, data: &LoadedSplit, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedRun> {
    spec.train.validate()?;
    spec.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (model, mut store) = Model::new(&spec.model, &mut rng)?;
    let total = spec.train.epochs * spec.train.steps_per_epoch(data.len());
    let mut optim = OptimState::new(&store, &spec.optim, total);
    let mut logs = Vec::with_capacity(spec.train.epochs);
    for epoch in 0..spec.train.epochs {
        let log = train_epoch(&model, &mut store, &mut optim, data, epoch, spec.seed, &spec.train, &spec.loss)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainedRun {
        model,
        store,
        optim,
        logs,
    })
}

pub const ABLATION_HEADER: &str = "config,seed,acc_total,acc_small,acc_medium,acc_large,score_gate,score_sum";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub config: String,
    pub seed: u64,
    pub accuracy: BucketedAccuracy,
    pub score_gate: Option<i64>,
    pub score_sum: Option<i64>,
}

impl MetricsRow {
    pub fn from_records(config: &str, seed: u64, records: &[EvalRecord], mode: ScoreMode) -> Self {
        MetricsRow {
            config: config.to_string(),
            seed,
            accuracy: bucketed_accuracy(records),
            score_gate: aggregate_score(records, Aggregation::Gate, mode),
            score_sum: aggregate_score(records, Aggregation::Sum, mode),
        }
    }

    pub fn csv_row(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("NA".to_string(), |p| format!("{p:.1}"));
        let int = |v: Option<i64>| v.map_or("NA".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.config,
            self.seed,
            pct(self.accuracy.overall()),
            pct(self.accuracy.bucket(Bucket::Small)),
            pct(self.accuracy.bucket(Bucket::Medium)),
            pct(self.accuracy.bucket(Bucket::Large)),
            int(self.score_gate),
            int(self.score_sum)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Train and evaluate every toggle row under every seed.
pub fn run_ablation(
    base: &RunSpec,
    rows: &[AblationConfig],
    seeds: &[u64],
    train: &LoadedSplit,
    test: &LoadedSplit,
    mode: ScoreMode,
    mut progress: impl FnMut(&str, u64, &EpochLog),
) -> Result<Vec<MetricsRow>> {
    for r in rows {
        r.validate()?;
    }
    let mut out = Vec::with_capacity(rows.len() * seeds.len());
    for row in rows {
        for &seed in seeds {
            let mut spec = base.clone();
            spec.model.ablation = *row;
            spec.seed = seed;
            let run = train_run(&spec, train, |log| progress(row.label(), seed, log))?;
            let records = evaluate(&run.model, &run.store, test)?;
            out.push(MetricsRow::from_records(row.label(), seed, &records, mode));
        }
    }
    Ok(out)
}

pub const OVERLAY_COLOR: [f64; 3] = [1.0, 0.0, 0.0];

/// Side in pixels of one merged cell of 1-based `stage`.
pub fn overlay_cell(patch_size: usize, stage: usize) -> usize {
    2 * patch_size * (1 << (stage - 1))
}

/// Copy of `image` with a one-pixel red outline around every selected
/// merged cell of `grid` (cells of `cell` pixels).
pub fn render_selection_overlay(
    image: &Tensor,
    indices: &[usize],
    grid: (usize, usize),
    cell: usize,
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Contract(format!("overlay needs an [h, w, 3] image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if grid.0 * cell > h || grid.1 * cell > w {
        return Err(Error::Contract(format!(
            "{}x{} grid of {cell}px cells exceeds a {h}x{w} image",
            grid.0, grid.1
        )));
    }
    let mut out = image.clone();
    for &i in indices {
        if i >= grid.0 * grid.1 {
            return Err(Error::Contract(format!(
                "token index {i} outside a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let (y0, x0) = ((i / grid.1) * cell, (i % grid.1) * cell);
        for y in y0..y0 + cell {
            for x in x0..x0 + cell {
                if y == y0 || y == y0 + cell - 1 || x == x0 || x == x0 + cell - 1 {
                    out.data_mut()[(y * w + x) * 3..][..3].copy_from_slice(&OVERLAY_COLOR);
                }
            }
        }
    }
    Ok(out)
}
