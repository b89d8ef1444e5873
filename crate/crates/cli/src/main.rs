//! `mdcm`: dataset generation, training, evaluation, the gating-score
//! experiment and selection overlays.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime errors.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mdcm::checkpoint::Checkpoint;
use mdcm::config::RunConfig;
use mdcm::data::augment::augment;
use mdcm::data::manifest::{build_split, load_split, manifest_path, read_meta, DatasetMeta, LoadedSplit, Split};
use mdcm::data::ppm::save_ppm;
use mdcm::data::SynthSpec;
use mdcm::eval::{
    aggregate_score, evaluate, metrics_csv, overlay_cell, quartile_buckets, render_selection_overlay,
    run_ablation, MetricsRow, ScoreMode,
};
use mdcm::model::{predict, AblationConfig, Model};
use mdcm::msda::Aggregation;
use mdcm::optim::OptimState;
use mdcm::params::ParamStore;
use mdcm::train::{train_epoch, LOG_HEADER};
use mdcm::Error;

const SEED_ENV: &str = "MDCM_SEED";

#[derive(Parser)]
#[command(name = "mdcm", version, about = "Multi-scale token selection classifier on synthetic glyph images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset commands.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train a model and write its log, config echo and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and print metrics CSV.
    Eval(EvalArgs),
    /// Write per-stage token-selection overlays for one test sample.
    Visualize(VisualizeArgs),
    /// Print the aggregation correction scores of gated and summed logits.
    ScoreGate(CheckpointArgs),
    /// Train and evaluate every ablation row over several seeds.
    Ablation(AblationArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate the synthetic dataset.
    Gen(DataGenArgs),
}

#[derive(Args)]
struct DataGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (default: $MDCM_SEED, else 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 256)]
    test: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Background clutter density in [0, 1].
    #[arg(long)]
    density: Option<f64>,
    /// Glyph cell side as a fraction of the object side.
    #[arg(long)]
    glyph_cell: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (default: config file, else $MDCM_SEED, else 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for the log, config echo and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs (counted from the start of the
    /// schedule) and write the final checkpoint there.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Aggregation used for the final prediction (overrides the config).
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Bucket by bounding-box area quartiles instead of generator buckets.
    #[arg(long)]
    quartile: bool,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Index into the test manifest.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Directory for the per-seed CSVs.
    #[arg(long)]
    out: PathBuf,
}

/// Error split by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then `$MDCM_SEED`, then the config file, then flags.
fn resolve_config(a: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &a.data {
        cfg.data_dir = Some(dir.clone());
    }
    for s in &a.set {
        cfg.set_assignment(s).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> std::result::Result<&Path, Failure> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Failure::Usage("no dataset: pass --data or set data.dir".into()))
}

fn load(cfg: &RunConfig, split: Split) -> std::result::Result<LoadedSplit, Failure> {
    let dir = data_dir(cfg)?;
    let meta = read_meta(dir)?;
    if meta.spec.n_classes != cfg.model.backbone.n_classes {
        return Err(Failure::Usage(format!(
            "dataset has {} classes but backbone.classes = {}",
            meta.spec.n_classes, cfg.model.backbone.n_classes
        )));
    }
    Ok(load_split(dir, split)?)
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Fresh model for `cfg`, with weights from `checkpoint` if given.
fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> std::result::Result<(Model, ParamStore), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = Model::new(&cfg.model, &mut rng)?;
    if let Some(path) = checkpoint {
        Checkpoint::load(path)?.restore(&mut store, None)?;
    }
    Ok((model, store))
}

fn cmd_data_gen(a: &DataGenArgs) -> CmdResult {
    let mut spec = SynthSpec {
        n_classes: a.classes,
        ..SynthSpec::default()
    };
    if let Some(d) = a.density {
        spec.clutter_density = d;
    }
    if let Some(g) = a.glyph_cell {
        spec.glyph_cell = g;
    }
    spec.validate().map_err(usage)?;
    let meta = DatasetMeta {
        spec,
        seed: a.seed.or(env_seed()?).unwrap_or(0),
        n_train: a.train,
        n_test: a.test,
    };
    let hash = build_split(&a.out, &meta)?;
    println!("manifest {}", manifest_path(&a.out, Split::Train).display());
    println!("manifest {}", manifest_path(&a.out, Split::Test).display());
    println!("hash {hash}");
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a.cfg)?;
    let data = load(&cfg, Split::Train)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.render())?;

    let (model, mut store) = build_model(&cfg, None)?;
    let steps = cfg.train.steps_per_epoch(data.len());
    let mut optim = OptimState::new(&store, &cfg.optim, cfg.train.epochs * steps);
    let log_path = a.out.join("train_log.csv");
    let mut log_text = format!("{LOG_HEADER}\n");
    if let Some(path) = &a.resume {
        Checkpoint::load(path)?.restore(&mut store, Some(&mut optim))?;
        if optim.step % steps != 0 {
            return Err(Failure::Runtime(format!(
                "checkpoint step {} is not at an epoch boundary ({steps} steps per epoch)",
                optim.step
            )));
        }
        if let Ok(existing) = std::fs::read_to_string(&log_path) {
            log_text = existing;
        }
    }
    let start = optim.step / steps;
    // Drop log rows past the checkpoint, e.g. when resuming from best.ckpt.
    log_text = log_text.lines().take(start + 1).map(|l| format!("{l}\n")).collect();
    let end = a.stop_after.map_or(cfg.train.epochs, |n| n.min(cfg.train.epochs));

    // Resumed runs only replace best.ckpt when they beat the logged epochs.
    let mut best = log_text
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max);
    for epoch in start..end {
        let log = train_epoch(&model, &mut store, &mut optim, &data, epoch, cfg.seed, &cfg.train, &cfg.loss)?;
        eprintln!("epoch {}/{} {}", epoch + 1, cfg.train.epochs, log.csv_row());
        log_text.push_str(&log.csv_row());
        log_text.push('\n');
        write(&log_path, &log_text)?;
        if log.acc > best {
            best = log.acc;
            Checkpoint::capture(&store, &optim).save(&a.out.join("best.ckpt"))?;
        }
    }
    let final_path = a.out.join("final.ckpt");
    Checkpoint::capture(&store, &optim).save(&final_path)?;
    println!("log {}", log_path.display());
    println!("checkpoint {}", final_path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let mut cfg = resolve_config(&a.ck.cfg)?;
    if let Some(agg) = a.aggregation {
        cfg.model.aggregation = agg;
    }
    let test = load(&cfg, Split::Test)?;
    let (model, store) = build_model(&cfg, Some(&a.ck.checkpoint))?;
    let mut records = evaluate(&model, &store, &test)?;
    if a.quartile {
        let areas: Vec<f64> = test.entries.iter().map(|e| (e.bbox.w * e.bbox.h) as f64).collect();
        for (r, b) in records.iter_mut().zip(quartile_buckets(&areas)) {
            r.bucket = b;
        }
    }
    let row = MetricsRow::from_records(cfg.model.ablation.label(), cfg.seed, &records, cfg.score_mode);
    let csv = metrics_csv(&[row]);
    print!("{csv}");
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    Ok(())
}

fn cmd_visualize(a: &VisualizeArgs) -> CmdResult {
    let cfg = resolve_config(&a.ck.cfg)?;
    if !cfg.model.ablation.msts {
        return Err(Failure::Usage("overlays need msts.enabled = true".into()));
    }
    let test = load(&cfg, Split::Test)?;
    let image = test.images.get(a.sample).ok_or_else(|| {
        Failure::from(Error::Lookup(format!(
            "sample {} not in the test manifest ({} samples)",
            a.sample,
            test.len()
        )))
    })?;
    let (model, store) = build_model(&cfg, Some(&a.ck.checkpoint))?;
    let view = augment(image, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (_, selections) = predict(&model, &store, &view)?;
    create_dir(&a.out)?;
    let b = &cfg.model.backbone;
    for (i, sel) in selections.iter().enumerate() {
        let cell = overlay_cell(b.patch_size, i + 1);
        let grid = (b.image_h / cell, b.image_w / cell);
        let overlay = render_selection_overlay(&view, sel, grid, cell)?;
        let path = a.out.join(format!("overlay_stage{}.ppm", i + 1));
        save_ppm(&path, &overlay)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_score_gate(a: &CheckpointArgs) -> CmdResult {
    let cfg = resolve_config(&a.cfg)?;
    let test = load(&cfg, Split::Test)?;
    let (model, store) = build_model(&cfg, Some(&a.checkpoint))?;
    let records = evaluate(&model, &store, &test)?;
    let na = |v: Option<i64>| v.map_or("NA".to_string(), |s| s.to_string());
    println!("mode,score_gate,score_sum");
    for (name, mode) in [("prose", ScoreMode::Prose), ("equation", ScoreMode::Equation)] {
        println!(
            "{name},{},{}",
            na(aggregate_score(&records, Aggregation::Gate, mode)),
            na(aggregate_score(&records, Aggregation::Sum, mode))
        );
    }
    Ok(())
}

fn cmd_ablation(a: &AblationArgs) -> CmdResult {
    let cfg = resolve_config(&a.cfg)?;
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    let train = load(&cfg, Split::Train)?;
    let test = load(&cfg, Split::Test)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.render())?;
    let rows = [
        AblationConfig::BASELINE,
        AblationConfig::MSTS,
        AblationConfig::MSTS_MSDA,
        AblationConfig::FULL,
    ];
    let metrics = run_ablation(&cfg.run_spec(), &rows, &a.seeds, &train, &test, cfg.score_mode, |row, seed, log| {
        eprintln!("{row} seed {seed} {}", log.csv_row());
    })?;
    for &seed in &a.seeds {
        let per_seed: Vec<MetricsRow> = metrics.iter().filter(|m| m.seed == seed).cloned().collect();
        write(&a.out.join(format!("ablation_seed{seed}.csv")), &metrics_csv(&per_seed))?;
    }
    let all = metrics_csv(&metrics);
    write(&a.out.join("ablation.csv"), &all)?;
    print!("{all}");
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Data {
            command: DataCommand::Gen(a),
        } => cmd_data_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::ScoreGate(a) => cmd_score_gate(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

