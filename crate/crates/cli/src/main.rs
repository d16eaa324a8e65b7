//! `sydes`: data generation, two-stage training, evaluation, gradient
//! checks, and reconstruction export.
//!
//! Exit codes: 0 success, 1 usage or config, 2 data or checkpoint, 3
//! numerical failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use sydes::checkpoint::{Checkpoint, CheckpointError};
use sydes::config::{ConfigError, RunConfig};
use sydes::data::synthetic::write_corpus;
use sydes::data::{ingest_dir, DataError, Prepared, Task};
use sydes::export::{matrix_csv, reconstruct};
use sydes::gradsuite::run_suite;
use sydes::model::{ModelError, SyDes};
use sydes::pipeline::{fresh_model, Corpus, PipelineError};
use sydes::rng::RngState;
use sydes::train::{checkpoint_name, evaluate, run_stage, sample_masks, visual_caches, Stage, StageReport, TrainError};

const THREADS_VAR: &str = "SYDES_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sydes", version, about = "Bidirectional image/text model: train, evaluate, inspect")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Start from the small-corpus profile (30 epochs, batch 8) instead of
    /// the reference defaults. A config file is applied on top.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(
        long,
        global = true,
        value_parser = PossibleValuesParser::new(["sentiment", "emotion", "desire"]).map(|s| s.parse::<Task>().expect("listed"))
    )]
    task: Option<Task>,
    /// Pretraining (and reconstruction) mask ratio.
    #[arg(long, global = true, value_name = "F")]
    mask_ratio: Option<f64>,
    /// Drop the contrastive term from both stages.
    #[arg(long, global = true)]
    no_itc: bool,
    /// Output directory for checkpoints, logs, and artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Corpus directory holding the split manifests.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (images, manifests, vocabulary).
    GenData {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        validation: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Masked pretraining from a fresh model.
    Pretrain,
    /// Fine-tune one task head from a pretraining checkpoint.
    Finetune {
        /// Defaults to the last pretraining checkpoint under `--out`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics of a fine-tuned checkpoint on one split.
    Eval {
        /// Defaults to the last fine-tuning checkpoint under `--out/<task>`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(sydes::data::SPLITS))]
        split: String,
    },
    /// Finite-difference check of every loss on random small models.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Export reconstruction triptychs and attention maps.
    Reconstruct {
        /// Defaults to the last pretraining checkpoint under `--out`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(sydes::data::SPLITS))]
        split: String,
        /// Number of samples to export, from the start of the split.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m)) = self;
        f.write_str(m)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(t) => t.into(),
            e => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

/// Defaults, then the config file, then flags.
fn resolve_config(g: &Global) -> Result<RunConfig, Failure> {
    let base = if g.desk { RunConfig::desk() } else { RunConfig::default() };
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml_over(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.task {
        cfg.task = t;
    }
    if let Some(m) = g.mask_ratio {
        cfg.pretrain.mask_ratio = m;
    }
    if g.no_itc {
        cfg.pretrain.weights.itc = 0.0;
        cfg.finetune.weights.itc = 0.0;
    }
    if let Some(d) = &g.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<SyDes<f64>, Failure> {
    if !path.exists() {
        return Err(Failure::Data(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = Checkpoint::<f64>::load(path)
        .map_err(|e: CheckpointError| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(SyDes::from_checkpoint(&ckpt)?)
}

/// Corpus prepared with the geometry the model was built for.
fn corpus_for(cfg: &RunConfig, model: &SyDes<f64>) -> Result<Corpus, Failure> {
    let mut c = cfg.clone();
    c.image = model.arch.image.clone();
    c.model = model.arch.model.clone();
    let corpus = Corpus::load(&cfg.data_dir, &c)?;
    if corpus.vocab.len() != model.arch.vocab_size {
        return Err(Failure::Data(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            corpus.vocab.len(),
            model.arch.vocab_size
        )));
    }
    Ok(corpus)
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> &'a [Prepared<f64>] {
    match name {
        "train" => &corpus.train,
        "validation" => &corpus.validation,
        _ => &corpus.test,
    }
}

fn print_epochs(report: &StageReport) {
    for e in &report.epochs {
        let parts: Vec<String> = e.parts.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        let val = e.val.as_ref().map(|v| format!("  val macro-f1 {:.4} acc {:.4}", v.macro_f1, v.accuracy));
        println!("epoch {:>3}  loss {:.4}  {}{}", e.epoch, e.loss, parts.join("  "), val.unwrap_or_default());
    }
    for c in &report.checkpoints {
        println!("wrote {}", c.display());
    }
    if let Some(l) = &report.metric_log {
        println!("wrote {}", l.display());
    }
}

fn gen_data(cfg: &RunConfig, counts: [Option<usize>; 3]) -> Result<(), Failure> {
    let s = &cfg.synthetic;
    let [train, validation, test] = counts;
    let counts = [train.unwrap_or(s.train), validation.unwrap_or(s.validation), test.unwrap_or(s.test)];
    let vocab = write_corpus(&cfg.data_dir, counts, cfg.image.high_res, cfg.seed)?;
    let (_, stats) = ingest_dir(&cfg.data_dir)?;
    println!("wrote {} ({} vocabulary tokens)", cfg.data_dir.display(), vocab.len());
    print!("{}", stats.render());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<(), Failure> {
    let corpus = Corpus::load(&cfg.data_dir, cfg)?;
    let mut model = fresh_model(cfg, &corpus)?;
    let total = cfg.image.num_patches();
    println!(
        "pretraining on {} samples; mask ratio {} keeps {} of {total} patches per sub-image",
        corpus.train.len(),
        cfg.pretrain.mask_ratio,
        sydes::image::kept_count(total, cfg.pretrain.mask_ratio)
    );
    let opts = cfg.train_options(Some(cfg.out_dir.clone()));
    let report = run_stage(&mut model, Stage::Pretrain, None, &corpus.train, &[], &cfg.pretrain, &opts)?;
    print_epochs(&report);
    Ok(())
}

fn finetune(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(checkpoint_name(Stage::Pretrain, cfg.pretrain.epochs)));
    let mut model = load_checkpoint(&path)?;
    let corpus = corpus_for(cfg, &model)?;
    let task = cfg.task;
    println!("fine-tuning {task} ({} classes) from {}", task.num_classes(), path.display());
    let opts = cfg.train_options(Some(cfg.out_dir.join(task.name())));
    let report =
        run_stage(&mut model, Stage::Finetune, Some(task), &corpus.train, &corpus.validation, &cfg.finetune, &opts)?;
    print_epochs(&report);
    if let Some(v) = report.epochs.last().and_then(|e| e.val.as_ref()) {
        println!("validation:\n{}", v.render(task.labels()));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, split_name: &str) -> Result<(), Failure> {
    let task = cfg.task;
    let path = checkpoint
        .unwrap_or_else(|| cfg.out_dir.join(task.name()).join(checkpoint_name(Stage::Finetune, cfg.finetune.epochs)));
    let model = load_checkpoint(&path)?;
    let corpus = corpus_for(cfg, &model)?;
    let data = split(&corpus, split_name);
    if data.is_empty() {
        return Err(Failure::Data(format!("split {split_name} is empty")));
    }
    let caches = visual_caches(&model, data)?;
    let report = evaluate(&model, task, data, caches.as_deref())?;
    println!("{task} on {split_name} ({} samples):\n{}", data.len(), report.render(task.labels()));
    Ok(())
}

fn gradcheck(cfg: &RunConfig, cases: usize, coords: usize) -> Result<(), Failure> {
    let results = run_suite(cases, coords, cfg.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<9} {} cases, {} derivatives, max abs error {:.3e}",
            r.loss, r.cases, r.report.checked, r.report.max_abs_err
        );
        for f in r.report.failures.iter().take(5) {
            println!("    {f}");
        }
        if !r.report.passed() {
            failed.push(r.loss);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn reconstruct_cmd(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    split_name: &str,
    count: usize,
) -> Result<(), Failure> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(checkpoint_name(Stage::Pretrain, cfg.pretrain.epochs)));
    let model = load_checkpoint(&path)?;
    let corpus = corpus_for(cfg, &model)?;
    let data = split(&corpus, split_name);
    let dir = cfg.out_dir.join("reconstruct");
    fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
    let rng = RngState::new(cfg.seed);
    let total = model.image_config().num_patches();
    let s = model.text_len();
    let labels: Vec<String> = (0..s - 1).map(|i| format!("t{i}")).collect();
    for (i, sample) in data.iter().take(count).enumerate() {
        let masks =
            sample_masks(&rng, 0, i, total, cfg.pretrain.mask_ratio).map_err(|e| Failure::Usage(e.to_string()))?;
        let r = reconstruct(&model, &sample.input, &masks, cfg.task)?;
        let id = &sample.input.id;
        let img = dir.join(format!("{id}.ppm"));
        sydes::ppm::write(&img, &r.triptych).map_err(|e| Failure::Data(format!("{}: {e}", img.display())))?;
        let csv = dir.join(format!("{id}-text-attention.csv"));
        fs::write(&csv, matrix_csv(&r.text_attention, &labels)).map_err(io_failure(&csv))?;
        let alpha = r.alpha.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(",");
        let alpha_path = dir.join(format!("{id}-alpha.csv"));
        fs::write(&alpha_path, format!("tl,tr,bl,br\n{alpha}\n")).map_err(io_failure(&alpha_path))?;
        println!(
            "{id}: predicted {} of {} patches ({:.0}%), wrote {}",
            r.predicted_patches,
            r.total_patches,
            100.0 * r.predicted_patches as f64 / r.total_patches as f64,
            img.display()
        );
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| Failure::Usage(format!("{THREADS_VAR}={v:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("{THREADS_VAR}: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::GenData { train, validation, test } => gen_data(&cfg, [train, validation, test]),
        Command::Pretrain => pretrain(&cfg),
        Command::Finetune { checkpoint } => finetune(&cfg, checkpoint),
        Command::Eval { checkpoint, split } => eval(&cfg, checkpoint, &split),
        Command::Gradcheck { cases, coords } => gradcheck(&cfg, cases, coords),
        Command::Reconstruct { checkpoint, split, count } => reconstruct_cmd(&cfg, checkpoint, &split, count),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
