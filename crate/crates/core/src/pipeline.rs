//! End-to-end runs: corpus preparation, pretraining, and per-task
//! fine-tuning from the pretrained weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::RunConfig;
use crate::data::synthetic::{synthetic_splits, VOCAB_FILE};
use crate::data::{ingest_dir, prepare_dataset, prepare_image, DataError, MetricReport, Prepared, Record, Task};
use crate::model::{Architecture, ModelError, SyDes};
use crate::rng::RngState;
use crate::text::{TextError, Vocab};
use crate::train::{evaluate, run_stage, visual_caches, Stage, StageReport, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Prepared splits and the vocabulary they were tokenized with.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Prepared<f64>>,
    pub validation: Vec<Prepared<f64>>,
    pub test: Vec<Prepared<f64>>,
}

fn prepare_records(
    samples: &[(Record, crate::Tensor)],
    cfg: &RunConfig,
    vocab: &Vocab,
) -> Result<Vec<Prepared<f64>>, DataError> {
    samples
        .iter()
        .map(|(r, img)| prepare_image(&r.id, img, &r.text, r.labels()?, &cfg.image, vocab, cfg.model.encoder.text_len))
        .collect()
}

impl Corpus {
    /// Synthetic corpus generated in memory (no 8-bit image quantization).
    pub fn synthetic(cfg: &RunConfig, counts: [usize; 3], seed: u64) -> Result<Self, DataError> {
        let splits = synthetic_splits(counts, cfg.image.high_res, seed);
        let vocab = Vocab::build(splits[0].iter().map(|(r, _)| r.text.as_str()));
        let mut prepared = splits.iter().map(|s| prepare_records(s, cfg, &vocab));
        let (train, validation, test) = (
            prepared.next().expect("three splits")?,
            prepared.next().expect("three splits")?,
            prepared.next().expect("three splits")?,
        );
        Ok(Self { vocab, train, validation, test })
    }

    /// Loads `dir` with its manifests; the vocabulary is read from
    /// `vocab.txt` when present and otherwise built from the training texts.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let (mut splits, _) = ingest_dir(dir)?;
        if !splits.contains_key("train") {
            return Err(DataError::Empty(format!("no training manifest in {}", dir.display())).into());
        }
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocab::load(&vocab_path)?
        } else {
            Vocab::build(splits.get("train").into_iter().flat_map(|d| d.samples.iter().map(|s| s.text.as_str())))
        };
        let mut take = |name: &str| -> Result<Vec<Prepared<f64>>, DataError> {
            match splits.remove(name) {
                Some(ds) => prepare_dataset(&ds, &cfg.image, &vocab, cfg.model.encoder.text_len),
                None => Ok(Vec::new()),
            }
        };
        let (train, validation, test) = (take("train")?, take("validation")?, take("test")?);
        Ok(Self { vocab, train, validation, test })
    }

    pub fn architecture(&self, cfg: &RunConfig) -> Architecture {
        Architecture { image: cfg.image.clone(), model: cfg.model.clone(), vocab_size: self.vocab.len() }
    }
}

/// Seeded fresh model for `corpus`.
pub fn fresh_model(cfg: &RunConfig, corpus: &Corpus) -> Result<SyDes<f64>, ModelError> {
    SyDes::new(corpus.architecture(cfg), &RngState::new(cfg.seed))
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub model: SyDes<f64>,
    pub report: StageReport,
    pub train_metrics: MetricReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub pretrained: SyDes<f64>,
    pub pretrain: StageReport,
    pub tasks: BTreeMap<Task, TaskOutcome>,
}

/// Fine-tunes a copy of `pretrained` on `task`; artifacts go to
/// `out/<task>/`.
pub fn finetune_task(
    pretrained: &SyDes<f64>,
    cfg: &RunConfig,
    corpus: &Corpus,
    task: Task,
    out: Option<&Path>,
) -> Result<TaskOutcome, TrainError> {
    let mut model = pretrained.clone();
    let opts = cfg.train_options(out.map(|d| d.join(task.name())));
    let report =
        run_stage(&mut model, Stage::Finetune, Some(task), &corpus.train, &corpus.validation, &cfg.finetune, &opts)?;
    let caches = visual_caches(&model, &corpus.train)?;
    let train_metrics = evaluate(&model, task, &corpus.train, caches.as_deref())?;
    Ok(TaskOutcome { model, report, train_metrics })
}

/// Pretrains a fresh model, then fine-tunes one head per entry of `tasks`.
pub fn run_pipeline(
    cfg: &RunConfig,
    corpus: &Corpus,
    tasks: &[Task],
    out: Option<&Path>,
) -> Result<PipelineOutcome, PipelineError> {
    let mut model = fresh_model(cfg, corpus)?;
    let opts = cfg.train_options(out.map(PathBuf::from));
    let pretrain = run_stage(&mut model, Stage::Pretrain, None, &corpus.train, &[], &cfg.pretrain, &opts)?;
    let tasks = tasks
        .iter()
        .map(|&t| Ok((t, finetune_task(&model, cfg, corpus, t, out)?)))
        .collect::<Result<_, TrainError>>()?;
    Ok(PipelineOutcome { pretrained: model, pretrain, tasks })
}
