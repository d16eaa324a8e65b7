//! Manifest ingestion, synthetic data, and evaluation metrics.

mod labels;
pub mod metrics;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use labels::{Labels, Task, DESIRE_LABELS, EMOTION_LABELS, SENTIMENT_LABELS};
pub use metrics::{compute_metrics, ClassMetrics, MetricError, MetricReport};

use crate::image::{mixed_scale_split, patchify, ImageConfig, ImageError};
use crate::model::SampleInput;
use crate::ppm::{self, PpmError};
use crate::scalar::Scalar;
use crate::text::{tokenize, TextError, Vocab};

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("sample {id}: unknown {task} label {value:?}; allowed: {allowed}")]
    BadLabel { id: String, task: Task, value: String, allowed: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id}: image {path} not found")]
    MissingImage { id: String, path: PathBuf },
    #[error("sample {id}: {source}")]
    Image { id: String, source: PpmError },
    #[error("sample {id}: {source}")]
    Geometry { id: String, source: ImageError },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("empty dataset: {0}")]
    Empty(String),
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Image path relative to the image root.
    pub image: String,
    pub text: String,
    pub sentiment: String,
    pub emotion: String,
    pub desire: String,
}

impl Record {
    pub fn label_str(&self, task: Task) -> &str {
        match task {
            Task::Sentiment => &self.sentiment,
            Task::Emotion => &self.emotion,
            Task::Desire => &self.desire,
        }
    }

    pub fn labels(&self) -> Result<Labels, DataError> {
        let get = |task: Task| {
            let value = self.label_str(task);
            task.label_index(value).ok_or_else(|| DataError::BadLabel {
                id: self.id.clone(),
                task,
                value: value.to_owned(),
                allowed: task.labels().join(", "),
            })
        };
        Ok(Labels { sentiment: get(Task::Sentiment)?, emotion: get(Task::Emotion)?, desire: get(Task::Desire)? })
    }
}

/// Validated sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub text: String,
    pub labels: Labels,
}

impl Sample {
    pub fn to_record(&self, image_root: &Path) -> Record {
        let rel = self.image_path.strip_prefix(image_root).unwrap_or(&self.image_path);
        Record {
            id: self.id.clone(),
            image: rel.to_string_lossy().into_owned(),
            text: self.text.clone(),
            sentiment: Task::Sentiment.labels()[self.labels.sentiment].to_owned(),
            emotion: Task::Emotion.labels()[self.labels.emotion].to_owned(),
            desire: Task::Desire.labels()[self.labels.desire].to_owned(),
        }
    }
}

/// Per-task label histograms of one split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub total: usize,
    pub sentiment: Vec<usize>,
    pub emotion: Vec<usize>,
    pub desire: Vec<usize>,
}

impl LabelCounts {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a Labels>) -> Self {
        let mut c = Self {
            total: 0,
            sentiment: vec![0; Task::Sentiment.num_classes()],
            emotion: vec![0; Task::Emotion.num_classes()],
            desire: vec![0; Task::Desire.num_classes()],
        };
        for l in labels {
            c.total += 1;
            c.sentiment[l.sentiment] += 1;
            c.emotion[l.emotion] += 1;
            c.desire[l.desire] += 1;
        }
        c
    }

    pub fn task(&self, task: Task) -> &[usize] {
        match task {
            Task::Sentiment => &self.sentiment,
            Task::Emotion => &self.emotion,
            Task::Desire => &self.desire,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub splits: BTreeMap<String, LabelCounts>,
}

impl SplitStats {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (split, c) in &self.splits {
            s.push_str(&format!("{split}: {} samples\n", c.total));
            for task in Task::ALL {
                let parts: Vec<String> =
                    task.labels().iter().zip(c.task(task)).map(|(n, k)| format!("{n}={k}")).collect();
                s.push_str(&format!("  {task}: {}\n", parts.join(" ")));
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// Sorted by id.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        LabelCounts::from_labels(self.samples.iter().map(|s| &s.labels))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_owned(), source }
}

/// Parses manifest lines without touching images. Blank lines are skipped.
pub fn parse_manifest(path: &Path, contents: &str) -> Result<Vec<Record>, DataError> {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Record {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Validates labels, ids and image presence; returns samples sorted by id.
pub fn validate_records(records: Vec<Record>, image_root: &Path) -> Result<Dataset, DataError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.clone()) {
            return Err(DataError::DuplicateId(r.id));
        }
        let labels = r.labels()?;
        let image_path = image_root.join(&r.image);
        if !image_path.is_file() {
            return Err(DataError::MissingImage { id: r.id, path: image_path });
        }
        samples.push(Sample { id: r.id, image_path, text: r.text, labels });
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset { samples })
}

pub fn ingest_manifest(path: &Path, image_root: &Path) -> Result<Dataset, DataError> {
    let contents = fs::read_to_string(path).map_err(io_err(path))?;
    validate_records(parse_manifest(path, &contents)?, image_root)
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Loads every split file present in `dir`; images resolve against `dir`.
pub fn ingest_dir(dir: &Path) -> Result<(BTreeMap<String, Dataset>, SplitStats), DataError> {
    let mut sets = BTreeMap::new();
    let mut stats = SplitStats::default();
    for split in SPLITS {
        let path = manifest_path(dir, split);
        if !path.exists() {
            continue;
        }
        let ds = ingest_manifest(&path, dir)?;
        stats.splits.insert(split.to_owned(), ds.counts());
        sets.insert(split.to_owned(), ds);
    }
    Ok((sets, stats))
}

pub fn manifest_string(records: &[Record]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<(), DataError> {
    fs::write(path, manifest_string(records)).map_err(io_err(path))
}

/// Sample decoded into model inputs.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub input: SampleInput<T>,
    pub labels: Labels,
}

pub fn prepare_sample<T: Scalar>(
    sample: &Sample,
    image_cfg: &ImageConfig,
    vocab: &Vocab,
    text_len: usize,
) -> Result<Prepared<T>, DataError> {
    let image =
        ppm::read::<T>(&sample.image_path).map_err(|source| DataError::Image { id: sample.id.clone(), source })?;
    prepare_image(&sample.id, &image, &sample.text, sample.labels, image_cfg, vocab, text_len)
}

pub fn prepare_image<T: Scalar>(
    id: &str,
    image: &crate::tensor::Tensor<T>,
    text: &str,
    labels: Labels,
    image_cfg: &ImageConfig,
    vocab: &Vocab,
    text_len: usize,
) -> Result<Prepared<T>, DataError> {
    let geo = |source| DataError::Geometry { id: id.to_owned(), source };
    let image = image_cfg.apply_normalization(image);
    let b = mixed_scale_split(&image, image_cfg, id).map_err(geo)?;
    let low = patchify(&b.low, image_cfg).map_err(geo)?;
    let mut subs = Vec::with_capacity(4);
    for s in &b.subs {
        subs.push(patchify(s, image_cfg).map_err(geo)?);
    }
    let subs: [_; 4] = subs.try_into().expect("four quadrants");
    let text = tokenize(text, vocab, text_len)?;
    Ok(Prepared { input: SampleInput { id: id.to_owned(), low, subs, text }, labels })
}

pub fn prepare_dataset<T: Scalar>(
    ds: &Dataset,
    image_cfg: &ImageConfig,
    vocab: &Vocab,
    text_len: usize,
) -> Result<Vec<Prepared<T>>, DataError> {
    ds.samples.iter().map(|s| prepare_sample(s, image_cfg, vocab, text_len)).collect()
}
