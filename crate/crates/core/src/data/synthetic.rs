//! Synthetic image/text corpus whose labels are recoverable from both
//! modalities: each quadrant carries a label-coded color and the caption
//! carries label words.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{manifest_path, write_manifest, DataError, Labels, Record, Task, SPLITS};
use crate::image::CHANNELS;
use crate::ppm;
use crate::rng::{RngState, Stream};
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const VOCAB_FILE: &str = "vocab.txt";
const NOISE: f64 = 0.08;

const SENTIMENT_WORDS: [[&str; 3]; 3] =
    [["great", "lovely", "wonderful"], ["ordinary", "plain", "usual"], ["awful", "terrible", "bad"]];
const EMOTION_WORDS: [[&str; 3]; 6] = [
    ["happy", "joyful", "cheerful"],
    ["sad", "gloomy", "tearful"],
    ["calm", "indifferent", "steady"],
    ["disgusted", "repulsed", "sickened"],
    ["angry", "furious", "mad"],
    ["afraid", "scared", "fearful"],
];
const DESIRE_WORDS: [[&str; 3]; 7] = [
    ["revenge", "payback", "retribution"],
    ["explore", "wonder", "discover"],
    ["friends", "party", "crowd"],
    ["family", "parents", "kids"],
    ["peace", "quiet", "rest"],
    ["love", "date", "sweetheart"],
    ["nothing", "whatever", "anything"],
];
const FILLERS: [&str; 8] = ["today", "again", "here", "now", "outside", "tonight", "somehow", "still"];

fn hue_rgb(k: usize, classes: usize, offset: f64) -> [f64; 3] {
    let h = (k as f64 / classes as f64 + offset).fract() * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn balanced<R: Rng>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    v.shuffle(rng);
    v
}

/// Top-left quadrant encodes sentiment, top-right emotion, bottom-left
/// desire; bottom-right holds stripes mixing emotion and desire colors.
pub fn render_image<R: Rng>(labels: &Labels, side: usize, rng: &mut R) -> Tensor<f64> {
    let half = side / 2;
    let colors = [hue_rgb(labels.sentiment, 3, 0.0), hue_rgb(labels.emotion, 6, 0.04), hue_rgb(labels.desire, 7, 0.08)];
    let stripe = (labels.desire % 3) + 2;
    let mut data = Vec::with_capacity(side * side * CHANNELS);
    for y in 0..side {
        for x in 0..side {
            let color = match (y < half, x < half) {
                (true, true) => colors[0],
                (true, false) => colors[1],
                (false, true) => colors[2],
                (false, false) => {
                    if (y / stripe).is_multiple_of(2) {
                        colors[1]
                    } else {
                        colors[2]
                    }
                }
            };
            for c in color {
                data.push((c + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![side, side, CHANNELS], data).expect("sized")
}

pub fn render_text<R: Rng>(labels: &Labels, rng: &mut R) -> String {
    let s = SENTIMENT_WORDS[labels.sentiment][rng.random_range(0..3)];
    let e = EMOTION_WORDS[labels.emotion][rng.random_range(0..3)];
    let d = DESIRE_WORDS[labels.desire][rng.random_range(0..3)];
    let f = FILLERS[rng.random_range(0..FILLERS.len())];
    match rng.random_range(0..3) {
        0 => format!("a {s} day {f}, feeling {e} and thinking about {d}"),
        1 => format!("so {e} {f}! what a {s} scene, all about {d}"),
        _ => format!("{d} on my mind {f}; {s} and {e}"),
    }
}

/// `n` samples with uniform label marginals per task.
pub fn generate_synthetic<R: Rng>(n: usize, side: usize, prefix: &str, rng: &mut R) -> Vec<(Record, Tensor<f64>)> {
    let s = balanced(n, Task::Sentiment.num_classes(), rng);
    let e = balanced(n, Task::Emotion.num_classes(), rng);
    let d = balanced(n, Task::Desire.num_classes(), rng);
    (0..n)
        .map(|i| {
            let labels = Labels { sentiment: s[i], emotion: e[i], desire: d[i] };
            let image = render_image(&labels, side, rng);
            let text = render_text(&labels, rng);
            let id = format!("{prefix}-{i:05}");
            let record = Record {
                image: format!("images/{id}.ppm"),
                id,
                text,
                sentiment: Task::Sentiment.labels()[labels.sentiment].to_owned(),
                emotion: Task::Emotion.labels()[labels.emotion].to_owned(),
                desire: Task::Desire.labels()[labels.desire].to_owned(),
            };
            (record, image)
        })
        .collect()
}

/// Samples of every split in [`SPLITS`] order; split `k` draws from its own
/// data stream.
pub fn synthetic_splits(counts: [usize; 3], side: usize, seed: u64) -> Vec<Vec<(Record, Tensor<f64>)>> {
    let state = RngState::new(seed);
    SPLITS
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (split, n))| generate_synthetic(n, side, split, &mut state.substream(Stream::Data, k as u64, 0)))
        .collect()
}

/// Writes `images/`, one manifest per split and the vocabulary built from
/// the training texts. `counts` follows [`SPLITS`] order.
pub fn write_corpus(dir: &Path, counts: [usize; 3], side: usize, seed: u64) -> Result<Vocab, DataError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| DataError::Io { path, source }
    };
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io(&images))?;
    let mut vocab = None;
    for (k, (split, samples)) in SPLITS.iter().zip(synthetic_splits(counts, side, seed)).enumerate() {
        for (r, img) in &samples {
            let path = dir.join(&r.image);
            ppm::write(&path, img).map_err(|source| DataError::Image { id: r.id.clone(), source })?;
        }
        let records: Vec<Record> = samples.into_iter().map(|(r, _)| r).collect();
        if k == 0 {
            vocab = Some(Vocab::build(records.iter().map(|r| r.text.as_str())));
        }
        write_manifest(&manifest_path(dir, split), &records)?;
    }
    let vocab = vocab.expect("train split written");
    vocab.save(dir.join(VOCAB_FILE))?;
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest_dir;

    fn corpus_bytes(seed: u64) -> Vec<(String, Vec<u8>)> {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), [32, 0, 0], 16, seed).unwrap();
        let mut files: Vec<_> = walk(dir.path())
            .into_iter()
            .map(|p| (p.strip_prefix(dir.path()).unwrap().display().to_string(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    }

    fn walk(p: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }

    #[test]
    fn identical_bytes_across_runs() {
        let a = corpus_bytes(5);
        assert_eq!(a.len(), 32 + 3 + 1);
        assert_eq!(a, corpus_bytes(5));
        assert_ne!(a, corpus_bytes(6));
    }

    #[test]
    fn labels_valid_and_balanced() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), [42, 7, 0], 16, 1).unwrap();
        let (sets, stats) = ingest_dir(dir.path()).unwrap();
        assert_eq!(sets["train"].len(), 42);
        let c = &stats.splits["train"];
        assert_eq!(c.sentiment, vec![14; 3]);
        assert_eq!(c.emotion, vec![7; 6]);
        assert_eq!(c.desire, vec![6; 7]);
        assert!(sets["train"].samples.iter().all(|s| s.labels.desire < 7));
    }
}
