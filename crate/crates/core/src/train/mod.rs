//! Two-stage training: masked pretraining, then per-task fine-tuning.

mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{AdamW, BETA1, BETA2, EPS, WEIGHT_DECAY};
pub use schedule::CosineSchedule;

use crate::checkpoint::CheckpointError;
use crate::data::{compute_metrics, MetricReport, Prepared, Task};
use crate::image::{sample_mask, ImageError, MaskSpec};
use crate::losses::{
    cls_loss, dc_loss_to_target, finetune_loss, itc_loss, pretrain_loss, reconstruction_loss, si_loss,
    similarity_distribution, EntropySign, LossError, LossParts, LossWeights, RecNorm, DEFAULT_TAU,
};
use crate::model::{
    Ctx, ModelError, SyDes, VisualCache, AGGREGATOR, COMPONENTS, HEAD, IMAGE_DECODER, IMAGE_ENCODER, TEXT_DECODER,
    TEXT_ENCODER,
};
use crate::rng::{RngState, Stream};
use crate::tensor::{concat, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("stage config: {0}")]
    Config(String),
    #[error("{stage} epoch {epoch} step {step}: non-finite {what}")]
    NonFinite { stage: Stage, epoch: usize, step: usize, what: String },
}

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub mask_ratio: f64,
    pub weights: LossWeights,
    /// Base learning rate per trainable component.
    pub lr: BTreeMap<String, f64>,
    /// Multiplier applied to every base rate.
    pub lr_scale: f64,
    pub warmup_frac: f64,
    /// Final rate as a fraction of the base.
    pub lr_floor_frac: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub frozen: Vec<String>,
    /// Write a checkpoint every this many epochs; the last epoch is always
    /// written. Zero means last only.
    pub checkpoint_every: usize,
}

fn rates(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_owned(), v)).collect()
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            mask_ratio: 0.75,
            weights: LossWeights::pretrain(),
            lr: rates(&[(IMAGE_ENCODER, 5e-6), (TEXT_ENCODER, 5e-5), (IMAGE_DECODER, 1e-4), (AGGREGATOR, 1e-4)]),
            lr_scale: 1.0,
            warmup_frac: 0.15,
            lr_floor_frac: 0.01,
            weight_decay: WEIGHT_DECAY,
            epochs: 50,
            batch_size: 64,
            frozen: vec![TEXT_DECODER.into(), HEAD.into()],
            checkpoint_every: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            mask_ratio: 0.0,
            weights: LossWeights::finetune(),
            lr: rates(&[(TEXT_ENCODER, 1e-4), (TEXT_DECODER, 2e-4), (HEAD, 1e-4)]),
            lr_scale: 1.0,
            warmup_frac: 0.10,
            lr_floor_frac: 0.01,
            weight_decay: WEIGHT_DECAY,
            epochs: 50,
            batch_size: 64,
            frozen: vec![IMAGE_ENCODER.into(), IMAGE_DECODER.into(), AGGREGATOR.into()],
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if stage == Stage::Pretrain && self.weights.rec > 0.0 && self.mask_ratio == 0.0 {
            return bad("pretraining with a reconstruction term needs mask_ratio > 0".into());
        }
        self.weights.validate().map_err(TrainError::Config)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad(format!("lr_scale must be positive, got {}", self.lr_scale));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.lr_floor_frac) {
            return bad("warmup_frac and lr_floor_frac must lie in [0, 1]".into());
        }
        for c in self.frozen.iter().chain(self.lr.keys()) {
            if !COMPONENTS.contains(&c.as_str()) {
                return bad(format!("unknown component {c:?}; expected one of {}", COMPONENTS.join(", ")));
            }
        }
        for c in COMPONENTS {
            if !self.frozen.iter().any(|f| f == c) {
                match self.lr.get(c) {
                    Some(&r) if r >= 0.0 && r.is_finite() => {}
                    Some(r) => return bad(format!("lr.{c} must be nonnegative, got {r}")),
                    None => return bad(format!("trainable component {c} has no learning rate")),
                }
            }
        }
        Ok(())
    }
}

/// Options shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub tau: f64,
    pub rec_norm: RecNorm,
    pub entropy_sign: EntropySign,
    pub seed: u64,
    /// Directory for checkpoints and the metric log; `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            rec_norm: RecNorm::default(),
            entropy_sign: EntropySign::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Mean of each active loss term over the epoch's batches.
    pub parts: BTreeMap<&'static str, f64>,
    /// Rate of each trainable component at the epoch's last step.
    pub lrs: BTreeMap<String, f64>,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub task: Option<Task>,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    pub metric_log: Option<PathBuf>,
    /// Kept patches per sub-image under the stage's mask ratio.
    pub kept_per_subimage: usize,
}

impl StageReport {
    pub fn csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.epochs.first() else { return out };
        let mut header = vec!["epoch".to_owned(), "loss".to_owned()];
        header.extend(first.parts.keys().map(|k| k.to_string()));
        header.extend(first.lrs.keys().map(|k| format!("lr_{k}")));
        if first.val.is_some() {
            header.extend(["val_precision", "val_recall", "val_macro_f1", "val_accuracy"].map(String::from));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), format!("{:e}", e.loss)];
            row.extend(e.parts.values().map(|v| format!("{v:e}")));
            row.extend(e.lrs.values().map(|v| format!("{v:e}")));
            if let Some(v) = &e.val {
                row.extend([v.precision, v.recall, v.macro_f1, v.accuracy].map(|x| format!("{x:e}")));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn checkpoint_name(stage: Stage, epoch: usize) -> String {
    format!("{}-epoch{epoch}.ckpt", stage.name())
}

fn log_name(stage: Stage, task: Option<Task>) -> String {
    match task {
        Some(t) => format!("{}-{}-metrics.csv", stage.name(), t.name()),
        None => format!("{}-metrics.csv", stage.name()),
    }
}

/// Applies the stage's frozen set. In fine-tuning, heads of other tasks are
/// frozen too so weight decay does not touch them.
pub fn apply_freezing(model: &mut SyDes<f64>, cfg: &StageConfig, task: Option<Task>) {
    let frozen: Vec<&str> = cfg.frozen.iter().map(String::as_str).collect();
    model.params.set_frozen_components(&frozen);
    if let Some(task) = task {
        for other in Task::ALL.into_iter().filter(|&t| t != task) {
            model.params.set_frozen_prefix(&format!("{HEAD}.{}.", other.name()), true);
        }
    }
}

/// Masks of sample `index` at `epoch`; each sub-image draws from its own
/// stream.
pub fn sample_masks(
    rng: &RngState,
    epoch: usize,
    index: usize,
    total: usize,
    ratio: f64,
) -> Result<Vec<MaskSpec>, ImageError> {
    (0..4)
        .map(|n| sample_mask(total, ratio, &mut rng.substream(Stream::Mask, epoch as u64, (index * 4 + n) as u64)))
        .collect()
}

fn batch_order(rng: &RngState, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.substream(Stream::Shuffle, epoch as u64, stage as u64));
    idx
}

fn normalized_rows<'a>(rows: &[Var<'a, f64>]) -> Result<Var<'a, f64>, TensorError> {
    concat(rows, 0)?.l2_normalize()
}

/// Pretraining loss terms of one batch.
pub struct PretrainTerms<'a> {
    pub parts: LossParts<'a, f64>,
    /// `S(v_cls, w_cls)`, the constant target of the consistency term.
    pub dc_target: Tensor<f64>,
    pub dc_kl: Var<'a, f64>,
}

/// Pretraining forward over a batch. `dc_target` overrides the consistency
/// target, which otherwise comes from the batch itself.
pub fn pretrain_terms<'a>(
    model: &SyDes<f64>,
    ctx: &Ctx<'a, f64>,
    batch: &[(&Prepared<f64>, Vec<MaskSpec>)],
    opts: &TrainOptions,
    dc_target: Option<&Tensor<f64>>,
) -> Result<PretrainTerms<'a>, TrainError> {
    let mut rec = Vec::with_capacity(batch.len());
    let (mut v, mut w, mut p) = (Vec::new(), Vec::new(), Vec::new());
    for (s, masks) in batch {
        let out = model.pretrain_sample(ctx, &s.input, masks)?;
        rec.push(out.rec);
        v.push(out.v_proj);
        w.push(out.w_proj);
        p.push(out.p_agg);
    }
    let (v, w, p) = (normalized_rows(&v)?, normalized_rows(&w)?, normalized_rows(&p)?);
    let target = match dc_target {
        Some(t) => ctx.constant(t),
        None => similarity_distribution(v, w, opts.tau)?.detach(),
    };
    let dc = dc_loss_to_target(p, w, target, opts.tau, opts.entropy_sign)?;
    let parts = LossParts {
        rec: Some(reconstruction_loss(&rec, opts.rec_norm)?),
        si: Some(si_loss(v, p)?),
        dc: Some(dc.total),
        itc: Some(itc_loss(v, w, opts.tau)?),
        cls: None,
    };
    Ok(PretrainTerms { parts, dc_target: target.to_tensor(), dc_kl: dc.kl })
}

/// Composite pretraining loss of one batch and its terms.
pub fn pretrain_batch<'a>(
    model: &SyDes<f64>,
    ctx: &Ctx<'a, f64>,
    batch: &[(&Prepared<f64>, Vec<MaskSpec>)],
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<(Var<'a, f64>, LossParts<'a, f64>), TrainError> {
    let terms = pretrain_terms(model, ctx, batch, opts, None)?;
    Ok((pretrain_loss(&terms.parts, &cfg.weights)?, terms.parts))
}

/// Forward pass for one fine-tuning batch.
pub fn finetune_batch<'a>(
    model: &SyDes<f64>,
    ctx: &Ctx<'a, f64>,
    task: Task,
    batch: &[(&Prepared<f64>, Option<&VisualCache<f64>>)],
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<(Var<'a, f64>, LossParts<'a, f64>), TrainError> {
    let (mut logits, mut v, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (s, cache) in batch {
        let out = model.finetune_sample(ctx, task, &s.input, *cache)?;
        logits.push(out.logits);
        v.push(out.v_proj);
        w.push(out.w_proj);
    }
    let labels: Vec<usize> = batch.iter().map(|(s, _)| s.labels.get(task)).collect();
    let ids: Vec<String> = batch.iter().map(|(s, _)| s.input.id.clone()).collect();
    let (v, w) = (normalized_rows(&v)?, normalized_rows(&w)?);
    let parts = LossParts {
        cls: Some(cls_loss(concat(&logits, 0)?, &labels, &ids)?),
        itc: Some(itc_loss(v, w, opts.tau)?),
        ..LossParts::default()
    };
    Ok((finetune_loss(&parts, &cfg.weights)?, parts))
}

fn part_values(parts: &LossParts<'_, f64>) -> Vec<(&'static str, f64)> {
    [("rec", parts.rec), ("si", parts.si), ("dc", parts.dc), ("itc", parts.itc), ("cls", parts.cls)]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v.item())))
        .collect()
}

/// Frozen image features for every sample, if the image encoder is frozen.
pub fn visual_caches(model: &SyDes<f64>, data: &[Prepared<f64>]) -> Result<Option<Vec<VisualCache<f64>>>, TrainError> {
    let frozen = model.params.iter().filter(|(_, p)| p.component() == IMAGE_ENCODER).all(|(_, p)| p.frozen);
    if !frozen {
        return Ok(None);
    }
    Ok(Some(data.iter().map(|s| model.visual_cache(&s.input)).collect::<Result<_, _>>()?))
}

/// Argmax predictions of the task head.
pub fn predict(
    model: &SyDes<f64>,
    task: Task,
    data: &[Prepared<f64>],
    caches: Option<&[VisualCache<f64>]>,
) -> Result<Vec<usize>, TrainError> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.params);
            let out = model.finetune_sample(&ctx, task, &s.input, caches.map(|c| &c[i]))?;
            let logits = out.logits.values();
            Ok(logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best })
                .0)
        })
        .collect()
}

pub fn evaluate(
    model: &SyDes<f64>,
    task: Task,
    data: &[Prepared<f64>],
    caches: Option<&[VisualCache<f64>]>,
) -> Result<MetricReport, TrainError> {
    let preds = predict(model, task, data, caches)?;
    let labels: Vec<usize> = data.iter().map(|s| s.labels.get(task)).collect();
    Ok(compute_metrics(&preds, &labels, task.num_classes()).expect("lengths and ranges match"))
}

/// Runs one stage in place on `model`. Fine-tuning requires `task` and
/// evaluates on `val` after every epoch when it is non-empty.
pub fn run_stage(
    model: &mut SyDes<f64>,
    stage: Stage,
    task: Option<Task>,
    train: &[Prepared<f64>],
    val: &[Prepared<f64>],
    cfg: &StageConfig,
    opts: &TrainOptions,
) -> Result<StageReport, TrainError> {
    cfg.validate(stage)?;
    if train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let task = match (stage, task) {
        (Stage::Finetune, None) => return Err(TrainError::Config("fine-tuning needs a task".into())),
        (Stage::Pretrain, _) => None,
        (Stage::Finetune, t) => t,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.clone(), source })?;
    }
    apply_freezing(model, cfg, task);
    let rng = RngState::new(opts.seed);
    let total = model.image_config().num_patches();
    let kept_per_subimage = crate::image::kept_count(total, cfg.mask_ratio);
    let (train_cache, val_cache) = if stage == Stage::Finetune {
        (visual_caches(model, train)?, visual_caches(model, val)?)
    } else {
        (None, None)
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.epochs * steps_per_epoch, cfg.warmup_frac, cfg.lr_floor_frac);
    let mut opt = AdamW::new(cfg.weight_decay);
    let base: BTreeMap<String, f64> = cfg.lr.iter().map(|(k, v)| (k.clone(), v * cfg.lr_scale)).collect();
    let mut report =
        StageReport { stage, task, epochs: Vec::new(), checkpoints: Vec::new(), metric_log: None, kept_per_subimage };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = batch_order(&rng, stage, epoch, train.len());
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let grads = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &model.params);
                let (loss, parts) = match stage {
                    Stage::Pretrain => {
                        let batch = chunk
                            .iter()
                            .map(|&i| Ok((&train[i], sample_masks(&rng, epoch, i, total, cfg.mask_ratio)?)))
                            .collect::<Result<Vec<_>, ImageError>>()?;
                        pretrain_batch(model, &ctx, &batch, cfg, opts)?
                    }
                    Stage::Finetune => {
                        let batch: Vec<_> =
                            chunk.iter().map(|&i| (&train[i], train_cache.as_ref().map(|c| &c[i]))).collect();
                        finetune_batch(model, &ctx, task.expect("checked"), &batch, cfg, opts)?
                    }
                };
                let values = part_values(&parts);
                if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(TrainError::NonFinite { stage, epoch, step, what: format!("{name} loss") });
                }
                for (name, v) in values {
                    *sums.entry(name).or_default() += v;
                }
                loss_sum += loss.item();
                tape.backward(loss)?
            };
            model.params.zero_grad();
            model.params.accumulate(&grads);
            if let Some((_, p)) = model
                .params
                .iter()
                .find(|(_, p)| !p.frozen && p.tensor.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
            {
                return Err(TrainError::NonFinite { stage, epoch, step, what: format!("gradient of {}", p.name) });
            }
            let factor = schedule.factor(step);
            opt.step(&mut model.params, |p| base.get(p.component()).copied().unwrap_or(0.0) * factor);
            model.params.zero_grad();
            step += 1;
            batches += 1;
        }
        let lrs = base
            .iter()
            .filter(|(k, _)| !cfg.frozen.contains(k))
            .map(|(k, v)| (k.clone(), v * schedule.factor(step - 1)))
            .collect();
        let val_report = match task {
            Some(t) if !val.is_empty() => Some(evaluate(model, t, val, val_cache.as_deref())?),
            _ => None,
        };
        let n = batches as f64;
        report.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            parts: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            lrs,
            val: val_report,
        });
        if let Some(dir) = &opts.out_dir {
            let due = epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0);
            if due {
                let path = dir.join(checkpoint_name(stage, epoch));
                model.checkpoint(rng, stage.name(), epoch, task).save(&path)?;
                report.checkpoints.push(path);
            }
            let log = dir.join(log_name(stage, task));
            write_file(&log, &report.csv())?;
            report.metric_log = Some(log);
        }
    }
    Ok(report)
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|source| TrainError::Io { path: path.to_owned(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rates() {
        let p = StageConfig::pretrain();
        assert_eq!(p.lr[IMAGE_ENCODER], 5e-6);
        assert_eq!(p.lr[TEXT_ENCODER], 5e-5);
        assert_eq!(p.lr[IMAGE_DECODER], 1e-4);
        let f = StageConfig::finetune();
        assert_eq!(f.lr[TEXT_ENCODER], 1e-4);
        assert_eq!(f.lr[TEXT_DECODER], 2e-4);
        assert_eq!(f.lr[HEAD], 1e-4);
        p.validate(Stage::Pretrain).unwrap();
        f.validate(Stage::Finetune).unwrap();
    }

    #[test]
    fn missing_rate_rejected() {
        let mut p = StageConfig::pretrain();
        p.lr.remove(AGGREGATOR);
        assert!(p.validate(Stage::Pretrain).unwrap_err().to_string().contains("aggregator"));
        let mut p = StageConfig::pretrain();
        p.frozen.push("decoder".into());
        assert!(p.validate(Stage::Pretrain).is_err());
    }

    #[test]
    fn checkpoint_names() {
        assert_eq!(checkpoint_name(Stage::Pretrain, 30), "pretrain-epoch30.ckpt");
        assert_eq!(checkpoint_name(Stage::Finetune, 3), "finetune-epoch3.ckpt");
    }
}
