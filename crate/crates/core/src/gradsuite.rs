//! Finite-difference checks of every training loss through a small random
//! model.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{Labels, Prepared, Task};
use crate::gradcheck::{check_params, FdReport, Tolerance};
use crate::image::{sample_mask, ImageConfig, MaskSpec};
use crate::losses::{pretrain_loss, LossWeights};
use crate::model::{Architecture, Ctx, ModelConfig, SampleInput, SyDes};
use crate::params::{ParamId, ParamStore};
use crate::rng::{RngState, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::text::{TextSequence, CLS, PAD, UNK};
use crate::train::{finetune_batch, pretrain_terms, StageConfig, TrainError, TrainOptions};

pub const LOSSES: [&str; 7] = ["rec", "itc", "si", "dc", "cls", "pretrain", "finetune"];

const DIM: usize = 8;
const TEXT_LEN: usize = 6;
const VOCAB: usize = 12;
const BATCH: usize = 3;

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub loss: &'static str,
    pub cases: usize,
    pub report: FdReport,
}

/// Image 8 -> 4 with 2px patches (4 patches of 12 values), width 8, text
/// length 6.
pub fn tiny_architecture() -> Architecture {
    Architecture {
        image: ImageConfig { high_res: 8, low_res: 4, patch_size: 2, normalize: None },
        model: ModelConfig::tiny(DIM, TEXT_LEN),
        vocab_size: VOCAB,
    }
}

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("sized")
}

fn random_text<R: Rng>(rng: &mut R) -> TextSequence {
    let k = rng.random_range(0..=TEXT_LEN - 2);
    let mut ids: Vec<u32> = (0..k).map(|_| rng.random_range(UNK..VOCAB as u32)).collect();
    ids.resize(TEXT_LEN - 1, PAD);
    ids.push(CLS);
    TextSequence { ids, last_real: k.checked_sub(1) }
}

/// Model, batch, and per-sample masks of one case.
pub type Case = (SyDes<f64>, Vec<Prepared<f64>>, Vec<Vec<MaskSpec>>);

/// Random model (weights jittered away from their init) and batch.
pub fn random_case(seed: u64, case: u64) -> Result<Case, TrainError> {
    let state = RngState::new(seed);
    let mut model = SyDes::new(tiny_architecture(), &RngState::new(seed ^ case.wrapping_mul(0x9e37_79b9)))?;
    let mut rng = state.substream(Stream::Probe, case, 0);
    let jitter = Normal::new(0.0, 0.2).expect("valid");
    for (_, p) in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let arch = model.arch.clone();
    let (p, pd) = (arch.image.num_patches(), arch.image.patch_dim());
    let samples = (0..BATCH)
        .map(|i| Prepared {
            input: SampleInput {
                id: format!("case{case}-{i}"),
                low: random_tensor(&[p, pd], &mut rng),
                subs: std::array::from_fn(|_| random_tensor(&[p, pd], &mut rng)),
                text: random_text(&mut rng),
            },
            labels: Labels {
                sentiment: rng.random_range(0..3),
                emotion: rng.random_range(0..6),
                desire: rng.random_range(0..7),
            },
        })
        .collect();
    let masks = (0..BATCH)
        .map(|_| (0..4).map(|_| sample_mask(p, 0.5, &mut rng)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model, samples, masks))
}

fn to_tensor_err(e: TrainError) -> TensorError {
    match e {
        TrainError::Tensor(t) => t,
        e => TensorError::Contract(e.to_string()),
    }
}

/// Value of `loss` for the given parameters. `dc_target` pins the
/// consistency target, which the loss treats as a constant.
#[allow(clippy::too_many_arguments)]
fn loss_value<'t>(
    loss: &str,
    tape: &'t Tape<f64>,
    store: &'t ParamStore<f64>,
    model: &SyDes<f64>,
    samples: &[Prepared<f64>],
    masks: &[Vec<MaskSpec>],
    task: Task,
    dc_target: Option<&Tensor<f64>>,
) -> Result<Var<'t, f64>, TrainError> {
    let ctx = Ctx::new(tape, store);
    let opts = TrainOptions::default();
    match loss {
        "cls" | "finetune" => {
            let batch: Vec<_> = samples.iter().map(|s| (s, None)).collect();
            let cfg = StageConfig::finetune();
            let (total, parts) = finetune_batch(model, &ctx, task, &batch, &cfg, &opts)?;
            Ok(if loss == "cls" { parts.cls.expect("cls term") } else { total })
        }
        _ => {
            let batch: Vec<_> = samples.iter().zip(masks).map(|(s, m)| (s, m.clone())).collect();
            let terms = pretrain_terms(model, &ctx, &batch, &opts, dc_target)?;
            let p = terms.parts;
            Ok(match loss {
                "rec" => p.rec.expect("rec"),
                "itc" => p.itc.expect("itc"),
                "si" => p.si.expect("si"),
                "dc" => p.dc.expect("dc"),
                _ => pretrain_loss(&p, &LossWeights::pretrain())?,
            })
        }
    }
}

/// Checks `coords` random parameter coordinates (drawn from parameters the
/// loss depends on) plus one random directional derivative per case.
pub fn check_loss(loss: &'static str, cases: usize, coords: usize, seed: u64) -> Result<LossCheck, TrainError> {
    let mut report = FdReport::default();
    for case in 0..cases as u64 {
        let (model, samples, masks) = random_case(seed, case)?;
        let mut rng = RngState::new(seed).substream(Stream::Probe, case, 1);
        let task = Task::ALL[rng.random_range(0..3)];
        let tape = Tape::tracking_frozen();
        let dc_target = {
            let ctx = Ctx::new(&tape, &model.params);
            let batch: Vec<_> = samples.iter().zip(&masks).map(|(s, m)| (s, m.clone())).collect();
            pretrain_terms(&model, &ctx, &batch, &TrainOptions::default(), None)?.dc_target
        };
        let live: Vec<ParamId> = {
            let tape = Tape::tracking_frozen();
            let l = loss_value(loss, &tape, &model.params, &model, &samples, &masks, task, Some(&dc_target))?;
            let g = tape.backward(l)?;
            model.params.iter().map(|(id, _)| id).filter(|&id| g.param(id).is_some()).collect()
        };
        let picks: Vec<(ParamId, usize)> = (0..coords)
            .map(|_| {
                let id = live[rng.random_range(0..live.len())];
                (id, rng.random_range(0..model.params.get(id).tensor.numel()))
            })
            .collect();
        let direction: Vec<f64> = (0..model.params.num_scalars()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = check_params(
            &model.params,
            &picks,
            Some(&direction),
            |tape, store| {
                loss_value(loss, tape, store, &model, &samples, &masks, task, Some(&dc_target)).map_err(to_tensor_err)
            },
            Tolerance::default(),
        )?;
        report.merge(r);
    }
    Ok(LossCheck { loss, cases, report })
}

pub fn run_suite(cases: usize, coords: usize, seed: u64) -> Result<Vec<LossCheck>, TrainError> {
    LOSSES.iter().map(|&l| check_loss(l, cases, coords, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_a_few_cases() {
        for r in run_suite(3, 6, 11).unwrap() {
            assert!(r.report.passed(), "{}: {:?}", r.loss, r.report.failures);
        }
    }
}
