//! The bidirectional image/text model.

mod config;
pub mod decoders;
pub mod encoders;
pub mod layers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use decoders::{ClassifierHead, DecoderInput, FusedText, ImageDecoder, Reconstruction, TextDecoder};
pub use encoders::{ImageEncoder, TextEncoder};
pub use layers::Ctx;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Task;
use crate::image::{select_unmasked, ImageConfig, ImageError, MaskSpec};
use crate::losses::{target_rows, Aggregator, LossError, RecPair};
use crate::params::ParamStore;
use crate::rng::{RngState, Stream};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tape, Tensor, TensorError, Var};
use crate::text::TextSequence;

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const TEXT_ENCODER: &str = "text_encoder";
pub const IMAGE_DECODER: &str = "image_decoder";
pub const TEXT_DECODER: &str = "text_decoder";
pub const HEAD: &str = "head";
pub const AGGREGATOR: &str = "aggregator";
pub const COMPONENTS: [&str; 6] = [IMAGE_ENCODER, TEXT_ENCODER, IMAGE_DECODER, TEXT_DECODER, HEAD, AGGREGATOR];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("model contract: {0}")]
    Contract(String),
    #[error("model config: {0}")]
    Config(String),
}

/// Architecture description stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image: ImageConfig,
    pub model: ModelConfig,
    pub vocab_size: usize,
}

/// Model input for one image/text pair: patch matrices of the low-resolution
/// view and the four quadrants, and the token sequence.
#[derive(Clone, Debug)]
pub struct SampleInput<T> {
    pub id: String,
    pub low: Tensor<T>,
    pub subs: [Tensor<T>; 4],
    pub text: TextSequence,
}

/// Encoder outputs for one sample.
pub struct Encoded<'a, T> {
    pub v1: Var<'a, T>,
    pub v_sub: Vec<Var<'a, T>>,
    pub w: Var<'a, T>,
}

impl<'a, T: Scalar> Encoded<'a, T> {
    pub fn v_cls(&self) -> Result<Var<'a, T>, ModelError> {
        Ok(self.v1.narrow(0, 0, 1)?)
    }

    pub fn w_cls(&self) -> Result<Var<'a, T>, ModelError> {
        let s = self.w.shape()[0];
        Ok(self.w.narrow(0, s - 1, 1)?)
    }
}

/// Pretraining forward results for one sample, before batch losses.
pub struct PretrainSample<'a, T> {
    pub rec: Vec<RecPair<'a, T>>,
    /// Shared-space projections, `[1, C2]`, unnormalized.
    pub v_proj: Var<'a, T>,
    pub w_proj: Var<'a, T>,
    pub p_agg: Var<'a, T>,
    pub alpha: Var<'a, T>,
    pub reconstructions: Vec<Reconstruction<'a, T>>,
}

/// Frozen image-encoder outputs reused across fine-tuning epochs.
#[derive(Clone, Debug)]
pub struct VisualCache<T> {
    pub v1: Tensor<T>,
    pub v_sub: Vec<Tensor<T>>,
}

pub struct FinetuneSample<'a, T> {
    pub logits: Var<'a, T>,
    pub v_proj: Var<'a, T>,
    pub w_proj: Var<'a, T>,
    pub fused: FusedText<'a, T>,
}

#[derive(Clone, Debug)]
pub struct SyDes<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub image_decoder: ImageDecoder,
    pub text_decoder: TextDecoder,
    pub aggregator: Aggregator,
    pub heads: BTreeMap<Task, ClassifierHead>,
}

impl<T: Scalar> SyDes<T> {
    /// Fresh model with weights drawn from the init stream of `rng`.
    pub fn new(arch: Architecture, rng: &RngState) -> Result<Self, ModelError> {
        arch.image.validate()?;
        arch.model.validate()?;
        if arch.vocab_size < crate::text::UNK as usize + 1 {
            return Err(ModelError::Config(format!("vocabulary of {} tokens is too small", arch.vocab_size)));
        }
        let mut r = rng.stream(Stream::Init);
        let mut store = ParamStore::new();
        let (enc, dec) = (&arch.model.encoder, &arch.model.decoder);
        let pd = arch.image.patch_dim();
        let p = arch.image.num_patches();
        let image_encoder = ImageEncoder::new(&mut store, enc, pd, p, &mut r);
        let text_encoder = TextEncoder::new(&mut store, enc, arch.vocab_size, &mut r);
        let image_decoder = ImageDecoder::new(&mut store, enc, dec, pd, p, &mut r);
        let text_decoder = TextDecoder::new(&mut store, enc, dec, &mut r);
        let aggregator = Aggregator::new(&mut store, enc.text_dim, &mut r);
        let heads = Task::ALL
            .into_iter()
            .map(|t| {
                let name = format!("{HEAD}.{}", t.name());
                (t, ClassifierHead::new(&mut store, &name, enc.text_dim, dec.head_hidden, t.num_classes(), &mut r))
            })
            .collect();
        Ok(Self { arch, params: store, image_encoder, text_encoder, image_decoder, text_decoder, aggregator, heads })
    }

    pub fn head(&self, task: Task) -> &ClassifierHead {
        &self.heads[&task]
    }

    pub fn image_config(&self) -> &ImageConfig {
        &self.arch.image
    }

    pub fn text_len(&self) -> usize {
        self.arch.model.encoder.text_len
    }

    pub fn checkpoint(&self, rng: RngState, stage: &str, epoch: usize, task: Option<Task>) -> Checkpoint<T> {
        Checkpoint {
            rng,
            meta: CheckpointMeta {
                stage: stage.to_owned(),
                epoch,
                task: task.map(|t| t.name().to_owned()),
                model: serde_json::to_value(&self.arch).expect("architecture serializes"),
            },
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, ModelError> {
        let arch: Architecture = serde_json::from_value(ckpt.meta.model.clone())
            .map_err(|e| ModelError::Config(format!("checkpoint architecture: {e}")))?;
        let mut model = Self::new(arch, &ckpt.rng)?;
        model.params.load_values(&ckpt.params).map_err(ModelError::Contract)?;
        Ok(model)
    }

    /// Encodes every view of a sample. `masks` selects kept patches of each
    /// sub-image; the low-resolution view is never masked.
    pub fn encode<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        s: &SampleInput<T>,
        masks: &[MaskSpec],
    ) -> Result<Encoded<'a, T>, ModelError> {
        if masks.len() != 4 {
            return Err(ModelError::Contract(format!("expected 4 sub-image masks, got {}", masks.len())));
        }
        let all: Vec<usize> = (0..s.low.shape()[0]).collect();
        let v1 = self.image_encoder.forward(ctx, ctx.constant(&s.low), &all)?;
        let v_sub = s
            .subs
            .iter()
            .zip(masks)
            .map(|(sub, spec)| {
                let (rows, kept) = select_unmasked(sub, spec)?;
                self.image_encoder.forward(ctx, ctx.constant(&rows), &kept)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let w = self.text_encoder.encode(ctx, &s.text)?;
        Ok(Encoded { v1, v_sub, w })
    }

    pub fn pretrain_sample<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        s: &SampleInput<T>,
        masks: &[MaskSpec],
    ) -> Result<PretrainSample<'a, T>, ModelError> {
        let enc = self.encode(ctx, s, masks)?;
        let pooled = self.image_decoder.pooled_text(enc.w, &s.text)?;
        let mut rec = Vec::with_capacity(4);
        let mut zs = Vec::with_capacity(4);
        let mut reconstructions = Vec::with_capacity(4);
        for ((v_sub, spec), sub) in enc.v_sub.iter().zip(masks).zip(&s.subs) {
            let input = self.image_decoder.build_input(ctx, *v_sub, spec)?;
            let w_comb = self.image_decoder.gated_fusion(ctx, input.d_in, pooled)?;
            let out = self.image_decoder.decode(ctx, &input, w_comb)?;
            if let Some(pred) = out.pixels {
                rec.push(RecPair { pred, target: target_rows(ctx, sub, &spec.masked)? });
            }
            zs.push(out.z);
            reconstructions.push(out);
        }
        let agg = self.aggregator.aggregate(ctx, concat(&zs, 0)?)?;
        Ok(PretrainSample {
            rec,
            v_proj: self.image_encoder.project(ctx, enc.v_cls()?)?,
            w_proj: self.text_encoder.project(ctx, enc.w_cls()?)?,
            p_agg: agg.p_agg,
            alpha: agg.alpha,
            reconstructions,
        })
    }

    /// Unmasked image features, computed on a scratch tape.
    pub fn visual_cache(&self, s: &SampleInput<T>) -> Result<VisualCache<T>, ModelError> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let full = vec![MaskSpec::full(self.arch.image.num_patches()); 4];
        let all: Vec<usize> = (0..s.low.shape()[0]).collect();
        let v1 = self.image_encoder.forward(&ctx, ctx.constant(&s.low), &all)?.to_tensor();
        let v_sub = s
            .subs
            .iter()
            .zip(&full)
            .map(|(sub, spec)| {
                let (rows, kept) = select_unmasked(sub, spec)?;
                Ok(self.image_encoder.forward(&ctx, ctx.constant(&rows), &kept)?.to_tensor())
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(VisualCache { v1, v_sub })
    }

    /// Fine-tuning forward. With `cache`, image features enter as constants;
    /// without it they are computed on `ctx` (and differentiable when the
    /// tape tracks frozen parameters).
    pub fn finetune_sample<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        task: Task,
        s: &SampleInput<T>,
        cache: Option<&VisualCache<T>>,
    ) -> Result<FinetuneSample<'a, T>, ModelError> {
        let (v1, v_sub, w) = match cache {
            Some(c) => (
                ctx.constant(&c.v1),
                c.v_sub.iter().map(|t| ctx.constant(t)).collect::<Vec<_>>(),
                self.text_encoder.encode(ctx, &s.text)?,
            ),
            None => {
                let full = vec![MaskSpec::full(self.arch.image.num_patches()); 4];
                let e = self.encode(ctx, s, &full)?;
                (e.v1, e.v_sub, e.w)
            }
        };
        self.finetune_from_features(ctx, task, &s.text, v1, &v_sub, w)
    }

    pub fn finetune_from_features<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        task: Task,
        text: &TextSequence,
        v1: Var<'a, T>,
        v_sub: &[Var<'a, T>],
        w: Var<'a, T>,
    ) -> Result<FinetuneSample<'a, T>, ModelError> {
        let visual: Vec<Var<'a, T>> = std::iter::once(v1).chain(v_sub.iter().copied()).collect();
        let fused = self.text_decoder.decode(ctx, w, text, &visual)?;
        let logits = self.head(task).classify(ctx, fused.w_tilde)?;
        let s = w.shape()[0];
        Ok(FinetuneSample {
            logits,
            v_proj: self.image_encoder.project(ctx, v1.narrow(0, 0, 1)?)?,
            w_proj: self.text_encoder.project(ctx, w.narrow(0, s - 1, 1)?)?,
            fused,
        })
    }
}
