use rand::Rng;

use super::layers::{causal_pad_mask, Ctx, EncoderBlock, LayerNorm, Linear};
use super::{EncoderConfig, ModelError};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat, Var};
use crate::text::TextSequence;

const EMBED_STD: f64 = 0.02;

/// Shared ViT encoder for the low-resolution image and every sub-image.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub itc_proj: Linear,
    num_patches: usize,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        patch_dim: usize,
        num_patches: usize,
        rng: &mut R,
    ) -> Self {
        let c1 = cfg.image_dim;
        let name = "image_encoder";
        Self {
            patch_embed: Linear::new(store, &format!("{name}.patch_embed"), patch_dim, c1, true, rng),
            cls: store.init(format!("{name}.cls"), &[1, c1], Init::Normal(EMBED_STD), rng),
            pos: store.init(format!("{name}.pos"), &[num_patches + 1, c1], Init::Normal(EMBED_STD), rng),
            blocks: (0..cfg.image_layers)
                .map(|l| EncoderBlock::new(store, &format!("{name}.block{l}"), c1, cfg.image_heads, cfg.mlp_ratio, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), c1, rng),
            itc_proj: Linear::new(store, &format!("{name}.itc_proj"), c1, cfg.text_dim, false, rng),
            num_patches,
        }
    }

    /// Projects patch rows and prepends CLS. `positions` are the original
    /// patch indices of the rows, so masked sub-images keep their layout.
    pub fn embed_patches<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        patches: Var<'a, T>,
        positions: &[usize],
    ) -> Result<Var<'a, T>, ModelError> {
        let rows = patches.shape()[0];
        if rows != positions.len() {
            return Err(ModelError::Contract(format!("{rows} patch rows but {} positions", positions.len())));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.num_patches) {
            return Err(ModelError::Contract(format!(
                "patch position {p} out of range for {} patches",
                self.num_patches
            )));
        }
        let pos = ctx.p(self.pos);
        let cls = ctx.p(self.cls).add(pos.narrow(0, 0, 1)?)?;
        if rows == 0 {
            return Ok(cls);
        }
        let idx: Vec<usize> = positions.iter().map(|p| p + 1).collect();
        let x = self.patch_embed.forward(ctx, patches)?.add(pos.gather_rows(&idx)?)?;
        Ok(concat(&[cls, x], 0)?)
    }

    /// Bidirectional transformer stack with final norm.
    pub fn encode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, tokens: Var<'a, T>) -> Result<Var<'a, T>, ModelError> {
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(ctx, x, None)?;
        }
        Ok(self.ln_f.forward(ctx, x)?)
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        patches: Var<'a, T>,
        positions: &[usize],
    ) -> Result<Var<'a, T>, ModelError> {
        let tokens = self.embed_patches(ctx, patches, positions)?;
        self.encode(ctx, tokens)
    }

    /// Maps `[1, C1]` CLS features into the shared space, unnormalized.
    pub fn project<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, v_cls: Var<'a, T>) -> Result<Var<'a, T>, ModelError> {
        Ok(self.itc_proj.forward(ctx, v_cls)?)
    }
}

/// Causal transformer over token ids; CLS sits in the last slot.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub itc_proj: Linear,
    vocab_size: usize,
    len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let c2 = cfg.text_dim;
        let name = "text_encoder";
        Self {
            tok: store.init(format!("{name}.tok"), &[vocab_size, c2], Init::Normal(EMBED_STD), rng),
            pos: store.init(format!("{name}.pos"), &[cfg.text_len, c2], Init::Normal(EMBED_STD), rng),
            blocks: (0..cfg.text_layers)
                .map(|l| EncoderBlock::new(store, &format!("{name}.block{l}"), c2, cfg.text_heads, cfg.mlp_ratio, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), c2, rng),
            itc_proj: Linear::new(store, &format!("{name}.itc_proj"), c2, c2, false, rng),
            vocab_size,
            len: cfg.text_len,
        }
    }

    /// Returns `W` with shape `[S, C2]`.
    pub fn encode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, seq: &TextSequence) -> Result<Var<'a, T>, ModelError> {
        if seq.len() != self.len {
            return Err(ModelError::Contract(format!("text length {} but encoder expects {}", seq.len(), self.len)));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(ModelError::Contract(format!("token id {id} outside vocabulary of {}", self.vocab_size)));
        }
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let mut x = ctx.p(self.tok).gather_rows(&ids)?.add(ctx.p(self.pos))?;
        let pads: Vec<bool> = (0..seq.len()).map(|t| seq.is_pad(t)).collect();
        let mask = causal_pad_mask::<T>(&pads);
        for b in &self.blocks {
            x = b.forward(ctx, x, Some(&mask))?;
        }
        Ok(self.ln_f.forward(ctx, x)?)
    }

    pub fn project<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, w_cls: Var<'a, T>) -> Result<Var<'a, T>, ModelError> {
        Ok(self.itc_proj.forward(ctx, w_cls)?)
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }
}
