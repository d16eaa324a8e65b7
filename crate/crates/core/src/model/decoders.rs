use rand::Rng;

use super::layers::{causal_pad_mask, Ctx, DecoderBlock, LayerNorm, Linear, Mlp};
use super::{DecoderConfig, EncoderConfig, ModelError};
use crate::image::MaskSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor, Var};
use crate::text::TextSequence;

const EMBED_STD: f64 = 0.02;

/// Decoder input: mask-token rows (ascending masked index) followed by the
/// projected visible rows (CLS, then kept patches).
pub struct DecoderInput<'a, T> {
    pub d_in: Var<'a, T>,
    pub num_masked: usize,
}

pub struct Reconstruction<'a, T> {
    /// `[|masked|, patch_dim]`, row `i` predicts patch `spec.masked[i]`;
    /// `None` when nothing was masked.
    pub pixels: Option<Var<'a, T>>,
    /// Sub-image global representation, `[1, C2]`.
    pub z: Var<'a, T>,
}

pub struct FusedText<'a, T> {
    /// `[S-1, C2]`, CLS row excluded.
    pub w_tilde: Var<'a, T>,
    /// Per-head cross-attention of the last block, `[S-1, kv_rows]`.
    pub cross_attention: Vec<Var<'a, T>>,
}

/// Text-guided image decoder.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub proj: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub gate_img: Linear,
    pub gate_txt: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub pixel_head: Linear,
    pub z_head: Linear,
    num_patches: usize,
}

impl ImageDecoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        patch_dim: usize,
        num_patches: usize,
        rng: &mut R,
    ) -> Self {
        let c2 = enc.text_dim;
        let name = "image_decoder";
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), enc.image_dim, c2, true, rng),
            mask_token: store.init(format!("{name}.mask_token"), &[1, c2], Init::Normal(EMBED_STD), rng),
            pos: store.init(format!("{name}.pos"), &[num_patches + 1, c2], Init::Normal(EMBED_STD), rng),
            gate_img: Linear::new(store, &format!("{name}.gate_img"), c2, 1, true, rng),
            gate_txt: Linear::new(store, &format!("{name}.gate_txt"), c2, 1, false, rng),
            blocks: (0..dec.image_layers)
                .map(|l| DecoderBlock::new(store, &format!("{name}.block{l}"), c2, dec.image_heads, enc.mlp_ratio, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), c2, rng),
            pixel_head: Linear::new(store, &format!("{name}.pixel_head"), c2, patch_dim, true, rng),
            z_head: Linear::new(store, &format!("{name}.z_head"), c2, c2, true, rng),
            num_patches,
        }
    }

    pub fn build_input<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        v_sub: Var<'a, T>,
        spec: &MaskSpec,
    ) -> Result<DecoderInput<'a, T>, ModelError> {
        if spec.total != self.num_patches || spec.kept.len() + spec.masked.len() != spec.total {
            return Err(ModelError::Contract(format!(
                "mask spec over {} patches ({} kept, {} masked) for a decoder of {} patches",
                spec.total,
                spec.kept.len(),
                spec.masked.len(),
                self.num_patches
            )));
        }
        if v_sub.shape()[0] != spec.kept.len() + 1 {
            return Err(ModelError::Contract(format!(
                "{} visible feature rows but mask spec keeps {} patches plus CLS",
                v_sub.shape()[0],
                spec.kept.len()
            )));
        }
        let pos = ctx.p(self.pos);
        let vis_idx: Vec<usize> = std::iter::once(0).chain(spec.kept.iter().map(|k| k + 1)).collect();
        let visible = self.proj.forward(ctx, v_sub)?.add(pos.gather_rows(&vis_idx)?)?;
        let m = spec.masked.len();
        if m == 0 {
            return Ok(DecoderInput { d_in: visible, num_masked: 0 });
        }
        let mask_idx: Vec<usize> = spec.masked.iter().map(|k| k + 1).collect();
        let tokens = ctx.p(self.mask_token).gather_rows(&vec![0; m])?.add(pos.gather_rows(&mask_idx)?)?;
        Ok(DecoderInput { d_in: concat(&[tokens, visible], 0)?, num_masked: m })
    }

    /// Mean over the non-padding rows of `W`, shape `[C2]`.
    pub fn pooled_text<'a, T: Scalar>(&self, w: Var<'a, T>, seq: &TextSequence) -> Result<Var<'a, T>, ModelError> {
        let rows: Vec<usize> = (0..seq.len()).filter(|&t| !seq.is_pad(t)).collect();
        Ok(w.gather_rows(&rows)?.mean_axis(0)?)
    }

    /// Row-wise gate `g = sigmoid(D w_d + p w_p + b)` and
    /// `W_comb = g * D + (1 - g) * p`.
    pub fn gated_fusion<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        d_in: Var<'a, T>,
        pooled: Var<'a, T>,
    ) -> Result<Var<'a, T>, ModelError> {
        let shape = d_in.shape();
        let (rows, dim) = (shape[0], shape[1]);
        let p_row = pooled.reshape(&[1, dim])?;
        let logit = self.gate_img.forward(ctx, d_in)?.add(self.gate_txt.forward(ctx, p_row)?.reshape(&[1])?)?;
        let g = logit.sigmoid();
        let ones_c = ctx.constant(&Tensor::full(&[1, dim], T::one()));
        let ones_r = ctx.constant(&Tensor::full(&[rows, 1], T::one()));
        let g_full = g.matmul(ones_c)?;
        let keep = g.neg().shift(T::one()).matmul(ones_c)?;
        let p_full = ones_r.matmul(p_row)?;
        Ok(g_full.mul(d_in)?.add(keep.mul(p_full)?)?)
    }

    /// Self-attention over `D_in`, cross-attention into `W_comb`, then the
    /// pixel head on mask rows and the z head on the CLS row.
    pub fn decode<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        input: &DecoderInput<'a, T>,
        w_comb: Var<'a, T>,
    ) -> Result<Reconstruction<'a, T>, ModelError> {
        let mut x = input.d_in;
        for b in &self.blocks {
            x = b.forward(ctx, x, w_comb, None)?.0;
        }
        let x = self.ln_f.forward(ctx, x)?;
        let m = input.num_masked;
        let pixels = if m > 0 { Some(self.pixel_head.forward(ctx, x.narrow(0, 0, m)?)?) } else { None };
        let z = self.z_head.forward(ctx, x.narrow(0, m, 1)?)?;
        Ok(Reconstruction { pixels, z })
    }
}

/// Image-guided text decoder.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub kv_proj: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
}

impl TextDecoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        rng: &mut R,
    ) -> Self {
        let c2 = enc.text_dim;
        let name = "text_decoder";
        Self {
            kv_proj: Linear::new(store, &format!("{name}.kv_proj"), enc.image_dim, c2, true, rng),
            blocks: (0..dec.text_layers)
                .map(|l| DecoderBlock::new(store, &format!("{name}.block{l}"), c2, dec.text_heads, enc.mlp_ratio, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), c2, rng),
        }
    }

    /// Non-CLS text rows query the concatenated visual features.
    pub fn decode<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        w: Var<'a, T>,
        seq: &TextSequence,
        visual: &[Var<'a, T>],
    ) -> Result<FusedText<'a, T>, ModelError> {
        let s = w.shape()[0];
        if s != seq.len() || s < 2 {
            return Err(ModelError::Contract(format!("text features have {s} rows for a sequence of {}", seq.len())));
        }
        if visual.is_empty() {
            return Err(ModelError::Contract("no visual features for text decoding".into()));
        }
        let kv = self.kv_proj.forward(ctx, concat(visual, 0)?)?;
        let pads: Vec<bool> = (0..s - 1).map(|t| seq.is_pad(t)).collect();
        let mask = causal_pad_mask::<T>(&pads);
        let mut x = w.narrow(0, 0, s - 1)?;
        let mut attn = Vec::new();
        for b in &self.blocks {
            let (y, a) = b.forward(ctx, x, kv, Some(&mask))?;
            x = y;
            attn = a;
        }
        Ok(FusedText { w_tilde: self.ln_f.forward(ctx, x)?, cross_attention: attn })
    }
}

/// Mean-pool followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub mlp: Mlp,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self { mlp: Mlp::new(store, name, dim, hidden, classes, rng), classes }
    }

    /// Logits `[1, K]`.
    pub fn classify<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, w_tilde: Var<'a, T>) -> Result<Var<'a, T>, ModelError> {
        let dim = w_tilde.shape()[1];
        let pooled = w_tilde.mean_axis(0)?.reshape(&[1, dim])?;
        Ok(self.mlp.forward(ctx, pooled)?)
    }
}
