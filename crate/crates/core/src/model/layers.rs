//! Transformer building blocks. Layers hold parameter ids only; values live
//! in the model's [`ParamStore`] and are bound per tape through [`Ctx`].

use rand::Rng;

use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tape, Tensor, TensorError, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Binding of a parameter store to a tape for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'a, T> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'a, T> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.init(format!("{name}.w"), &[fan_in, fan_out], Init::XavierUniform, rng);
        let b = bias.then(|| store.init(format!("{name}.b"), &[fan_out], Init::Zeros, rng));
        Self { w, b }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>, TensorError> {
        let y = x.matmul(ctx.p(self.w))?;
        match self.b {
            Some(b) => y.add(ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.init(format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.init(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>, TensorError> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), T::of(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>, TensorError> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices `[rows_q, rows_kv]`.
pub struct Attended<'a, T> {
    pub out: Var<'a, T>,
    pub weights: Vec<Var<'a, T>>,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// `mask`, when given, is added to the `[rows_q, rows_kv]` scores
    /// (0 to keep, `-inf` to block).
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        x: Var<'a, T>,
        kv: Var<'a, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Attended<'a, T>, TensorError> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, kv)?;
        let v = self.v.forward(ctx, kv)?;
        let dim = q.shape()[1];
        let hd = dim / self.heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mask = mask.map(|m| ctx.constant(m));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * hd, hd)?;
            let kh = k.narrow(1, h * hd, hd)?;
            let vh = v.narrow(1, h * hd, hd)?;
            let mut scores = qh.matmul(kh.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let a = scores.softmax(1)?;
            outs.push(a.matmul(vh)?);
            weights.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat(&outs, 1)? };
        Ok(Attended { out: self.o.forward(ctx, merged)?, weights })
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        x: Var<'a, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'a, T>, TensorError> {
        let h = self.ln1.forward(ctx, x)?;
        let x = x.add(self.attn.forward(ctx, h, h, mask)?.out)?;
        let h = self.ln2.forward(ctx, x)?;
        x.add(self.mlp.forward(ctx, h)?)
    }
}

/// Pre-norm block: self-attention, cross-attention over `memory`, MLP.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, dim, heads, rng),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim, rng),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    /// Returns the block output and the cross-attention weights.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        x: Var<'a, T>,
        memory: Var<'a, T>,
        self_mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'a, T>, Vec<Var<'a, T>>), TensorError> {
        let h = self.ln1.forward(ctx, x)?;
        let x = x.add(self.self_attn.forward(ctx, h, h, self_mask)?.out)?;
        let q = self.ln_q.forward(ctx, x)?;
        let kv = self.ln_kv.forward(ctx, memory)?;
        let cross = self.cross_attn.forward(ctx, q, kv, None)?;
        let x = x.add(cross.out)?;
        let h = self.ln3.forward(ctx, x)?;
        Ok((x.add(self.mlp.forward(ctx, h)?)?, cross.weights))
    }
}

/// Additive mask for causal attention over a padded sequence: query `t`
/// sees key `j` iff `j <= t` and (`j == t` or `j` is not padding).
pub fn causal_pad_mask<T: Scalar>(is_pad: &[bool]) -> Tensor<T> {
    let n = is_pad.len();
    let mut m = vec![T::zero(); n * n];
    for t in 0..n {
        for j in 0..n {
            if j > t || (j != t && is_pad[j]) {
                m[t * n + j] = T::neg_infinity();
            }
        }
    }
    Tensor::new(vec![n, n], m).expect("square mask")
}
