//! Training objectives and the sub-image aggregator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::layers::{Ctx, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor, TensorError, Var};

pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss contract: {0}")]
    Contract(String),
    #[error("sample {sample}: label {label} outside [0, {classes})")]
    Label { sample: String, label: usize, classes: usize },
    #[error("composite loss is missing its {0} term")]
    MissingPart(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub si: f64,
    pub dc: f64,
    pub itc: f64,
    pub cls: f64,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        Self { rec: 1.0, si: 0.5, dc: 0.025, itc: 0.5, cls: 0.0 }
    }

    pub fn finetune() -> Self {
        Self { rec: 0.0, si: 0.0, dc: 0.0, itc: 0.4, cls: 1.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("rec", self.rec), ("si", self.si), ("dc", self.dc), ("itc", self.itc), ("cls", self.cls)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("loss weight {name} must be a nonnegative number, got {w}"));
            }
        }
        Ok(())
    }
}

/// Per-patch error of the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecNorm {
    #[default]
    SquaredL2,
    L2,
}

/// Sign applied to the entropy term of the distribution-consistency loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    #[default]
    Add,
    Subtract,
}

/// One sub-image's prediction against its masked target rows.
pub struct RecPair<'a, T> {
    pub pred: Var<'a, T>,
    pub target: Var<'a, T>,
}

/// Per sample, the per-patch errors summed over every sub-image and masked
/// patch, divided by that sample's masked count; then averaged over the
/// batch.
pub fn reconstruction_loss<'a, T: Scalar>(
    samples: &[Vec<RecPair<'a, T>>],
    norm: RecNorm,
) -> Result<Var<'a, T>, LossError> {
    if samples.is_empty() {
        return Err(LossError::Contract("reconstruction loss over an empty batch".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for pairs in samples {
        let masked: usize = pairs.iter().map(|p| p.pred.shape()[0]).sum();
        if masked == 0 {
            return Err(LossError::Contract("reconstruction loss needs at least one masked patch".into()));
        }
        let mut total: Option<Var<'a, T>> = None;
        for p in pairs {
            if p.pred.shape() != p.target.shape() {
                return Err(LossError::Contract(format!(
                    "prediction {:?} does not match target {:?}",
                    p.pred.shape(),
                    p.target.shape()
                )));
            }
            if p.pred.shape()[0] == 0 {
                continue;
            }
            let sq = p.pred.sub(p.target)?.square();
            let err = match norm {
                RecNorm::SquaredL2 => sq.sum(),
                RecNorm::L2 => sq.sum_axis(1)?.sqrt().sum(),
            };
            total = Some(match total {
                Some(t) => t.add(err)?,
                None => err,
            });
        }
        let total = total.expect("masked > 0");
        per_sample.push(total.scale(T::one() / T::from_usize(masked).unwrap()).reshape(&[1])?);
    }
    Ok(concat(&per_sample, 0)?.mean())
}

fn check_pair<T: Scalar>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<usize, LossError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(LossError::Contract(format!("{what}: batches {sa:?} and {sb:?} differ")));
    }
    if sa[0] == 0 {
        return Err(LossError::Contract(format!("{what}: empty batch")));
    }
    Ok(sa[0])
}

/// Symmetric InfoNCE over in-batch negatives; inputs are row-normalized.
pub fn itc_loss<'a, T: Scalar>(img: Var<'a, T>, txt: Var<'a, T>, tau: T) -> Result<Var<'a, T>, LossError> {
    let n = check_pair(img, txt, "itc")?;
    let logits = img.matmul(txt.transpose()?)?.scale(T::one() / tau);
    let diag: Vec<usize> = (0..n).collect();
    let i2t = logits.log_softmax(1)?.pick(&diag)?.sum();
    let t2i = logits.log_softmax(0)?.pick(&diag)?.sum();
    Ok(i2t.add(t2i)?.scale(-T::one() / T::from_usize(2 * n).unwrap()))
}

/// Batch mean of squared Euclidean distance between rows.
pub fn si_loss<'a, T: Scalar>(v: Var<'a, T>, p: Var<'a, T>) -> Result<Var<'a, T>, LossError> {
    let n = check_pair(v, p, "si")?;
    Ok(v.sub(p)?.square().sum().scale(T::one() / T::from_usize(n).unwrap()))
}

/// Row `i` is the softmax over `j` of `<anchor_i, text_j> / tau`.
pub fn similarity_distribution<'a, T: Scalar>(
    anchor: Var<'a, T>,
    text: Var<'a, T>,
    tau: T,
) -> Result<Var<'a, T>, LossError> {
    check_pair(anchor, text, "similarity")?;
    Ok(anchor.matmul(text.transpose()?)?.scale(T::one() / tau).softmax(1)?)
}

pub struct DcParts<'a, T> {
    pub total: Var<'a, T>,
    pub kl: Var<'a, T>,
    pub entropy: Var<'a, T>,
}

/// `mean KL(S(p, w) || S(v, w)) ± mean H(S(p, w))`, with `S(v, w)` held
/// constant.
pub fn dc_loss<'a, T: Scalar>(
    p_agg: Var<'a, T>,
    v_cls: Var<'a, T>,
    w_cls: Var<'a, T>,
    tau: T,
    sign: EntropySign,
) -> Result<DcParts<'a, T>, LossError> {
    check_pair(p_agg, v_cls, "dc")?;
    let target = similarity_distribution(v_cls, w_cls, tau)?.detach();
    dc_loss_to_target(p_agg, w_cls, target, tau, sign)
}

/// [`dc_loss`] against an explicit target distribution.
pub fn dc_loss_to_target<'a, T: Scalar>(
    p_agg: Var<'a, T>,
    w_cls: Var<'a, T>,
    target: Var<'a, T>,
    tau: T,
    sign: EntropySign,
) -> Result<DcParts<'a, T>, LossError> {
    let n = check_pair(p_agg, w_cls, "dc")?;
    if target.shape() != [n, n] {
        return Err(LossError::Contract(format!("dc target {:?} for a batch of {n}", target.shape())));
    }
    let sa = similarity_distribution(p_agg, w_cls, tau)?;
    let eps = T::of(LOG_EPS);
    let ln_a = sa.ln_floor(eps);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let kl = sa.mul(ln_a.sub(target.ln_floor(eps))?)?.sum().scale(inv_n);
    let entropy = sa.mul(ln_a)?.sum().scale(-inv_n);
    let total = match sign {
        EntropySign::Add => kl.add(entropy)?,
        EntropySign::Subtract => kl.sub(entropy)?,
    };
    Ok(DcParts { total, kl, entropy })
}

/// Mean softmax cross-entropy. `ids` name the samples for error messages.
pub fn cls_loss<'a, T: Scalar>(logits: Var<'a, T>, labels: &[usize], ids: &[String]) -> Result<Var<'a, T>, LossError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(LossError::Contract(format!("{} labels for logits {shape:?}", labels.len())));
    }
    let k = shape[1];
    if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        let sample = ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        return Err(LossError::Label { sample, label, classes: k });
    }
    Ok(logits.log_softmax(1)?.pick(labels)?.mean().neg())
}

/// Loss terms of one step; unused terms are `None`.
pub struct LossParts<'a, T> {
    pub rec: Option<Var<'a, T>>,
    pub si: Option<Var<'a, T>>,
    pub dc: Option<Var<'a, T>>,
    pub itc: Option<Var<'a, T>>,
    pub cls: Option<Var<'a, T>>,
}

impl<T> Default for LossParts<'_, T> {
    fn default() -> Self {
        Self { rec: None, si: None, dc: None, itc: None, cls: None }
    }
}

fn weighted_sum<'a, T: Scalar>(terms: &[(&'static str, Option<Var<'a, T>>, f64)]) -> Result<Var<'a, T>, LossError> {
    let mut acc: Option<Var<'a, T>> = None;
    for &(name, part, w) in terms {
        let part = part.ok_or(LossError::MissingPart(name))?;
        let t = part.scale(T::of(w));
        acc = Some(match acc {
            Some(a) => a.add(t)?,
            None => t,
        });
    }
    Ok(acc.expect("at least one term"))
}

pub fn pretrain_loss<'a, T: Scalar>(parts: &LossParts<'a, T>, w: &LossWeights) -> Result<Var<'a, T>, LossError> {
    weighted_sum(&[
        ("rec", parts.rec, w.rec),
        ("si", parts.si, w.si),
        ("dc", parts.dc, w.dc),
        ("itc", parts.itc, w.itc),
    ])
}

pub fn finetune_loss<'a, T: Scalar>(parts: &LossParts<'a, T>, w: &LossWeights) -> Result<Var<'a, T>, LossError> {
    weighted_sum(&[("cls", parts.cls, w.cls), ("itc", parts.itc, w.itc)])
}

/// Attention pooling of the four sub-image representations followed by an
/// MLP into the shared space.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub w_z: ParamId,
    pub b: ParamId,
    pub u: ParamId,
    pub mlp: Mlp,
}

pub struct Aggregated<'a, T> {
    /// `[n, 1]`, sums to one.
    pub alpha: Var<'a, T>,
    /// `[1, d]`, `alpha^T z`.
    pub pooled: Var<'a, T>,
    /// `[1, d]`, MLP output, not normalized.
    pub p_agg: Var<'a, T>,
}

impl Aggregator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        let name = "aggregator";
        Self {
            w_z: store.init(format!("{name}.w_z"), &[dim, dim], Init::XavierUniform, rng),
            b: store.init(format!("{name}.b"), &[dim], Init::Zeros, rng),
            u: store.init(format!("{name}.u"), &[dim, 1], Init::XavierUniform, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim, dim, rng),
        }
    }

    /// `e_n = u^T tanh(z_n W_z + b)`, shape `[n, 1]`.
    pub fn scores<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, z: Var<'a, T>) -> Result<Var<'a, T>, LossError> {
        Ok(z.matmul(ctx.p(self.w_z))?.add(ctx.p(self.b))?.tanh().matmul(ctx.p(self.u))?)
    }

    /// Pools `z` (`[n, d]`) with weights `softmax(scores)`.
    pub fn pool<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        z: Var<'a, T>,
        scores: Var<'a, T>,
    ) -> Result<Aggregated<'a, T>, LossError> {
        let alpha = scores.softmax(0)?;
        let pooled = alpha.transpose()?.matmul(z)?;
        let p_agg = self.mlp.forward(ctx, pooled)?;
        Ok(Aggregated { alpha, pooled, p_agg })
    }

    pub fn aggregate<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, z: Var<'a, T>) -> Result<Aggregated<'a, T>, LossError> {
        let e = self.scores(ctx, z)?;
        self.pool(ctx, z, e)
    }
}

/// Builds the `[n, d]` stack of per-sub-image rows.
pub fn stack_rows<'a, T: Scalar>(rows: &[Var<'a, T>]) -> Result<Var<'a, T>, LossError> {
    Ok(concat(rows, 0)?)
}

/// Constant target rows for a reconstruction pair.
pub fn target_rows<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    patches: &Tensor<T>,
    rows: &[usize],
) -> Result<Var<'a, T>, LossError> {
    let cols = patches.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(patches.row(r));
    }
    Ok(ctx.tape.constant_from(&[rows.len(), cols], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};

    fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn logits(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
        a.iter().map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau).collect()).collect()
    }

    fn naive_itc(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> f64 {
        let l = logits(img, txt, tau);
        let n = l.len();
        let cols: Vec<Vec<f64>> = (0..n).map(|j| l.iter().map(|r| r[j]).collect()).collect();
        let i2t: f64 = (0..n).map(|i| -softmax(&l[i])[i].ln()).sum();
        let t2i: f64 = (0..n).map(|j| -softmax(&cols[j])[j].ln()).sum();
        (i2t + t2i) / (2 * n) as f64
    }

    fn naive_dc(p: &[Vec<f64>], v: &[Vec<f64>], w: &[Vec<f64>], tau: f64) -> (f64, f64) {
        let sp: Vec<Vec<f64>> = logits(p, w, tau).iter().map(|r| softmax(r)).collect();
        let sv: Vec<Vec<f64>> = logits(v, w, tau).iter().map(|r| softmax(r)).collect();
        let n = p.len() as f64;
        let kl = sp.iter().zip(&sv).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * (x / y).ln())).sum::<f64>() / n;
        let h = -sp.iter().flatten().map(|x| x * x.ln()).sum::<f64>() / n;
        (kl, h)
    }

    fn normalized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect()
    }

    fn var<'a>(tape: &'a Tape<f64>, rows: &[Vec<f64>]) -> Var<'a, f64> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        tape.constant(&Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).unwrap())
    }

    fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
            .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
    }

    #[test]
    fn itc_orthogonal_pair_at_unit_temperature() {
        let tape = Tape::new();
        let eye = var(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let got = itc_loss(eye, eye, 1.0).unwrap().item();
        assert!((got - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_examples() {
        let tape = Tape::new();
        let zeros = var(&tape, &[vec![0.0; 4]]);
        let half = var(&tape, &[vec![0.5; 4]]);
        let one = var(&tape, &[vec![1.0; 4]]);
        let rec =
            |pred| reconstruction_loss(&[vec![RecPair { pred, target: zeros }]], RecNorm::SquaredL2).unwrap().item();
        assert_eq!(rec(half), 1.0);
        assert_eq!(rec(one), 4.0);
        let l2 = reconstruction_loss(&[vec![RecPair { pred: half, target: zeros }]], RecNorm::L2).unwrap().item();
        assert_eq!(l2, 1.0);
        // Two sub-images with one masked patch each: sum / 2.
        let pairs = vec![RecPair { pred: half, target: zeros }, RecPair { pred: one, target: zeros }];
        assert_eq!(reconstruction_loss(&[pairs], RecNorm::SquaredL2).unwrap().item(), 2.5);
        let empty = RecPair { pred: var(&tape, &[vec![0.0; 4]]).narrow(0, 0, 1).unwrap(), target: zeros };
        assert!(reconstruction_loss::<f64>(&[], RecNorm::SquaredL2).is_err());
        assert!(reconstruction_loss(&[vec![empty, RecPair { pred: one, target: half }]], RecNorm::SquaredL2).is_ok());
    }

    #[test]
    fn si_examples() {
        let tape = Tape::new();
        let a = var(&tape, &[vec![1.0, 0.0]]);
        let b = var(&tape, &[vec![0.0, 1.0]]);
        let c = var(&tape, &[vec![-1.0, 0.0]]);
        assert_eq!(si_loss(a, a).unwrap().item(), 0.0);
        assert_eq!(si_loss(a, b).unwrap().item(), 2.0);
        assert_eq!(si_loss(a, c).unwrap().item(), 4.0);
    }

    #[test]
    fn dc_uniform_entropy_is_ln2() {
        let tape = Tape::new();
        let p = var(&tape, &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let w = var(&tape, &[vec![0.0, 1.0], vec![0.0, -1.0]]);
        let d = dc_loss(p, p, w, 0.07, EntropySign::Add).unwrap();
        assert_eq!(d.kl.item(), 0.0);
        assert!((d.entropy.item() - 2f64.ln()).abs() < 1e-12);
        let s = dc_loss(p, p, w, 0.07, EntropySign::Subtract).unwrap();
        assert!((s.total.item() + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_uniform_and_label_errors() {
        let tape = Tape::new();
        for k in [3usize, 6, 7] {
            let l = var(&tape, &[vec![1.5; k]]);
            assert!((cls_loss(l, &[k - 1], &["x".into()]).unwrap().item() - (k as f64).ln()).abs() < 1e-12);
        }
        let l = var(&tape, &[vec![0.0; 3], vec![0.0; 3]]);
        let err = cls_loss(l, &[0, 5], &["a".into(), "img-17".into()]).unwrap_err();
        assert!(matches!(&err, LossError::Label { sample, label: 5, classes: 3 } if sample == "img-17"), "{err}");
        assert!(cls_loss(l, &[0], &["a".into()]).is_err());
    }

    #[test]
    fn composites() {
        let tape = Tape::new();
        let one = tape.constant(&Tensor::scalar(1.0));
        let parts = LossParts { rec: Some(one), si: Some(one), dc: Some(one), itc: Some(one), cls: Some(one) };
        assert_eq!(pretrain_loss(&parts, &LossWeights::pretrain()).unwrap().item(), 2.025);
        assert_eq!(finetune_loss(&parts, &LossWeights::finetune()).unwrap().item(), 1.4);
        let partial = LossParts { rec: Some(one), ..LossParts::default() };
        assert!(matches!(pretrain_loss(&partial, &LossWeights::pretrain()), Err(LossError::MissingPart("si"))));
        assert!(matches!(finetune_loss(&partial, &LossWeights::finetune()), Err(LossError::MissingPart("cls"))));
        let mut w = LossWeights::pretrain();
        w.dc = -1.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let tape = Tape::new();
        let a = var(&tape, &normalized(&[vec![0.3, -0.2, 0.9], vec![1.0, 0.1, 0.0]]));
        let b = var(&tape, &normalized(&[vec![0.0, 1.0, 0.2], vec![-0.4, 0.4, 0.4]]));
        let s = similarity_distribution(a, b, 0.07).unwrap().to_tensor();
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn aggregator() -> (ParamStore<f64>, Aggregator) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::RngState::new(4).stream(crate::rng::Stream::Init);
        let agg = Aggregator::new(&mut store, 4, &mut rng);
        (store, agg)
    }

    #[test]
    fn aggregator_weights() {
        let (mut store, agg) = aggregator();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let z = var(&tape, &vec![vec![0.5, -0.5, 1.0, 0.0]; 4]);
        let a = agg.aggregate(&ctx, z).unwrap();
        assert!(a.alpha.values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let scores = var(&tape, &[vec![10.0], vec![0.0], vec![0.0], vec![0.0]]);
        let z =
            var(&tape, &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0; 4]]);
        let p = agg.pool(&ctx, z, scores).unwrap();
        let a1 = 10f64.exp() / (10f64.exp() + 3.0);
        assert!((p.alpha.values()[0] - a1).abs() < 1e-15);
        assert!((p.pooled.values()[0] - a1).abs() < 1e-15);
        assert_eq!(p.p_agg.shape(), [1, 4]);

        let u = agg.u;
        store.get_mut(u).tensor.data_mut().fill(0.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let z =
            var(&tape, &[vec![0.9, 0.1, -0.3, 2.0], vec![0.0, 1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.5, 0.0], vec![0.2; 4]]);
        let a = agg.aggregate(&ctx, z).unwrap();
        assert!(a.alpha.values().iter().all(|&x| x == 0.25));
    }

    proptest! {
        #[test]
        fn itc_matches_naive(img in rows_strategy(3, 4), txt in rows_strategy(3, 4), tau in 0.05f64..2.0) {
            let (img, txt) = (normalized(&img), normalized(&txt));
            let tape = Tape::new();
            let got = itc_loss(var(&tape, &img), var(&tape, &txt), tau).unwrap().item();
            let want = naive_itc(&img, &txt, tau);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn dc_matches_naive(p in rows_strategy(3, 4), v in rows_strategy(3, 4), w in rows_strategy(3, 4)) {
            let (p, v, w) = (normalized(&p), normalized(&v), normalized(&w));
            let tape = Tape::new();
            let d = dc_loss(var(&tape, &p), var(&tape, &v), var(&tape, &w), 0.5, EntropySign::Add).unwrap();
            let (kl, h) = naive_dc(&p, &v, &w, 0.5);
            prop_assert!((d.kl.item() - kl).abs() < 1e-10);
            prop_assert!((d.entropy.item() - h).abs() < 1e-10);
            prop_assert!((d.total.item() - (kl + h)).abs() < 1e-10);
            prop_assert!(d.kl.item() >= -1e-12);
        }

        #[test]
        fn si_matches_naive_and_is_bounded(v in rows_strategy(2, 3), p in rows_strategy(2, 3)) {
            let (v, p) = (normalized(&v), normalized(&p));
            let tape = Tape::new();
            let got = si_loss(var(&tape, &v), var(&tape, &p)).unwrap().item();
            let want = v.iter().zip(&p).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum::<f64>() / 2.0;
            prop_assert!((got - want).abs() < 1e-12);
            prop_assert!((0.0..=4.0 + 1e-12).contains(&got));
        }

        #[test]
        fn cls_matches_naive(l in rows_strategy(3, 5), labels in prop::collection::vec(0usize..5, 3)) {
            let tape = Tape::new();
            let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
            let got = cls_loss(var(&tape, &l), &labels, &ids).unwrap().item();
            let want = l.iter().zip(&labels).map(|(r, &y)| -softmax(r)[y].ln()).sum::<f64>() / 3.0;
            prop_assert!((got - want).abs() < 1e-12);
        }
    }
}
