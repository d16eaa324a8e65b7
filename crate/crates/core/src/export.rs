//! Inspection artifacts: masked-reconstruction triptychs and attention maps.

use crate::data::Task;
use crate::image::{reassemble_quadrants, scatter_rows, unpatchify, MaskSpec, CHANNELS};
use crate::model::{Ctx, ModelError, SampleInput, SyDes};
use crate::tensor::{Tape, Tensor};

/// Fill value of hidden patches in the masked panel.
const HIDDEN: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Reconstructed {
    /// Original, masked, and reconstructed high-resolution images side by
    /// side, `[H, 3H, 3]`, in pixel units.
    pub triptych: Tensor<f64>,
    pub predicted_patches: usize,
    pub total_patches: usize,
    /// Head-averaged cross-attention of the text decoder, `[S-1, 5(P+1)]`:
    /// text positions against the low-resolution view then each quadrant,
    /// CLS first.
    pub text_attention: Tensor<f64>,
    /// Aggregation weights of the four quadrants.
    pub alpha: Vec<f64>,
}

fn hstack(images: &[Tensor<f64>]) -> Tensor<f64> {
    let h = images[0].shape()[0];
    let width: usize = images.iter().map(|i| i.shape()[1]).sum();
    let mut out = Vec::with_capacity(h * width * CHANNELS);
    for y in 0..h {
        for img in images {
            let w = img.shape()[1] * CHANNELS;
            out.extend_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(vec![h, width, CHANNELS], out).expect("sized above")
}

fn mean_heads(heads: &[Tensor<f64>]) -> Tensor<f64> {
    let mut out = Tensor::zeros(heads[0].shape());
    let k = heads.len() as f64;
    for h in heads {
        for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
            *o += v / k;
        }
    }
    out
}

/// Reconstructs the masked patches of every quadrant and records the
/// attention maps of the `task` forward pass.
pub fn reconstruct(
    model: &SyDes<f64>,
    s: &SampleInput<f64>,
    masks: &[MaskSpec],
    task: Task,
) -> Result<Reconstructed, ModelError> {
    let cfg = model.image_config();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params);
    let out = model.pretrain_sample(&ctx, s, masks)?;
    let mut masked = Vec::with_capacity(4);
    let mut rebuilt = Vec::with_capacity(4);
    for ((sub, spec), rec) in s.subs.iter().zip(masks).zip(&out.reconstructions) {
        let hidden = Tensor::full(&[spec.masked.len(), cfg.patch_dim()], HIDDEN);
        masked.push(unpatchify(&scatter_rows(sub, &hidden, &spec.masked)?, cfg)?);
        let full = match rec.pixels {
            Some(p) => scatter_rows(sub, &p.to_tensor(), &spec.masked)?,
            None => sub.clone(),
        };
        rebuilt.push(unpatchify(&full, cfg)?);
    }
    let originals: Vec<Tensor<f64>> = s.subs.iter().map(|p| unpatchify(p, cfg)).collect::<Result<_, _>>()?;
    let quad = |v: Vec<Tensor<f64>>| cfg.undo_normalization(&reassemble_quadrants(&v.try_into().expect("four")));
    let triptych = hstack(&[quad(originals), quad(masked), quad(rebuilt)]);

    let fused = model.finetune_sample(&ctx, task, s, None)?.fused;
    let heads: Vec<Tensor<f64>> = fused.cross_attention.iter().map(|a| a.to_tensor()).collect();
    Ok(Reconstructed {
        triptych,
        predicted_patches: masks.iter().map(|m| m.masked.len()).sum(),
        total_patches: masks.iter().map(|m| m.total).sum(),
        text_attention: mean_heads(&heads),
        alpha: out.alpha.values(),
    })
}

/// Rank-2 tensor as CSV with a header row of column indices and the row
/// label in the first column.
pub fn matrix_csv(m: &Tensor<f64>, row_labels: &[String]) -> String {
    let cols = m.shape()[1];
    let mut out = String::from("row");
    for c in 0..cols {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (r, label) in row_labels.iter().enumerate().take(m.shape()[0]) {
        out.push_str(label);
        for v in m.row(r) {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::image::sample_mask;
    use crate::pipeline::{fresh_model, Corpus};
    use crate::rng::{RngState, Stream};

    #[test]
    fn triptych_panels_and_predicted_share() {
        let cfg = RunConfig { model: crate::model::ModelConfig::tiny(16, 12), ..RunConfig::default() };
        let corpus = Corpus::synthetic(&cfg, [2, 0, 0], 3).unwrap();
        let model = fresh_model(&cfg, &corpus).unwrap();
        let p = cfg.image.num_patches();
        let mut rng = RngState::new(1).stream(Stream::Mask);
        let masks: Vec<_> = (0..4).map(|_| sample_mask(p, 0.75, &mut rng).unwrap()).collect();
        let s = &corpus.train[0].input;
        let r = reconstruct(&model, s, &masks, Task::Desire).unwrap();
        let h = cfg.image.high_res;
        assert_eq!(r.triptych.shape(), [h, 3 * h, 3]);
        assert_eq!(r.predicted_patches, 4 * 12);
        assert_eq!(r.total_patches, 4 * 16);
        assert_eq!(r.text_attention.shape(), [11, 5 * (p + 1)]);
        for row in 0..11 {
            let sum: f64 = r.text_attention.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Left panel is the input itself; kept patches are copied into the
        // reconstruction.
        let w = 3 * h * 3;
        let orig = reassemble_quadrants(&s.subs.clone().map(|p| unpatchify(&p, &cfg.image).unwrap()));
        for y in 0..h {
            assert_eq!(&r.triptych.data()[y * w..y * w + h * 3], &orig.data()[y * h * 3..(y + 1) * h * 3]);
        }
        let kept = masks[0].kept[0];
        let (g, ps) = (cfg.image.grid(), cfg.image.patch_size);
        let (py, px) = (kept / g * ps, kept % g * ps);
        let at = |x: usize| r.triptych.data()[py * w + x * 3];
        assert_eq!(at(2 * h + px), at(px));
        assert_eq!(at(h + px), at(px));
    }

    #[test]
    fn csv_layout() {
        let m = Tensor::from_f64(&[2, 2], &[0.25, 0.75, 1.0, 0.0]).unwrap();
        let csv = matrix_csv(&m, &["a".into(), "b".into()]);
        assert_eq!(csv, "row,0,1\na,0.250000,0.750000\nb,1.000000,0.000000\n");
    }
}
