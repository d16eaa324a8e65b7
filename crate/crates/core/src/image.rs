//! Mixed-scale image preparation, patchification and patch masking.
//!
//! Images are `[height, width, 3]` tensors with values in `[0, 1]`.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image config: {0}")]
    Config(String),
    #[error("expected a {expected}x{expected}x3 image, got {got:?}")]
    Dimension { expected: usize, got: Vec<usize> },
    #[error("mask ratio {0} outside [0, 1)")]
    MaskRatio(f64),
    #[error("{0}")]
    Contract(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub high_res: usize,
    pub low_res: usize,
    pub patch_size: usize,
    /// Per-channel standardization applied to encoder inputs. Off by default
    /// so reconstruction targets stay in pixel units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<Normalization>,
}

impl Default for ImageConfig {
    /// Desk-scale profile: 64 -> 32, 8px patches, 16 patches per image.
    fn default() -> Self {
        Self { high_res: 64, low_res: 32, patch_size: 8, normalize: None }
    }
}

impl ImageConfig {
    pub fn full_scale() -> Self {
        Self { high_res: 448, low_res: 224, patch_size: 16, normalize: None }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.low_res == 0 || self.patch_size == 0 {
            return Err(ImageError::Config("low_res and patch_size must be positive".into()));
        }
        if self.high_res != 2 * self.low_res {
            return Err(ImageError::Config(format!(
                "high_res ({}) must be twice low_res ({})",
                self.high_res, self.low_res
            )));
        }
        if !self.low_res.is_multiple_of(self.patch_size) {
            return Err(ImageError::Config(format!(
                "patch_size ({}) must divide low_res ({})",
                self.patch_size, self.low_res
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.low_res / self.patch_size
    }

    /// Patches per low-resolution image.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn apply_normalization<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let Some(n) = &self.normalize else { return image.clone() };
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % CHANNELS;
            *v = (*v - T::of(n.mean[c])) / T::of(n.std[c]);
        }
        out
    }

    /// Inverse of [`Self::apply_normalization`].
    pub fn undo_normalization<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let Some(n) = &self.normalize else { return image.clone() };
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % CHANNELS;
            *v = *v * T::of(n.std[c]) + T::of(n.mean[c]);
        }
        out
    }
}

/// One downsampled global view plus four full-resolution quadrants.
#[derive(Clone, Debug)]
pub struct MixedScaleBundle<T> {
    pub low: Tensor<T>,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub subs: [Tensor<T>; 4],
    pub source_id: String,
}

fn check_square<T: Scalar>(image: &Tensor<T>, side: usize) -> Result<(), ImageError> {
    if image.shape() != [side, side, CHANNELS] {
        return Err(ImageError::Dimension { expected: side, got: image.shape().to_vec() });
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers (`align_corners = false`):
/// output pixel `o` samples source coordinate `(o + 0.5) * in/out - 0.5`,
/// clamped to the image. For an exact 2x reduction this is the mean of each
/// 2x2 block.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (in_h, in_w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let coord = |o: usize, inn: usize, out: usize| {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        let frac = (s - i0 as f64).clamp(0.0, 1.0);
        (i0, i1, T::of(frac))
    };
    let mut out = Vec::with_capacity(out_h * out_w * CHANNELS);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, in_w, out_w);
            for c in 0..CHANNELS {
                let at = |y: usize, x: usize| src[(y * in_w + x) * CHANNELS + c];
                let top = at(y0, x0) * (T::one() - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (T::one() - fx) + at(y1, x1) * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, CHANNELS], out).expect("sized above")
}

/// Copies the `side x side` window at (`top`, `left`).
pub fn crop<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, side: usize) -> Tensor<T> {
    let w = image.shape()[1];
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * CHANNELS);
    for y in top..top + side {
        let start = (y * w + left) * CHANNELS;
        out.extend_from_slice(&src[start..start + side * CHANNELS]);
    }
    Tensor::new(vec![side, side, CHANNELS], out).expect("sized above")
}

pub fn mixed_scale_split<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ImageConfig,
    source_id: impl Into<String>,
) -> Result<MixedScaleBundle<T>, ImageError> {
    cfg.validate()?;
    check_square(image, cfg.high_res)?;
    let l = cfg.low_res;
    let low = resize_bilinear(image, l, l);
    let subs = [crop(image, 0, 0, l), crop(image, 0, l, l), crop(image, l, 0, l), crop(image, l, l, l)];
    Ok(MixedScaleBundle { low, subs, source_id: source_id.into() })
}

/// Inverse of the quadrant crop.
pub fn reassemble_quadrants<T: Scalar>(subs: &[Tensor<T>; 4]) -> Tensor<T> {
    let l = subs[0].shape()[0];
    let h = 2 * l;
    let mut out = vec![T::zero(); h * h * CHANNELS];
    for (n, sub) in subs.iter().enumerate() {
        let (top, left) = ((n / 2) * l, (n % 2) * l);
        for y in 0..l {
            let dst = ((top + y) * h + left) * CHANNELS;
            out[dst..dst + l * CHANNELS].copy_from_slice(&sub.data()[y * l * CHANNELS..(y + 1) * l * CHANNELS]);
        }
    }
    Tensor::new(vec![h, h, CHANNELS], out).expect("sized above")
}

/// `[P, patch_size^2 * 3]`; row `p` holds patch `p` (raster order over the
/// patch grid) with its pixels in raster order, channels innermost.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ImageConfig) -> Result<Tensor<T>, ImageError> {
    check_square(image, cfg.low_res)?;
    let (g, ps, l) = (cfg.grid(), cfg.patch_size, cfg.low_res);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..g {
        for px in 0..g {
            for y in 0..ps {
                let start = ((py * ps + y) * l + px * ps) * CHANNELS;
                out.extend_from_slice(&src[start..start + ps * CHANNELS]);
            }
        }
    }
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out).expect("sized above"))
}

pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &ImageConfig) -> Result<Tensor<T>, ImageError> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(ImageError::Contract(format!(
            "unpatchify expects [{}, {}], got {:?}",
            cfg.num_patches(),
            cfg.patch_dim(),
            patches.shape()
        )));
    }
    let (g, ps, l) = (cfg.grid(), cfg.patch_size, cfg.low_res);
    let mut out = vec![T::zero(); l * l * CHANNELS];
    for p in 0..cfg.num_patches() {
        let (py, px) = (p / g, p % g);
        let row = patches.row(p);
        for y in 0..ps {
            let dst = ((py * ps + y) * l + px * ps) * CHANNELS;
            out[dst..dst + ps * CHANNELS].copy_from_slice(&row[y * ps * CHANNELS..(y + 1) * ps * CHANNELS]);
        }
    }
    Ok(Tensor::new(vec![l, l, CHANNELS], out).expect("sized above"))
}

/// Kept and masked patch indices for one sub-image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub ratio_bits: u64,
    pub total: usize,
    /// Ascending.
    pub kept: Vec<usize>,
    /// Ascending complement of `kept`.
    pub masked: Vec<usize>,
}

impl MaskSpec {
    /// Nothing masked.
    pub fn full(total: usize) -> Self {
        Self { ratio_bits: 0f64.to_bits(), total, kept: (0..total).collect(), masked: Vec::new() }
    }

    pub fn from_kept(total: usize, ratio: f64, kept: Vec<usize>) -> Result<Self, ImageError> {
        let mut kept = kept;
        kept.sort_unstable();
        kept.dedup();
        if kept.is_empty() || kept.last().is_some_and(|&k| k >= total) {
            return Err(ImageError::Contract(format!("kept set {kept:?} invalid for {total} patches")));
        }
        let masked = (0..total).filter(|i| kept.binary_search(i).is_err()).collect();
        Ok(Self { ratio_bits: ratio.to_bits(), total, kept, masked })
    }

    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }
}

/// `round((1 - m) * P)` with halves rounded up, never below one.
pub fn kept_count(total: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * total as f64 + 0.5).floor() as usize).clamp(1, total)
}

/// Uniformly random kept subset of size [`kept_count`].
pub fn sample_mask<R: Rng>(total: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec, ImageError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(ImageError::MaskRatio(ratio));
    }
    let n = kept_count(total, ratio);
    if n == total {
        let mut s = MaskSpec::full(total);
        s.ratio_bits = ratio.to_bits();
        return Ok(s);
    }
    let kept = index::sample(rng, total, n).into_vec();
    MaskSpec::from_kept(total, ratio, kept)
}

/// Rows of `patches` at `spec.kept`, ascending, plus the index list.
pub fn select_unmasked<T: Scalar>(patches: &Tensor<T>, spec: &MaskSpec) -> Result<(Tensor<T>, Vec<usize>), ImageError> {
    let rows = patches.shape()[0];
    if spec.total != rows || spec.kept.iter().any(|&k| k >= rows) {
        return Err(ImageError::Contract(format!("mask over {} patches does not fit a {rows}-row matrix", spec.total)));
    }
    let cols = patches.shape()[1];
    let mut out = Vec::with_capacity(spec.kept.len() * cols);
    for &k in &spec.kept {
        out.extend_from_slice(patches.row(k));
    }
    Ok((Tensor::new(vec![spec.kept.len(), cols], out).expect("sized above"), spec.kept.clone()))
}

/// Writes `rows[i]` over row `indices[i]` of `base`.
pub fn scatter_rows<T: Scalar>(base: &Tensor<T>, rows: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>, ImageError> {
    let cols = base.shape()[1];
    if rows.shape() != [indices.len(), cols] || indices.iter().any(|&i| i >= base.shape()[0]) {
        return Err(ImageError::Contract(format!(
            "cannot scatter {:?} into {:?} at {indices:?}",
            rows.shape(),
            base.shape()
        )));
    }
    let mut out = base.clone();
    for (r, &i) in indices.iter().enumerate() {
        out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(rows.row(r));
    }
    Ok(out)
}
