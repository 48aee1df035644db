use candle_core::Tensor;

use super::boxes::Coords;
use crate::backbone::FeaturePyramid;
use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Bilinear RoI alignment settings. Sampling follows the half-pixel
/// ("aligned") convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignConfig {
    pub output_size: usize,
    pub sampling_ratio: usize,
    pub canonical_level: u8,
    pub canonical_size: f64,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            output_size: 7,
            sampling_ratio: 2,
            canonical_level: 4,
            canonical_size: 224.0,
        }
    }
}

/// Pyramid level for a box: `floor(k0 + log2(sqrt(area) / canonical))`
/// clamped to the available levels.
pub fn roi_level(b: &Coords, cfg: &RoiAlignConfig) -> u8 {
    let side = ((b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)).sqrt();
    let k = (cfg.canonical_level as f64 + (side / cfg.canonical_size + 1e-8).log2()).floor();
    k.clamp(2.0, 5.0) as u8
}

/// Corner indices and weights of one bilinear sample; `None` when the point
/// falls outside the map by more than one cell.
fn bilinear(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ])
}

/// Align every `(batch_index, box)` to a `(R, C, o, o)` tensor. Boxes are in
/// image pixels; each is pooled from the level picked by [`roi_level`].
/// The result is differentiable with respect to the pyramid.
pub fn roi_align(pyramid: &FeaturePyramid, rois: &[(usize, Coords)], cfg: &RoiAlignConfig) -> Result<Tensor> {
    let o = cfg.output_size;
    let sr = cfg.sampling_ratio.max(1);
    let first = pyramid.iter().next().ok_or(Error::MissingLevel(2))?.1;
    let (c, dtype) = (first.channels(), first.values.dtype());
    let device = first.values.device().clone();
    if rois.is_empty() {
        return Ok(Tensor::zeros((0, c, o, o), dtype, &device)?);
    }

    let mut flat = Vec::new();
    let mut offsets = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for (level, fm) in pyramid.iter() {
        let (b, ch, h, w) = fm.values.dims4()?;
        if ch != c {
            return Err(Error::shape("pyramid levels differ in channel count"));
        }
        flat.push(fm.values.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?);
        offsets.insert(level, total);
        total += b * h * w;
    }
    let flat = Tensor::cat(&flat, 0)?;

    let per_bin = sr * sr * 4;
    let mut index = Vec::with_capacity(rois.len() * o * o * per_bin);
    let mut weight = Vec::with_capacity(index.capacity());
    let norm = 1.0 / (sr * sr) as f64;
    for &(bi, b) in rois {
        if !(b[0] < b[2] && b[1] < b[3]) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBox(b[0], b[1], b[2], b[3]));
        }
        let level = roi_level(&b, cfg);
        let fm = pyramid.level(level)?;
        let (nb, _, h, w) = fm.values.dims4()?;
        if bi >= nb {
            return Err(Error::shape(format!("RoI batch index {bi} >= batch {nb}")));
        }
        let base = offsets[&level] + bi * h * w;
        let scale = 1.0 / fm.stride as f64;
        let x1 = b[0] * scale - 0.5;
        let y1 = b[1] * scale - 0.5;
        let bin_w = (b[2] - b[0]) * scale / o as f64;
        let bin_h = (b[3] - b[1]) * scale / o as f64;
        for ph in 0..o {
            for pw in 0..o {
                for iy in 0..sr {
                    let y = y1 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                    for ix in 0..sr {
                        let x = x1 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                        match bilinear(y, x, h, w) {
                            Some(corners) => {
                                for (cy, cx, cw) in corners {
                                    index.push((base + cy * w + cx) as u32);
                                    weight.push(cw * norm);
                                }
                            }
                            None => {
                                for _ in 0..4 {
                                    index.push(base as u32);
                                    weight.push(0.0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let r = rois.len();
    let n = index.len();
    let index = Tensor::from_vec(index, n, &device)?;
    let weight = Tensor::from_vec(weight, (n, 1), &device)?.to_dtype(dtype)?;
    let gathered = flat.index_select(&index, 0)?.broadcast_mul(&weight)?;
    Ok(gathered
        .reshape((r, o * o, per_bin, c))?
        .sum(2)?
        .transpose(1, 2)?
        .reshape((r, c, o, o))?)
}

/// Single-box form of [`roi_align`], returning `(C, o, o)`.
pub fn roi_extract(pyramid: &FeaturePyramid, batch_index: usize, bbox: &BoundingBox, cfg: &RoiAlignConfig) -> Result<Tensor> {
    Ok(roi_align(pyramid, &[(batch_index, bbox.coords())], cfg)?.squeeze(0)?)
}
