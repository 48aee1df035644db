use candle_core::{DType, Tensor};

use super::anchors::{Anchor, AnchorConfig};
use super::boxes::{clip_to_image, BoxCoder, Coords};
use super::nms::nms_indices;
use super::{DetectorConfig, Proposal};
use crate::backbone::FeaturePyramid;
use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};

/// Proposal head shared across pyramid levels.
#[derive(Clone, Debug)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub objectness: Conv2d,
    pub deltas: Conv2d,
    per_cell: usize,
}

/// Raw proposal-head outputs, flattened over levels in anchor order.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    /// `(B, A)` objectness logits.
    pub logits: Tensor,
    /// `(B, A, 4)` box deltas.
    pub deltas: Tensor,
    pub anchors: Vec<Anchor>,
    /// `(height, width)` of the input images in pixels.
    pub image_size: (usize, usize),
}

impl RpnHead {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, per_cell: usize) -> Result<Self> {
        let head = Init::Normal { std: 0.01 };
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), channels, channels, 3, 1, 1)?,
            objectness: Conv2d::with_init(ps, &format!("{name}.objectness"), channels, per_cell, 1, 1, 1, head)?,
            deltas: Conv2d::with_init(ps, &format!("{name}.deltas"), channels, 4 * per_cell, 1, 1, 1, head)?,
            per_cell,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, anchor_cfg: &AnchorConfig) -> Result<RpnOutput> {
        if anchor_cfg.per_cell() != self.per_cell {
            return Err(Error::Config(format!(
                "head predicts {} anchors per cell, anchor config has {}",
                self.per_cell,
                anchor_cfg.per_cell()
            )));
        }
        pyramid.require_all()?;
        let a = self.per_cell;
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut anchors = Vec::new();
        for (level, fm) in pyramid.iter() {
            let (b, _, h, w) = fm.values.dims4()?;
            let x = self.conv.forward(&fm.values)?.relu()?;
            logits.push(
                self.objectness
                    .forward(&x)?
                    .permute((0, 2, 3, 1))?
                    .reshape((b, h * w * a))?,
            );
            deltas.push(
                self.deltas
                    .forward(&x)?
                    .reshape((b, a, 4, h, w))?
                    .permute((0, 3, 4, 1, 2))?
                    .reshape((b, h * w * a, 4))?,
            );
            anchors.extend(anchor_cfg.level_anchors(level, fm.stride, h, w));
        }
        let p2 = pyramid.level(2)?;
        Ok(RpnOutput {
            logits: Tensor::cat(&logits, 1)?,
            deltas: Tensor::cat(&deltas, 1)?,
            anchors,
            image_size: (p2.height() * p2.stride, p2.width() * p2.stride),
        })
    }
}

/// Decode, clip, rank and suppress proposals for every image. Proposals are
/// detached from the graph.
pub fn generate_proposals(out: &RpnOutput, cfg: &DetectorConfig) -> Result<Vec<Vec<Proposal>>> {
    let logits = out.logits.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let deltas = out.deltas.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let coder = BoxCoder::new(cfg.rpn_box_weights);
    let (ih, iw) = (out.image_size.0 as f64, out.image_size.1 as f64);
    let mut result = Vec::with_capacity(logits.len());
    for (lg, dl) in logits.iter().zip(&deltas) {
        let mut order: Vec<usize> = (0..lg.len()).collect();
        order.sort_by(|&a, &b| lg[b].total_cmp(&lg[a]).then(a.cmp(&b)));
        order.truncate(cfg.pre_nms_top_n);
        let mut boxes: Vec<Coords> = Vec::with_capacity(order.len());
        let mut scores = Vec::with_capacity(order.len());
        for &i in &order {
            let d = [dl[i][0], dl[i][1], dl[i][2], dl[i][3]];
            let b = clip_to_image(&coder.decode(&out.anchors[i].coords(), &d), iw, ih);
            if b[2] - b[0] >= cfg.min_box_size && b[3] - b[1] >= cfg.min_box_size {
                boxes.push(b);
                scores.push(1.0 / (1.0 + (-lg[i]).exp()));
            }
        }
        let keep = nms_indices(&boxes, &scores, cfg.rpn_nms_thresh);
        result.push(
            keep.into_iter()
                .take(cfg.post_nms_top_n)
                .map(|i| Proposal {
                    bbox: BoundingBox::from_coords(boxes[i]),
                    objectness: scores[i],
                })
                .collect(),
        );
    }
    Ok(result)
}

pub fn rpn_forward(pyramid: &FeaturePyramid, head: &RpnHead, cfg: &DetectorConfig) -> Result<Vec<Vec<Proposal>>> {
    generate_proposals(&head.forward(pyramid, &cfg.anchors)?, cfg)
}
