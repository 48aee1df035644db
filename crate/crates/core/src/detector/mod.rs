//! Two-stage detector: anchor-based proposals, RoI alignment, and a
//! classification/regression head for the single tb category.

mod anchors;
mod boxes;
mod head;
mod loss;
mod nms;
mod roi;
mod rpn;

use candle_core::DType;
use rand::Rng;

pub use anchors::{assign_anchors, assign_coords, Anchor, AnchorConfig, AnchorLabel, AnchorMatch};
pub use boxes::{clip_to_image, iou, iou_coords, BoxCoder, Coords};
pub use head::{detection_head_forward, DetectionHead, HeadOutput, N_CLASSES};
pub use loss::{
    detection_loss, sample_roi_targets, sample_rpn_targets, smooth_l1, smooth_l1_tensor, DetectionLoss,
    DetectionTargets, RoiTargets, RpnTargets,
};
pub use nms::{nms_filter, nms_indices};
pub use roi::{roi_align, roi_extract, roi_level, RoiAlignConfig};
pub use rpn::{generate_proposals, rpn_forward, RpnHead, RpnOutput};

use crate::backbone::FeaturePyramid;
use crate::data::{BoundingBox, Category};
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub category: Category,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Self {
        Self {
            bbox,
            category: Category::Tb,
            score,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub anchors: AnchorConfig,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch_per_image: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_top_n: usize,
    pub rpn_nms_thresh: f64,
    pub post_nms_top_n: usize,
    pub min_box_size: f64,
    pub roi: RoiAlignConfig,
    pub roi_batch_per_image: usize,
    pub roi_pos_fraction: f64,
    pub roi_fg_iou: f64,
    pub rpn_box_weights: [f64; 4],
    pub roi_box_weights: [f64; 4],
    pub smooth_l1_beta: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorConfig::default(),
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch_per_image: 256,
            rpn_pos_fraction: 0.5,
            pre_nms_top_n: 1000,
            rpn_nms_thresh: 0.7,
            post_nms_top_n: 256,
            min_box_size: 1e-3,
            roi: RoiAlignConfig::default(),
            roi_batch_per_image: 64,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            rpn_box_weights: [1.0; 4],
            roi_box_weights: [10.0, 10.0, 5.0, 5.0],
            smooth_l1_beta: 1.0,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub rpn: RpnHead,
    pub head: DetectionHead,
    pub cfg: DetectorConfig,
}

impl Detector {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, cfg: DetectorConfig) -> Result<Self> {
        Ok(Self {
            rpn: RpnHead::new(ps, &format!("{name}.rpn"), channels, cfg.anchors.per_cell())?,
            head: DetectionHead::new(ps, &format!("{name}.head"), channels, cfg.roi.output_size)?,
            cfg,
        })
    }

    /// Sample targets and evaluate the detection loss. Images whose entry in
    /// `gts` is `None` do not contribute; `Some(vec![])` marks a negative.
    pub fn loss<R: Rng>(
        &self,
        pyramid: &FeaturePyramid,
        gts: &[Option<Vec<BoundingBox>>],
        rng: &mut R,
    ) -> Result<DetectionLoss> {
        let rpn = self.rpn.forward(pyramid, &self.cfg.anchors)?;
        let proposals = generate_proposals(&rpn, &self.cfg)?;
        let rpn_targets = sample_rpn_targets(&rpn.anchors, gts, &self.cfg, rng);
        let roi_targets = sample_roi_targets(&proposals, gts, &self.cfg, rng);
        let patches = roi_align(pyramid, &roi_targets.rois, &self.cfg.roi)?;
        let head = self.head.forward(&patches)?;
        detection_loss(
            &rpn,
            &head,
            &DetectionTargets {
                rpn: rpn_targets,
                roi: roi_targets,
            },
            self.cfg.smooth_l1_beta,
        )
    }

    /// Scored, suppressed tb detections per image.
    pub fn detect(&self, pyramid: &FeaturePyramid) -> Result<Vec<Vec<Detection>>> {
        let rpn = self.rpn.forward(pyramid, &self.cfg.anchors)?;
        let proposals = generate_proposals(&rpn, &self.cfg)?;
        let rois: Vec<(usize, Coords)> = proposals
            .iter()
            .enumerate()
            .flat_map(|(bi, ps)| ps.iter().map(move |p| (bi, p.bbox.coords())))
            .collect();
        let mut out = vec![Vec::new(); proposals.len()];
        if rois.is_empty() {
            return Ok(out);
        }
        let head = self.head.forward(&roi_align(pyramid, &rois, &self.cfg.roi)?)?;
        let probs = head.probabilities()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let deltas = head.box_deltas.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let coder = BoxCoder::new(self.cfg.roi_box_weights);
        let (ih, iw) = (rpn.image_size.0 as f64, rpn.image_size.1 as f64);
        let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); proposals.len()];
        for (k, &(bi, b)) in rois.iter().enumerate() {
            let score = probs[k][1];
            if score < self.cfg.score_thresh {
                continue;
            }
            let d = [deltas[k][0], deltas[k][1], deltas[k][2], deltas[k][3]];
            let c = clip_to_image(&coder.decode(&b, &d), iw, ih);
            let bbox = BoundingBox::from_coords(c);
            if !bbox.is_degenerate() && bbox.is_finite() {
                per_image[bi].push(Detection::new(bbox, score));
            }
        }
        for (slot, dets) in out.iter_mut().zip(per_image) {
            let mut kept = nms_filter(&dets, self.cfg.nms_thresh);
            kept.truncate(self.cfg.max_detections);
            *slot = kept;
        }
        Ok(out)
    }
}
