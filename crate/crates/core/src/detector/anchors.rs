use super::boxes::{iou_coords, Coords};
use crate::data::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub level: u8,
}

impl Anchor {
    pub fn coords(&self) -> Coords {
        let hw = 0.5 * self.width;
        let hh = 0.5 * self.height;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::from_coords(self.coords())
    }
}

/// Anchor shapes placed at every cell: side `base * stride * scale`, aspect
/// ratio `height / width`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub base: f64,
    pub scales: Vec<f64>,
    pub aspects: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base: 2.0,
            scales: vec![1.0, 2.0],
            aspects: vec![1.0, 2.0, 0.5],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.aspects.len()
    }

    /// Anchors for one level, ordered by row, column, scale, then aspect.
    /// This matches the layout of the proposal head outputs.
    pub fn level_anchors(&self, level: u8, stride: usize, height: usize, width: usize) -> Vec<Anchor> {
        let st = stride as f64;
        let mut out = Vec::with_capacity(height * width * self.per_cell());
        for y in 0..height {
            for x in 0..width {
                let cx = (x as f64 + 0.5) * st;
                let cy = (y as f64 + 0.5) * st;
                for &scale in &self.scales {
                    let size = self.base * st * scale;
                    for &aspect in &self.aspects {
                        let r = aspect.sqrt();
                        out.push(Anchor {
                            cx,
                            cy,
                            width: size / r,
                            height: size * r,
                            level,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorMatch {
    pub label: AnchorLabel,
    /// Index of the best-overlapping ground truth, if any exist.
    pub gt: Option<usize>,
    pub iou: f64,
}

/// Threshold matching with the best-anchor rule: every ground truth also
/// claims the anchors that overlap it most (ties included), so each
/// ground truth has at least one positive when it overlaps any anchor.
pub fn assign_anchors(anchors: &[Anchor], gts: &[BoundingBox], pos_thr: f64, neg_thr: f64) -> Vec<AnchorMatch> {
    let coords: Vec<Coords> = anchors.iter().map(Anchor::coords).collect();
    assign_coords(&coords, gts, pos_thr, neg_thr)
}

pub fn assign_coords(boxes: &[Coords], gts: &[BoundingBox], pos_thr: f64, neg_thr: f64) -> Vec<AnchorMatch> {
    if gts.is_empty() {
        return vec![
            AnchorMatch {
                label: AnchorLabel::Negative,
                gt: None,
                iou: 0.0,
            };
            boxes.len()
        ];
    }
    let gt_coords: Vec<Coords> = gts.iter().map(BoundingBox::coords).collect();
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut matches: Vec<AnchorMatch> = boxes
        .iter()
        .map(|a| {
            let mut best = (0usize, -1.0f64);
            for (j, g) in gt_coords.iter().enumerate() {
                let v = iou_coords(a, g);
                if v > best.1 {
                    best = (j, v);
                }
                if v > best_for_gt[j] {
                    best_for_gt[j] = v;
                }
            }
            let label = if best.1 >= pos_thr {
                AnchorLabel::Positive
            } else if best.1 <= neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            AnchorMatch {
                label,
                gt: Some(best.0),
                iou: best.1,
            }
        })
        .collect();
    for (j, g) in gt_coords.iter().enumerate() {
        if best_for_gt[j] <= 0.0 {
            continue;
        }
        for (a, m) in boxes.iter().zip(matches.iter_mut()) {
            let v = iou_coords(a, g);
            if v == best_for_gt[j] {
                m.label = AnchorLabel::Positive;
                m.gt = Some(j);
                m.iou = v;
            }
        }
    }
    matches
}
