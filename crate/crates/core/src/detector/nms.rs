use super::boxes::{iou_coords, Coords};
use super::Detection;

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first. A box is suppressed when
/// its IoU with a kept box exceeds `iou_thr`.
pub fn nms_indices(boxes: &[Coords], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_coords(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms_filter(detections: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let boxes: Vec<Coords> = detections.iter().map(|d| d.bbox.coords()).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_thr)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}
