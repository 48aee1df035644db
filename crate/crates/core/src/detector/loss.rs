use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::{assign_coords, Anchor, AnchorLabel};
use super::boxes::{BoxCoder, Coords};
use super::head::HeadOutput;
use super::rpn::RpnOutput;
use super::{DetectorConfig, Proposal};
use crate::data::BoundingBox;
use crate::error::Result;
use crate::nn::{log_sum_exp_last, scalar_zero};

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Elementwise smooth-L1, written as `0.5 m^2 / beta + (|x| - m)` with
/// `m = min(|x|, beta)`.
pub fn smooth_l1_tensor(x: &Tensor, beta: f64) -> Result<Tensor> {
    let a = x.abs()?;
    let m = a.clamp(0.0, beta)?;
    Ok(((m.sqr()? * (0.5 / beta))? + (a - m)?)?)
}

/// Sampled anchors for the objectness and regression terms. Indices are
/// flat over `(B, A)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    pub sampled: Vec<u32>,
    pub labels: Vec<f64>,
    pub positives: Vec<u32>,
    pub regression: Vec<[f64; 4]>,
}

/// Sampled RoIs with their class labels and foreground regression targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<(usize, Coords)>,
    pub labels: Vec<u32>,
    /// Rows of `rois` that are foreground.
    pub foreground: Vec<u32>,
    pub regression: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionTargets {
    pub rpn: RpnTargets,
    pub roi: RoiTargets,
}

#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub rpn_cls: Tensor,
    pub rpn_reg: Tensor,
    pub roi_cls: Tensor,
    pub roi_reg: Tensor,
    pub total: Tensor,
}

fn take_random<R: Rng>(mut idx: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if idx.len() > n {
        idx.partial_shuffle(rng, n);
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

/// Per-image anchor sampling. Images with `None` carry no detection
/// supervision and are skipped entirely.
pub fn sample_rpn_targets<R: Rng>(
    anchors: &[Anchor],
    gts: &[Option<Vec<BoundingBox>>],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RpnTargets {
    let coords: Vec<Coords> = anchors.iter().map(Anchor::coords).collect();
    let coder = BoxCoder::new(cfg.rpn_box_weights);
    let n = anchors.len();
    let mut t = RpnTargets::default();
    for (bi, g) in gts.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = assign_coords(&coords, g, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
        let pos: Vec<usize> = (0..n).filter(|&i| m[i].label == AnchorLabel::Positive).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| m[i].label == AnchorLabel::Negative).collect();
        let n_pos_max = (cfg.rpn_batch_per_image as f64 * cfg.rpn_pos_fraction) as usize;
        let pos = take_random(pos, n_pos_max, rng);
        let neg = take_random(neg, cfg.rpn_batch_per_image - pos.len(), rng);
        let mut chosen: Vec<(usize, f64)> = pos.iter().map(|&i| (i, 1.0)).chain(neg.iter().map(|&i| (i, 0.0))).collect();
        chosen.sort_by_key(|c| c.0);
        for (i, l) in chosen {
            t.sampled.push((bi * n + i) as u32);
            t.labels.push(l);
        }
        for i in pos {
            let gt = g[m[i].gt.expect("positive anchors have a match")].coords();
            t.positives.push((bi * n + i) as u32);
            t.regression.push(coder.encode(&coords[i], &gt));
        }
    }
    t
}

/// Per-image RoI sampling over proposals plus the ground-truth boxes.
pub fn sample_roi_targets<R: Rng>(
    proposals: &[Vec<Proposal>],
    gts: &[Option<Vec<BoundingBox>>],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RoiTargets {
    let coder = BoxCoder::new(cfg.roi_box_weights);
    let mut t = RoiTargets::default();
    for (bi, g) in gts.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut cands: Vec<Coords> = proposals.get(bi).map(|p| p.iter().map(|p| p.bbox.coords()).collect()).unwrap_or_default();
        cands.extend(g.iter().map(BoundingBox::coords));
        let m = assign_coords(&cands, g, cfg.roi_fg_iou, cfg.roi_fg_iou);
        let fg: Vec<usize> = (0..cands.len()).filter(|&i| !g.is_empty() && m[i].iou >= cfg.roi_fg_iou).collect();
        let bg: Vec<usize> = (0..cands.len()).filter(|&i| g.is_empty() || m[i].iou < cfg.roi_fg_iou).collect();
        let n_fg_max = (cfg.roi_batch_per_image as f64 * cfg.roi_pos_fraction) as usize;
        let fg = take_random(fg, n_fg_max, rng);
        let bg = take_random(bg, cfg.roi_batch_per_image - fg.len(), rng);
        for &i in &fg {
            let gt = g[m[i].gt.expect("foreground has a match")].coords();
            t.foreground.push(t.rois.len() as u32);
            t.regression.push(coder.encode(&cands[i], &gt));
            t.rois.push((bi, cands[i]));
            t.labels.push(1);
        }
        for &i in &bg {
            t.rois.push((bi, cands[i]));
            t.labels.push(0);
        }
    }
    t
}

fn tensor_f64(v: Vec<f64>, shape: (usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Objectness BCE (mean over sampled anchors) + smooth-L1 over positive
/// anchors (normalized by sampled count), and likewise cross-entropy +
/// smooth-L1 for the sampled RoIs. Empty samples contribute zero.
pub fn detection_loss(rpn: &RpnOutput, head: &HeadOutput, targets: &DetectionTargets, beta: f64) -> Result<DetectionLoss> {
    let dtype = rpn.logits.dtype();
    let device = rpn.logits.device().clone();
    let zero = scalar_zero(dtype, &rpn.logits)?;
    let t = &targets.rpn;

    let (rpn_cls, rpn_reg) = if t.sampled.is_empty() {
        (zero.clone(), zero.clone())
    } else {
        let n = t.sampled.len();
        let idx = Tensor::from_vec(t.sampled.clone(), n, &device)?;
        let x = rpn.logits.flatten_all()?.index_select(&idx, 0)?;
        let y = Tensor::from_vec(t.labels.clone(), n, &device)?.to_dtype(dtype)?;
        // max(x, 0) - x y + log(1 + exp(-|x|))
        let bce = ((x.relu()? - x.mul(&y)?)? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        let cls = bce.mean_all()?;
        let reg = if t.positives.is_empty() {
            zero.clone()
        } else {
            let p = t.positives.len();
            let pidx = Tensor::from_vec(t.positives.clone(), p, &device)?;
            let a = rpn.deltas.dim(1)?;
            let d = rpn.deltas.reshape((rpn.deltas.dim(0)? * a, 4))?.index_select(&pidx, 0)?;
            let target = tensor_f64(t.regression.iter().flatten().copied().collect(), (p, 4), dtype, &device)?;
            (smooth_l1_tensor(&(d - target)?, beta)?.sum_all()? / n as f64)?
        };
        (cls, reg)
    };

    let r = &targets.roi;
    let (roi_cls, roi_reg) = if r.rois.is_empty() {
        (zero.clone(), zero.clone())
    } else {
        let n = r.rois.len();
        let onehot: Vec<f64> = r.labels.iter().flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        let onehot = tensor_f64(onehot, (n, 2), dtype, &device)?;
        let picked = head.class_logits.mul(&onehot)?.sum_keepdim(1)?;
        let ce = (log_sum_exp_last(&head.class_logits)? - picked)?.mean_all()?;
        let reg = if r.foreground.is_empty() {
            zero.clone()
        } else {
            let f = r.foreground.len();
            let fidx = Tensor::from_vec(r.foreground.clone(), f, &device)?;
            let d = head.box_deltas.index_select(&fidx, 0)?;
            let target = tensor_f64(r.regression.iter().flatten().copied().collect(), (f, 4), dtype, &device)?;
            (smooth_l1_tensor(&(d - target)?, beta)?.sum_all()? / n as f64)?
        };
        (ce, reg)
    };

    let total = (((&rpn_cls + &rpn_reg)? + &roi_cls)? + &roi_reg)?;
    Ok(DetectionLoss {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        let x = Tensor::from_vec(vec![0.5f64, -2.0, 0.0, 1.0], 4, &Device::Cpu).unwrap();
        let y = smooth_l1_tensor(&x, 1.0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![0.125, 1.5, 0.0, 0.5]);
    }

    fn fixture(deltas: Vec<f64>) -> (RpnOutput, HeadOutput) {
        let d = Device::Cpu;
        let rpn = RpnOutput {
            logits: Tensor::from_vec(vec![0.3f64, -0.4], (1, 2), &d).unwrap(),
            deltas: Tensor::from_vec(deltas, (1, 2, 4), &d).unwrap(),
            anchors: vec![],
            image_size: (32, 32),
        };
        let head = HeadOutput {
            class_logits: Tensor::from_vec(vec![0.1f64, 0.2], (1, 2), &d).unwrap(),
            box_deltas: Tensor::from_vec(vec![0.5f64, 0.0, 0.0, 0.0], (1, 4), &d).unwrap(),
        };
        (rpn, head)
    }

    #[test]
    fn perfect_regression_has_zero_term() {
        let (rpn, head) = fixture(vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]);
        let targets = DetectionTargets {
            rpn: RpnTargets {
                sampled: vec![0, 1],
                labels: vec![1.0, 0.0],
                positives: vec![0],
                regression: vec![[0.1, 0.2, 0.3, 0.4]],
            },
            roi: RoiTargets {
                rois: vec![(0, [0.0, 0.0, 4.0, 4.0])],
                labels: vec![1],
                foreground: vec![0],
                regression: vec![[0.5, 0.0, 0.0, 0.0]],
            },
        };
        let l = detection_loss(&rpn, &head, &targets, 1.0).unwrap();
        assert_eq!(l.rpn_reg.to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(l.roi_reg.to_scalar::<f64>().unwrap(), 0.0);
        let bce = |x: f64, y: f64| -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + x.exp())).ln());
        let expect = 0.5 * (bce(0.3, 1.0) + bce(-0.4, 0.0));
        assert!((l.rpn_cls.to_scalar::<f64>().unwrap() - expect).abs() < 1e-12);
        let ce = (0.1f64.exp() + 0.2f64.exp()).ln() - 0.2;
        assert!((l.roi_cls.to_scalar::<f64>().unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn no_positives_means_classification_only() {
        let (rpn, head) = fixture(vec![0.7; 8]);
        let targets = DetectionTargets {
            rpn: RpnTargets {
                sampled: vec![0, 1],
                labels: vec![0.0, 0.0],
                ..Default::default()
            },
            roi: RoiTargets {
                rois: vec![(0, [0.0, 0.0, 4.0, 4.0])],
                labels: vec![0],
                ..Default::default()
            },
        };
        let l = detection_loss(&rpn, &head, &targets, 1.0).unwrap();
        let sum = l.rpn_cls.to_scalar::<f64>().unwrap() + l.roi_cls.to_scalar::<f64>().unwrap();
        assert_eq!(l.total.to_scalar::<f64>().unwrap(), sum);
        assert!(sum > 0.0);
    }

    #[test]
    fn negatives_only_images_sample_no_positives() {
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors.level_anchors(2, 4, 4, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let t = sample_rpn_targets(&anchors, &[Some(vec![]), None], &cfg, &mut rng);
        assert!(t.positives.is_empty());
        assert_eq!(t.sampled.len(), anchors.len().min(cfg.rpn_batch_per_image));
        assert!(t.sampled.iter().all(|&i| (i as usize) < anchors.len()));
    }
}
