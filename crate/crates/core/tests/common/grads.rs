//! Backprop against central differences on float64 micro-fixtures.

use std::collections::BTreeMap;

use attrnet_core::attention::{AttrAttrAttention, AttrTbAttention, MultiHeadCrossAttention};
use attrnet_core::attribute::{attribute_bce_loss, fuse_attribute_scales, AttributeClassifier, AttributeFeatureSet};
use attrnet_core::backbone::LEVELS;
use attrnet_core::data::BoundingBox;
use attrnet_core::detector::{
    detection_loss, generate_proposals, roi_align, sample_roi_targets, sample_rpn_targets, AnchorConfig,
    DetectionTargets, Detector, DetectorConfig, RoiAlignConfig,
};
use attrnet_core::nn::{sigmoid, ParamStore};
use attrnet_core::{FeatureMap, FeaturePyramid};
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{max_grad_error, randn, randomize};

pub const GRAD_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    Var::from_tensor(&randn(rng, shape, 1.0, DType::F64)).unwrap()
}

/// Weighted sum with fixed random weights so no direction is privileged.
fn probe(t: &Tensor, rng_seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = randn(&mut rng, t.dims(), 1.0, DType::F64);
    t.mul(&r).unwrap().sum_all().unwrap()
}

fn all_vars(ps: &ParamStore, extra: &[&Var]) -> Vec<Var> {
    let mut v = ps.vars();
    v.extend(extra.iter().map(|&x| x.clone()));
    v
}

pub fn bce_through_fusion_and_classifier() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new(1, DType::F64);
    let (n_attr, ch) = (3, 2);
    let classifier = AttributeClassifier::new(&mut ps, "cls", LEVELS.len() * n_attr * ch, n_attr).unwrap();
    randomize(&ps, 2, 0.5);
    let feats: BTreeMap<u8, Vec<Var>> = LEVELS
        .iter()
        .map(|&l| (l, (0..n_attr).map(|_| var(&mut rng, &[3, ch, 2, 2])).collect()))
        .collect();
    let labels = Tensor::from_vec(
        vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0],
        (3, 3),
        &Device::Cpu,
    )
    .unwrap();
    let mask = [true, false, true];
    let loss = || {
        let mut set = AttributeFeatureSet::default();
        for (&l, vs) in &feats {
            set.levels.insert(
                l,
                vs.iter().map(|v| FeatureMap::new(v.as_tensor().clone(), 4).unwrap()).collect(),
            );
        }
        let probs = sigmoid(&classifier.logits(&fuse_attribute_scales(&set).unwrap()).unwrap()).unwrap();
        attribute_bce_loss(&probs, &labels, &mask).unwrap()
    };
    let extra: Vec<&Var> = feats.values().flatten().collect();
    max_grad_error(&all_vars(&ps, &extra), loss, 6, EPS, 3)
}

pub fn mca_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new(4, DType::F64);
    let mca = MultiHeadCrossAttention::new(&mut ps, "mca", 3, 2, 4, 3, 2).unwrap();
    randomize(&ps, 5, 0.5);
    let x = var(&mut rng, &[2, 3, 4, 4]);
    let y = var(&mut rng, &[2, 2, 4, 4]);
    let loss = || probe(&mca.forward(x.as_tensor(), y.as_tensor(), 2).unwrap(), 6);
    max_grad_error(&all_vars(&ps, &[&x, &y]), loss, 6, EPS, 7)
}

pub fn attr_attr_attention_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new(8, DType::F64);
    let a2 = AttrAttrAttention::new(&mut ps, "a2", 3, 2, 2).unwrap();
    randomize(&ps, 9, 0.5);
    let feats: Vec<Var> = (0..3).map(|_| var(&mut rng, &[1, 2, 4, 4])).collect();
    let loss = || {
        let maps: Vec<FeatureMap> = feats
            .iter()
            .map(|v| FeatureMap::new(v.as_tensor().clone(), 8).unwrap())
            .collect();
        let out = a2.forward(&maps, 2).unwrap();
        let parts: Vec<&Tensor> = out.iter().map(|f| &f.values).collect();
        probe(&Tensor::cat(&parts, 1).unwrap(), 10)
    };
    let extra: Vec<&Var> = feats.iter().collect();
    max_grad_error(&all_vars(&ps, &extra), loss, 6, EPS, 11)
}

pub fn attr_tb_attention_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    for normalize in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamStore::new(12, DType::F64);
        let at = AttrTbAttention::new(&mut ps, "at", 2, 4, 3, 2, normalize).unwrap();
        randomize(&ps, 13, 0.5);
        let feats: Vec<Var> = (0..3).map(|_| var(&mut rng, &[2, 2, 4, 4])).collect();
        let tb = var(&mut rng, &[2, 4, 4, 4]);
        let loss = || {
            let maps: Vec<FeatureMap> = feats
                .iter()
                .map(|v| FeatureMap::new(v.as_tensor().clone(), 8).unwrap())
                .collect();
            let tb = FeatureMap::new(tb.as_tensor().clone(), 8).unwrap();
            probe(&at.forward(&maps, &tb, 2).unwrap().values, 14)
        };
        let mut extra: Vec<&Var> = feats.iter().collect();
        extra.push(&tb);
        worst = worst.max(max_grad_error(&all_vars(&ps, &extra), loss, 6, EPS, 15));
    }
    worst
}

pub fn detection_loss_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = DetectorConfig {
        anchors: AnchorConfig {
            base: 2.0,
            scales: vec![1.0, 2.0],
            aspects: vec![1.0],
        },
        rpn_batch_per_image: 16,
        roi_batch_per_image: 8,
        pre_nms_top_n: 20,
        post_nms_top_n: 8,
        roi: RoiAlignConfig {
            output_size: 2,
            sampling_ratio: 1,
            ..RoiAlignConfig::default()
        },
        ..DetectorConfig::default()
    };
    let mut ps = ParamStore::new(16, DType::F64);
    let det = Detector::new(&mut ps, "det", 3, cfg.clone()).unwrap();
    randomize(&ps, 17, 0.3);
    let levels: Vec<(u8, Var)> = [(2u8, 8usize), (3, 4), (4, 2), (5, 1)]
        .iter()
        .map(|&(l, side)| (l, var(&mut rng, &[1, 3, side, side])))
        .collect();
    let pyramid = || {
        let mut p = FeaturePyramid::new();
        for (l, v) in &levels {
            p.insert(*l, FeatureMap::new(v.as_tensor().clone(), 1 << l).unwrap());
        }
        p
    };
    let gts = vec![Some(vec![BoundingBox::new(6.0, 8.0, 18.0, 20.0)])];
    let pyr = pyramid();
    let rpn = det.rpn.forward(&pyr, &cfg.anchors).unwrap();
    let proposals = generate_proposals(&rpn, &cfg).unwrap();
    let targets = DetectionTargets {
        rpn: sample_rpn_targets(&rpn.anchors, &gts, &cfg, &mut rng),
        roi: sample_roi_targets(&proposals, &gts, &cfg, &mut rng),
    };
    assert!(!targets.rpn.positives.is_empty() && !targets.roi.foreground.is_empty());
    let loss = || {
        let pyr = pyramid();
        let rpn = det.rpn.forward(&pyr, &cfg.anchors).unwrap();
        let head = det.head.forward(&roi_align(&pyr, &targets.roi.rois, &cfg.roi).unwrap()).unwrap();
        detection_loss(&rpn, &head, &targets, cfg.smooth_l1_beta).unwrap().total
    };
    let extra: Vec<&Var> = levels.iter().map(|(_, v)| v).collect();
    max_grad_error(&all_vars(&ps, &extra), loss, 6, EPS, 18)
}

/// Worst relative error of every fixture, by name.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("bce_classifier", bce_through_fusion_and_classifier()),
        ("mca", mca_gradients()),
        ("a2_attn", attr_attr_attention_gradients()),
        ("at_attn", attr_tb_attention_gradients()),
        ("detection_loss", detection_loss_gradients()),
    ]
}
