//! Oracle comparisons, invariant checks and training harnesses shared by the
//! per-module tests and the acceptance gate.

use attrnet_core::attention::{multi_head_cross_attention, AttrTbAttention, MultiHeadCrossAttention};
use attrnet_core::attribute::{attribute_bce_loss, channel_shuffle, channel_shuffle_permutation};
use attrnet_core::data::{synthesize_dataset, BoundingBox};
use attrnet_core::detector::{AnchorConfig, BoxCoder, Detector, DetectorConfig};
use attrnet_core::eval::compute_map;
use attrnet_core::nn::{sigmoid, ParamStore};
use attrnet_core::train::{joint_loss, stratified_batches, ImageSet};
use attrnet_core::{Detection, FeatureMap, FeaturePyramid, ModelConfig, TrainConfig, Trainer};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{brute_force_ap, naive_mca, randn, randomize, values};

/// Recorded once from the generator and frozen; any change to the synthetic
/// corpus must update it deliberately.
pub const SYNTH_DIGEST_SEED0_N10_S64: &str = "f4d4502cf04f6536985e0075ade54f8f8840763182cbf39d9c3cfd7f777e8367";

/// Worst absolute deviation of the batched cross-attention from the loop
/// reference over `cases` random configurations (head dim <= 4, heads <= 2,
/// spatial <= 4x4).
pub fn mca_oracle_max_err(cases: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let head_dim = rng.random_range(1..=4);
        let n_heads = rng.random_range(1..=2);
        let embed = head_dim * n_heads;
        let (cq, ckv, cout) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let s = if h % 2 == 0 && w % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 };
        let b = rng.random_range(1..=2);

        let mut ps = ParamStore::new(case, DType::F64);
        let mca = MultiHeadCrossAttention::new(&mut ps, "mca", cq, ckv, embed, cout, head_dim).unwrap();
        randomize(&ps, 100 + case, 0.7);
        let x = randn(&mut rng, &[b, cq, h, w], 1.0, DType::F64);
        let y = randn(&mut rng, &[b, ckv, h, w], 1.0, DType::F64);
        let fx = FeatureMap::new(x.clone(), 4).unwrap();
        let fy = FeatureMap::new(y.clone(), 4).unwrap();
        let got = values(&multi_head_cross_attention(&mca, &fx, &fy, s).unwrap().values);
        let want = naive_mca(&ps, "mca", &x, &y, s, head_dim);
        assert_eq!(got.len(), want.len());
        for (g, e) in got.iter().zip(&want) {
            worst = worst.max((g - e).abs());
        }
    }
    worst
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x = rng.random_range(0.0..20.0);
    let y = rng.random_range(0.0..20.0);
    BoundingBox::new(x, y, x + rng.random_range(2.0..10.0), y + rng.random_range(2.0..10.0))
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoundingBox) -> BoundingBox {
    let mut d = || rng.random_range(-1.5..1.5);
    let (x1, y1) = (b.x_min + d(), b.y_min + d());
    let (x2, y2) = (b.x_max + d(), b.y_max + d());
    BoundingBox::new(x1, y1, x2.max(x1 + 0.5), y2.max(y1 + 0.5))
}

/// Worst deviation of `compute_map` from prefix enumeration over `cases`
/// random micro-cases (at most 5 detections and 2 ground-truth boxes per
/// image) mixing near-duplicates, misses and empty images.
pub fn map_oracle_max_err(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n_img = rng.random_range(1..=4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..n_img {
            let g: Vec<BoundingBox> = (0..rng.random_range(0..=2)).map(|_| random_box(&mut rng)).collect();
            let mut d = Vec::new();
            for gt in &g {
                for _ in 0..rng.random_range(0..=1) {
                    d.push(Detection::new(jitter(&mut rng, gt), rng.random()));
                }
            }
            for _ in 0..rng.random_range(0..=3) {
                d.push(Detection::new(random_box(&mut rng), rng.random()));
            }
            gts.push(g);
            dets.push(d);
        }
        worst = worst.max((compute_map(&dets, &gts, 0.5) - brute_force_ap(&dets, &gts, 0.5)).abs());
    }
    worst
}

/// Bijectivity, index/tensor agreement and inversion by the transposed
/// grouping, over every `(channels, groups)` with up to 6 groups of 6.
pub fn check_channel_shuffle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for g in 1..=6 {
        for per in 1..=6 {
            let c = g * per;
            let perm = channel_shuffle_permutation(c, g).unwrap();
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..c).collect::<Vec<_>>() {
                return Err(format!("({c}, {g}) is not a permutation"));
            }
            let x = randn(&mut rng, &[2, c, 2, 2], 1.0, DType::F32);
            let xs = values(&x);
            let ys = values(&channel_shuffle(&x, g).unwrap());
            for bi in 0..2 {
                for i in 0..c {
                    for p in 0..4 {
                        if ys[(bi * c + i) * 4 + p] != xs[(bi * c + perm[i]) * 4 + p] {
                            return Err(format!("({c}, {g}) tensor shuffle disagrees with index form"));
                        }
                    }
                }
            }
            let back = channel_shuffle(&channel_shuffle(&x, g).unwrap(), per).unwrap();
            if values(&back) != xs {
                return Err(format!("({c}, {g}) not inverted by grouping {per}"));
            }
        }
    }
    Ok(())
}

/// Largest deviation from 1 of any attention row sum.
pub fn softmax_row_deviation(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(seed, DType::F32);
        let mca = MultiHeadCrossAttention::new(&mut ps, "m", 3, 3, 4, 3, 2).unwrap();
        randomize(&ps, seed, 1.0);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let scale = rng.random_range(0.1..20.0);
        let x = randn(&mut rng, &[2, 3, h, w], scale, DType::F32);
        let kv = mca.project_kv(&x, 1).unwrap();
        let (_, weights) = mca.attend(&x, &kv).unwrap();
        for row in values(&weights).chunks(h * w) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&p| p < 0.0) {
                return f64::INFINITY;
            }
        }
    }
    worst
}

/// With the value and output projections (and the norm shift) zeroed, the
/// refined feature equals the detector feature exactly.
pub fn check_at_residual_identity() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new(3, DType::F32);
    let at = AttrTbAttention::new(&mut ps, "at", 4, 8, 5, 4, false).unwrap();
    randomize(&ps, 4, 1.0);
    for name in ["at.mca.v.weight", "at.mca.v.bias", "at.mca.out.weight", "at.mca.out.bias", "at.norm.bias"] {
        let v = ps.get(name).ok_or(format!("missing {name}"))?;
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let feats: Vec<FeatureMap> = (0..3)
        .map(|_| FeatureMap::new(randn(&mut rng, &[2, 4, 4, 4], 1.0, DType::F32), 8).unwrap())
        .collect();
    let tb = FeatureMap::new(randn(&mut rng, &[2, 8, 4, 4], 1.0, DType::F32), 8).unwrap();
    let out = at.forward(&feats, &tb, 2).unwrap();
    if values(&out.values) == values(&tb.values) {
        Ok(())
    } else {
        Err("residual output differs from the input feature".into())
    }
}

pub fn check_zero_delta_decode(cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..cases {
        let (x, y) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let anchor = [x, y, x + rng.random_range(0.1..100.0), y + rng.random_range(0.1..100.0)];
        let weights = [0; 4].map(|_| rng.random_range(0.5..20.0));
        let decoded = BoxCoder::new(weights).decode(&anchor, &[0.0; 4]);
        if decoded != anchor {
            return Err(format!("{anchor:?} decoded to {decoded:?}"));
        }
    }
    Ok(())
}

/// `total(λ2) - total(λ1) = (λ2 - λ1) loss_cls` on branch losses of a real
/// forward pass, and `total(0) = loss_det`.
pub fn check_lambda_affinity() -> Result<(), String> {
    let data = ImageSet::from_synthetic(&synthesize_dataset(1, 8, 64, 7).unwrap()).unwrap();
    let batch = data.batch(&[0, 1, 2, 3], DType::F64).unwrap();
    let mut trainer = Trainer::with_dtype(&ModelConfig::tiny(), &TrainConfig::default(), DType::F64).unwrap();
    let (det, cls) = trainer.branch_losses(&batch).unwrap();
    let (det, cls) = (det.to_scalar::<f64>().unwrap(), cls.to_scalar::<f64>().unwrap());
    if joint_loss(det, cls, 0.0).total != det {
        return Err("total at lambda 0 is not loss_det".into());
    }
    let lambdas = [0.0, 0.25, 1.0, 3.0];
    for w in lambdas.windows(2) {
        let slope = (joint_loss(det, cls, w[1]).total - joint_loss(det, cls, w[0]).total) / (w[1] - w[0]);
        if (slope - cls).abs() > 1e-12 * cls.abs().max(1.0) {
            return Err(format!("slope {slope} vs loss_cls {cls}"));
        }
    }
    Ok(())
}

/// Unlabeled rows leave the attribute loss bit-identical when their
/// predictions and labels are redrawn, and images without detection
/// supervision leave the detection loss unchanged.
pub fn check_masking() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..32 {
        let b = rng.random_range(1..6);
        let mask: Vec<bool> = (0..b).map(|_| rng.random_bool(0.5)).collect();
        let probs = |rng: &mut ChaCha8Rng| sigmoid(&randn(rng, &[b, 4], 2.0, DType::F64)).unwrap();
        let labels = |rng: &mut ChaCha8Rng| {
            randn(rng, &[b, 4], 1.0, DType::F64)
                .ge(0.0)
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
        };
        let (p1, l1) = (probs(&mut rng), labels(&mut rng));
        let (p2, l2) = (probs(&mut rng), labels(&mut rng));
        let keep = Tensor::from_vec(
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
            (b, 1),
            &Device::Cpu,
        )
        .unwrap();
        let mix = |a: &Tensor, c: &Tensor| {
            (a.broadcast_mul(&keep).unwrap() + c.broadcast_mul(&keep.affine(-1.0, 1.0).unwrap()).unwrap()).unwrap()
        };
        let base = values(&attribute_bce_loss(&p1, &l1, &mask).unwrap())[0];
        let moved = values(&attribute_bce_loss(&mix(&p1, &p2), &mix(&l1, &l2), &mask).unwrap())[0];
        if base != moved {
            return Err(format!("attribute loss moved: {base} vs {moved}"));
        }
    }

    let cfg = DetectorConfig {
        anchors: AnchorConfig {
            base: 2.0,
            scales: vec![1.0, 2.0],
            aspects: vec![1.0],
        },
        ..DetectorConfig::default()
    };
    let mut ps = ParamStore::new(5, DType::F64);
    let det = Detector::new(&mut ps, "det", 3, cfg).unwrap();
    randomize(&ps, 6, 0.3);
    let maps: Vec<(u8, Tensor)> = [(2u8, 8usize), (3, 4), (4, 2), (5, 1)]
        .iter()
        .map(|&(l, s)| (l, randn(&mut rng, &[2, 3, s, s], 1.0, DType::F64)))
        .collect();
    let pyramid = |batch: usize| {
        let mut p = FeaturePyramid::new();
        for (l, t) in &maps {
            p.insert(*l, FeatureMap::new(t.narrow(0, 0, batch).unwrap(), 1 << l).unwrap());
        }
        p
    };
    let gt = Some(vec![BoundingBox::new(4.0, 4.0, 20.0, 16.0)]);
    let loss = |batch: usize, gts: &[Option<Vec<BoundingBox>>]| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        values(&det.loss(&pyramid(batch), gts, &mut rng).unwrap().total)[0]
    };
    let alone = loss(1, &[gt.clone()]);
    let with_unlabeled = loss(2, &[gt, None]);
    if (alone - with_unlabeled).abs() > 1e-12 {
        return Err(format!("detection loss moved: {alone} vs {with_unlabeled}"));
    }
    Ok(())
}

pub fn synthetic_set(seed: u64, n: usize) -> ImageSet {
    ImageSet::from_synthetic(&synthesize_dataset(seed, n, 64, 7).unwrap()).unwrap()
}

/// Total loss of the first `steps` optimizer steps from a fresh trainer.
pub fn loss_trajectory(data: &ImageSet, model: &ModelConfig, cfg: &TrainConfig, steps: usize) -> Vec<f64> {
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        for idx in stratified_batches(&data.records, cfg.batch_size, &mut rng) {
            if out.len() == steps {
                break;
            }
            out.push(trainer.train_step(&data.batch(&idx, DType::F32).unwrap()).unwrap().total);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub map: f64,
    pub accuracy: f64,
}

impl OverfitReport {
    pub fn loss_drop(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }

    pub fn passes(&self) -> bool {
        self.loss_drop() >= 0.9 && self.map >= 0.9 && self.accuracy >= 0.9
    }
}

/// Full-batch training of the full model on 8 synthetic 64x64 images,
/// stopping early once loss, mAP and accuracy all meet the bar.
pub fn overfit(max_steps: usize) -> OverfitReport {
    let data = synthetic_set(0, 8);
    let model = ModelConfig::tiny();
    let cfg = overfit_config();
    let mut trainer = Trainer::new(&model, &cfg).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&idx, DType::F32).unwrap();
    let mut report = OverfitReport {
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        steps: 0,
        map: 0.0,
        accuracy: 0.0,
    };
    let mut losses = Vec::with_capacity(max_steps);
    for step in 0..max_steps {
        let l = trainer.train_step(&batch).unwrap().total;
        losses.push(l);
        report.steps = step + 1;
        if step == 0 {
            report.initial_loss = l;
        }
        // A sampled loss is noisy; judge it on a short running mean.
        let tail = &losses[losses.len().saturating_sub(5)..];
        report.final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
        if (step + 1) % 25 == 0 || step + 1 == max_steps {
            let m = trainer.evaluate(&data).unwrap();
            report.map = m.map;
            report.accuracy = m.accuracy;
            if report.passes() {
                break;
            }
        }
    }
    report
}

pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        initial_lr: 1e-3,
        ..TrainConfig::default()
    }
}
