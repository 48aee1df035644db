//! Shared fixtures: random parameter fills, a central-difference gradient
//! checker and slow reference implementations.
#![allow(dead_code)]

pub mod checks;
pub mod grads;

use attrnet_core::data::BoundingBox;
use attrnet_core::detector::iou;
use attrnet_core::nn::ParamStore;
use attrnet_core::Detection;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

/// Overwrite every parameter (biases included) with `N(0, scale^2)` draws.
pub fn randomize(ps: &ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in ps.iter() {
        let t = randn(&mut rng, var.dims(), scale, var.dtype());
        var.set(&t).unwrap();
    }
}

pub const GRAD_FLOOR: f64 = 1e-5;

fn set_element(var: &Var, i: usize, value: f64) {
    let mut v = values(var.as_tensor());
    v[i] = value;
    let t = Tensor::from_vec(v, var.dims(), &Device::Cpu)
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

/// Largest relative error between backprop and central differences over a
/// few entries of every var: the `probes / 2` largest analytic gradients plus
/// random picks. Magnitudes below `GRAD_FLOOR` are compared absolutely, since
/// parameters the output is invariant to (key biases under softmax) have an
/// exact zero gradient and a numeric one made of rounding noise.
pub fn max_grad_error<F>(vars: &[Var], loss: F, probes: usize, eps: f64, seed: u64) -> f64
where
    F: Fn() -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = loss();
    let grads = l.backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut picks: Vec<usize> = order.iter().take(probes / 2).copied().collect();
        while picks.len() < probes.min(g.len()) {
            let i = rng.random_range(0..g.len());
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        let base = values(var.as_tensor());
        for i in picks {
            set_element(var, i, base[i] + eps);
            let plus = values(&loss())[0];
            set_element(var, i, base[i] - eps);
            let minus = values(&loss())[0];
            set_element(var, i, base[i]);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Naive cross-attention with explicit loops over heads, positions and
/// channels, reading the projection weights of `{name}.q/.k/.v/.out` from
/// `ps`. `x` is `(B, Cq, H, W)`, `y` is `(B, Ckv, H', W')`; returns the flat
/// `(B, Cout, H, W)` output.
pub fn naive_mca(ps: &ParamStore, name: &str, x: &Tensor, y: &Tensor, s: usize, head_dim: usize) -> Vec<f64> {
    let (b, cq, h, w) = x.dims4().unwrap();
    let (_, ckv, hy, wy) = y.dims4().unwrap();
    let xv = values(x);
    let yv = values(y);
    let weight = |p: &str| {
        let t = ps.get(&format!("{name}.{p}.weight")).unwrap();
        let d = t.dims().to_vec();
        (values(t.as_tensor()), d[0], d[1])
    };
    let bias = |p: &str| values(ps.get(&format!("{name}.{p}.bias")).unwrap().as_tensor());
    let conv = |p: &str, map: &[f64], c_in: usize, n: usize| -> Vec<f64> {
        let (wt, c_out, ci) = weight(p);
        assert_eq!(ci, c_in);
        let bs = bias(p);
        let mut out = vec![0.0; c_out * n];
        for o in 0..c_out {
            for pos in 0..n {
                let mut acc = bs[o];
                for i in 0..c_in {
                    acc += wt[o * c_in + i] * map[i * n + pos];
                }
                out[o * n + pos] = acc;
            }
        }
        out
    };
    let (hp, wp) = (hy / s, wy / s);
    let (n_q, n_k) = (h * w, hp * wp);
    let mut result = Vec::new();
    for bi in 0..b {
        let xm = &xv[bi * cq * n_q..(bi + 1) * cq * n_q];
        let ym = &yv[bi * ckv * hy * wy..(bi + 1) * ckv * hy * wy];
        let mut pooled = vec![0.0; ckv * n_k];
        for c in 0..ckv {
            for i in 0..hp {
                for j in 0..wp {
                    let mut acc = 0.0;
                    for di in 0..s {
                        for dj in 0..s {
                            acc += ym[c * hy * wy + (i * s + di) * wy + j * s + dj];
                        }
                    }
                    pooled[c * n_k + i * wp + j] = acc / (s * s) as f64;
                }
            }
        }
        let q = conv("q", xm, cq, n_q);
        let k = conv("k", &pooled, ckv, n_k);
        let v = conv("v", &pooled, ckv, n_k);
        let embed = q.len() / n_q;
        let heads = embed / head_dim;
        let mut concat = vec![0.0; embed * n_q];
        for hd in 0..heads {
            for p in 0..n_q {
                let mut logits = vec![0.0; n_k];
                for (pk, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..head_dim {
                        let c = hd * head_dim + j;
                        dot += q[c * n_q + p] * k[c * n_k + pk];
                    }
                    *l = dot / (head_dim as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..head_dim {
                    let c = hd * head_dim + j;
                    let mut acc = 0.0;
                    for pk in 0..n_k {
                        acc += (logits[pk] - m).exp() / z * v[c * n_k + pk];
                    }
                    concat[c * n_q + p] = acc;
                }
            }
        }
        result.extend(conv("out", &concat, embed, n_q));
    }
    result
}

/// Average precision by enumerating every ranked prefix: precision and
/// recall of each prefix are recomputed from scratch with greedy matching,
/// then the precision envelope is integrated over recall steps.
pub fn brute_force_ap(detections: &[Vec<Detection>], gts: &[Vec<BoundingBox>], iou_thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, ds) in detections.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            ranked.push((d.score, img, k));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut points = Vec::new();
    for len in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(_, img, k) in &ranked[..len] {
            let det = &detections[img][k];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                let o = iou(&det.bbox, g);
                if o >= iou_thr && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                if !used[img][j] {
                    used[img][j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / len as f64, tp as f64 / n_gt as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..points.len() {
        let env = points[i..].iter().map(|p| p.0).fold(0.0, f64::max);
        ap += (points[i].1 - prev) * env;
        prev = points[i].1;
    }
    ap
}
