//! Attribute branch: per-level Attribute Blocks producing one feature map per
//! attribute kind, multi-scale GAP fusion and the multi-label classifier.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::backbone::{FeatureMap, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, sigmoid, Conv2d, GroupNorm, Init, Linear, ParamStore};

/// Probability clamp used by the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeBlockConfig {
    pub n_attributes: usize,
    pub channels_per_attribute: usize,
    /// Kernel size of the two group convolutions.
    pub kernel_size: usize,
    /// When false the block uses ordinary convolutions and skips the shuffle.
    pub group_conv: bool,
}

impl AttributeBlockConfig {
    pub fn total_channels(&self) -> usize {
        self.n_attributes * self.channels_per_attribute
    }

    fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 || self.channels_per_attribute == 0 {
            return Err(Error::Config(
                "attribute block needs n_attributes >= 1 and channels_per_attribute >= 1".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("attribute kernel size must be odd".into()));
        }
        Ok(())
    }
}

/// Interleave channels across `groups`: view the channel axis as
/// `(groups, C / groups)`, transpose, flatten.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    Ok(x.reshape((b, groups, c / groups, h, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// Index form of [`channel_shuffle`]: output channel `i` reads input channel
/// `perm[i]`.
pub fn channel_shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::shape(format!(
            "{channels} channels not divisible into {groups} groups"
        )));
    }
    let per = channels / groups;
    Ok((0..channels).map(|i| (i % groups) * per + i / groups).collect())
}

#[derive(Clone, Debug)]
pub struct AttributeBlock {
    proj: Conv2d,
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    cfg: AttributeBlockConfig,
}

impl AttributeBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &AttributeBlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.total_channels();
        let groups = if cfg.group_conv { cfg.n_attributes } else { 1 };
        let k = cfg.kernel_size;
        Ok(Self {
            proj: Conv2d::new(ps, &format!("{name}.proj"), in_channels, c, 1, 1, 1)?,
            conv1: Conv2d::new(ps, &format!("{name}.gconv1"), c, c, k, 1, groups)?,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c, cfg.n_attributes)?,
            conv2: Conv2d::new(ps, &format!("{name}.gconv2"), c, c, k, 1, groups)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c, cfg.n_attributes)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AttributeBlockConfig {
        &self.cfg
    }

    pub fn first_group_conv(&self) -> &Conv2d {
        &self.conv1
    }

    /// Full block output before splitting, `(B, N_a * C_a, H, W)`.
    pub fn forward_merged(&self, c_i: &Tensor) -> Result<Tensor> {
        let x = self.proj.forward(c_i)?.relu()?;
        let x = self.norm1.forward(&self.conv1.forward(&x)?)?.relu()?;
        let x = self.norm2.forward(&self.conv2.forward(&x)?)?.relu()?;
        if self.cfg.group_conv {
            channel_shuffle(&x, self.cfg.n_attributes)
        } else {
            Ok(x)
        }
    }

    /// `N_a` maps of `C_a` channels each, split contiguously.
    pub fn forward(&self, c_i: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let merged = self.forward_merged(&c_i.values)?;
        merged
            .chunk(self.cfg.n_attributes, 1)?
            .into_iter()
            .map(|t| FeatureMap::new(t, c_i.stride))
            .collect()
    }
}

pub fn attribute_block_forward(block: &AttributeBlock, c_i: &FeatureMap) -> Result<Vec<FeatureMap>> {
    block.forward(c_i)
}

/// Per-level attribute feature maps `F_1..F_{N_a}`.
#[derive(Clone, Debug, Default)]
pub struct AttributeFeatureSet {
    pub levels: BTreeMap<u8, Vec<FeatureMap>>,
}

impl AttributeFeatureSet {
    pub fn level(&self, level: u8) -> Result<&[FeatureMap]> {
        self.levels
            .get(&level)
            .map(Vec::as_slice)
            .ok_or(Error::MissingLevel(level))
    }
}

/// Concatenate the maps of one level back along channels.
pub fn concat_level(features: &[FeatureMap]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = features.iter().map(|f| &f.values).collect();
    Ok(Tensor::cat(&parts, 1)?)
}

/// GAP each level's concatenated maps, then concatenate levels 2..5 in order.
pub fn fuse_attribute_scales(set: &AttributeFeatureSet) -> Result<Tensor> {
    let mut pooled = Vec::with_capacity(LEVELS.len());
    for level in LEVELS {
        pooled.push(global_avg_pool(&concat_level(set.level(level)?)?)?);
    }
    Ok(Tensor::cat(&pooled, 1)?)
}

/// Single affine layer from the fused vector to one logit per attribute.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    fc: Linear,
}

impl AttributeClassifier {
    pub fn new(ps: &mut ParamStore, name: &str, fused_len: usize, n_attributes: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::with_init(ps, name, fused_len, n_attributes, Init::Normal { std: 0.01 })?,
        })
    }

    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        self.fc.forward(fused)
    }

    pub fn classify_attributes(&self, fused: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(fused)?)
    }
}

/// Mean binary cross-entropy over attributes and masked-in samples.
/// `probs` and `labels` are `(B, N_a)`; masked-out rows contribute nothing and
/// an all-false mask gives zero.
pub fn attribute_bce_loss(probs: &Tensor, labels: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, n) = probs.dims2()?;
    if labels.dims() != probs.dims() || mask.len() != b {
        return Err(Error::shape(format!(
            "bce: probs {:?}, labels {:?}, mask {}",
            probs.dims(),
            labels.dims(),
            mask.len()
        )));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Ok(Tensor::zeros((), probs.dtype(), probs.device())?);
    }
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let labels = labels.to_dtype(probs.dtype())?;
    let pos = labels.mul(&p.log()?)?;
    let neg = labels.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    let per = (pos + neg)?.neg()?;
    let m: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, (b, 1), probs.device())?.to_dtype(probs.dtype())?;
    let total = per.broadcast_mul(&m)?.sum_all()?;
    Ok((total / (kept * n) as f64)?)
}

/// Zeros for rows without labels so masked samples can share a tensor.
pub fn label_matrix(labels: &[Option<Vec<f32>>], n: usize, dtype: DType) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(labels.len() * n);
    for l in labels {
        match l {
            Some(v) if v.len() == n => flat.extend_from_slice(v),
            Some(v) => {
                return Err(Error::shape(format!(
                    "label vector of length {}, expected {n}",
                    v.len()
                )))
            }
            None => flat.extend(std::iter::repeat(0.0).take(n)),
        }
    }
    Ok(Tensor::from_vec(flat, (labels.len(), n), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
