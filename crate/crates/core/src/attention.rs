//! Cross-attention fusion between feature maps.
//!
//! [`MultiHeadCrossAttention`] projects queries from one map and keys/values
//! from an average-pooled second map, runs scaled dot-product attention per
//! head and mixes the concatenated heads with a 1x1 output projection.
//! [`AttrAttrAttention`] lets every attribute map query a projection of all
//! attribute maps; [`AttrTbAttention`] refines a detector feature with
//! similarity-weighted attribute maps through a normalized residual.

use candle_core::{Tensor, D};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{avg_pool, global_avg_pool, softmax_last, ChannelLayerNorm, Conv2d, Linear, ParamStore};

/// Pool keys/values by `s` in both spatial dimensions.
pub fn kv_downsample(y: &Tensor, s: usize) -> Result<Tensor> {
    avg_pool(y, s)
}

/// Downsample ratio for a pyramid level: `base` at level 2, halved per level,
/// then reduced (by halving) until it divides both spatial dims.
pub fn downsample_ratio(base: usize, level: u8, height: usize, width: usize) -> usize {
    let mut s = (base >> level.saturating_sub(2)).max(1);
    while s > 1 && (height % s != 0 || width % s != 0) {
        s /= 2;
    }
    s
}

/// Flatten a `(B, C, H, W)` map into `(B, N, H*W, d)` head sequences, row-major
/// over space. Head `i` owns channels `i*d .. (i+1)*d`.
fn to_heads(x: &Tensor, n_heads: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let d = c / n_heads;
    Ok(x.reshape((b, n_heads, d, h * w))?.transpose(2, 3)?.contiguous()?)
}

/// `SoftMax(Q K^T / sqrt(d)) V` over the last two axes; softmax runs over keys.
/// Returns the output and the attention weights.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != d || k.dims() != v.dims() {
        return Err(Error::shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let kt = k.transpose(D::Minus2, D::Minus1)?.contiguous()?;
    let logits = (q.contiguous()?.matmul(&kt)? / (d as f64).sqrt())?;
    let weights = softmax_last(&logits)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

/// One attention head between already-projected maps: `q_map` is
/// `(d, H, W)`, `k_map` and `v_map` are `(d, H', W')`. Returns `(H*W, d)`.
pub fn cross_attention_head(q_map: &Tensor, k_map: &Tensor, v_map: &Tensor) -> Result<Tensor> {
    let (d, h, w) = q_map.dims3()?;
    let (dk, hk, wk) = k_map.dims3()?;
    if dk != d || v_map.dims() != k_map.dims() {
        return Err(Error::shape(format!(
            "head shapes q {:?}, k {:?}, v {:?}",
            q_map.dims(),
            k_map.dims(),
            v_map.dims()
        )));
    }
    let q = q_map.reshape((d, h * w))?.t()?;
    let k = k_map.reshape((d, hk * wk))?.t()?;
    let v = v_map.reshape((d, hk * wk))?.t()?;
    Ok(scaled_dot_product_attention(&q, &k, &v)?.0)
}

/// Projected keys and values, `(B, N, n', d)` each.
#[derive(Clone, Debug)]
pub struct KeyValue {
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Clone, Debug)]
pub struct MultiHeadCrossAttention {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub out: Conv2d,
    head_dim: usize,
    n_heads: usize,
}

impl MultiHeadCrossAttention {
    /// Queries come from `q_in`-channel maps, keys/values from `kv_in`-channel
    /// maps; both are embedded into `embed = n_heads * head_dim` channels and
    /// the output projection maps back to `out` channels.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        embed: usize,
        out: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if head_dim == 0 || embed % head_dim != 0 {
            return Err(Error::Config(format!(
                "{name}: embedding {embed} is not a multiple of head dim {head_dim}"
            )));
        }
        Ok(Self {
            q: Conv2d::new(ps, &format!("{name}.q"), q_in, embed, 1, 1, 1)?,
            k: Conv2d::new(ps, &format!("{name}.k"), kv_in, embed, 1, 1, 1)?,
            v: Conv2d::new(ps, &format!("{name}.v"), kv_in, embed, 1, 1, 1)?,
            out: Conv2d::new(ps, &format!("{name}.out"), embed, out, 1, 1, 1)?,
            head_dim,
            n_heads: embed / head_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Pool `y` by `s`, then project keys and values.
    pub fn project_kv(&self, y: &Tensor, s: usize) -> Result<KeyValue> {
        let pooled = kv_downsample(y, s)?;
        Ok(KeyValue {
            keys: to_heads(&self.k.forward(&pooled)?, self.n_heads)?,
            values: to_heads(&self.v.forward(&pooled)?, self.n_heads)?,
        })
    }

    /// Attend from `x` over prepared keys/values. Returns the map after the
    /// output projection and the `(B, N, n, n')` attention weights.
    pub fn attend(&self, x: &Tensor, kv: &KeyValue) -> Result<(Tensor, Tensor)> {
        let (b, _, h, w) = x.dims4()?;
        let q = to_heads(&self.q.forward(x)?, self.n_heads)?;
        let (heads, weights) = scaled_dot_product_attention(&q, &kv.keys, &kv.values)?;
        let concat = heads
            .transpose(2, 3)?
            .contiguous()?
            .reshape((b, self.n_heads * self.head_dim, h, w))?;
        Ok((self.out.forward(&concat)?, weights))
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor, s: usize) -> Result<Tensor> {
        let (bx, _, _, _) = x.dims4()?;
        let (by, _, _, _) = y.dims4()?;
        if bx != by {
            return Err(Error::shape(format!("batch mismatch {bx} vs {by}")));
        }
        Ok(self.attend(x, &self.project_kv(y, s)?)?.0)
    }
}

pub fn multi_head_cross_attention(
    mca: &MultiHeadCrossAttention,
    x: &FeatureMap,
    y: &FeatureMap,
    s: usize,
) -> Result<FeatureMap> {
    FeatureMap::new(mca.forward(&x.values, &y.values, s)?, x.stride)
}

/// Attribute-to-attribute attention at one pyramid level.
#[derive(Clone, Debug)]
pub struct AttrAttrAttention {
    pub mix: Conv2d,
    pub mca: MultiHeadCrossAttention,
    n_attributes: usize,
}

impl AttrAttrAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        n_attributes: usize,
        channels: usize,
        head_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            mix: Conv2d::new(ps, &format!("{name}.mix"), n_attributes * channels, channels, 1, 1, 1)?,
            mca: MultiHeadCrossAttention::new(
                ps,
                &format!("{name}.mca"),
                channels,
                channels,
                channels,
                channels,
                head_dim,
            )?,
            n_attributes,
        })
    }

    /// `Y` = projection of the channel-wise concatenation of all maps.
    pub fn mixed(&self, features: &[FeatureMap]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = features.iter().map(|f| &f.values).collect();
        self.mix.forward(&Tensor::cat(&parts, 1)?)
    }

    /// `F_i' = MCA(F_i, Y)` for every attribute map.
    pub fn forward(&self, features: &[FeatureMap], s: usize) -> Result<Vec<FeatureMap>> {
        if features.len() != self.n_attributes {
            return Err(Error::shape(format!(
                "expected {} attribute maps, got {}",
                self.n_attributes,
                features.len()
            )));
        }
        if features.windows(2).any(|w| w[0].values.dims() != w[1].values.dims()) {
            return Err(Error::shape("attribute maps differ in shape"));
        }
        let kv = self.mca.project_kv(&self.mixed(features)?, s)?;
        features
            .iter()
            .map(|f| FeatureMap::new(self.mca.attend(&f.values, &kv)?.0, f.stride))
            .collect()
    }
}

pub fn attr_attr_attention(
    a2: &AttrAttrAttention,
    features: &[FeatureMap],
    s: usize,
) -> Result<Vec<FeatureMap>> {
    a2.forward(features, s)
}

/// `A_i`, `B` and the raw scores `s_i = A_i . B`.
#[derive(Clone, Debug)]
pub struct SimilarityWeights {
    /// One `(B, D)` tensor per attribute.
    pub attribute_vectors: Vec<Tensor>,
    /// `(B, D)`.
    pub tb_vector: Tensor,
    /// `(B, N_a)`.
    pub weights: Tensor,
}

/// Dot products of projected GAP vectors. `attr_proj` is shared by every
/// attribute map; `tb_proj` maps the detector feature into the same space.
pub fn compute_similarity_weights(
    features: &[FeatureMap],
    tb_feature: &FeatureMap,
    attr_proj: &Linear,
    tb_proj: &Linear,
) -> Result<SimilarityWeights> {
    if attr_proj.out_features() != tb_proj.out_features() {
        return Err(Error::shape(format!(
            "similarity projections disagree: {} vs {}",
            attr_proj.out_features(),
            tb_proj.out_features()
        )));
    }
    let attribute_vectors = features
        .iter()
        .map(|f| attr_proj.forward(&global_avg_pool(&f.values)?))
        .collect::<Result<Vec<_>>>()?;
    let tb_vector = tb_proj.forward(&global_avg_pool(&tb_feature.values)?)?;
    let weights = similarity_from_vectors(&attribute_vectors, &tb_vector)?;
    Ok(SimilarityWeights {
        attribute_vectors,
        tb_vector,
        weights,
    })
}

/// `(B, N_a)` matrix of `A_i . B`.
pub fn similarity_from_vectors(attribute_vectors: &[Tensor], tb_vector: &Tensor) -> Result<Tensor> {
    let scores = attribute_vectors
        .iter()
        .map(|a| Ok(a.mul(tb_vector)?.sum_keepdim(1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&scores, 1)?)
}

/// `X = sum_i s_i F_i` with per-sample weights `(B, N_a)`.
pub fn weighted_attribute_sum(features: &[FeatureMap], weights: &Tensor) -> Result<Tensor> {
    let (b, n) = weights.dims2()?;
    if n != features.len() {
        return Err(Error::shape(format!(
            "{n} weights for {} attribute maps",
            features.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (i, f) in features.iter().enumerate() {
        let w = weights.narrow(1, i, 1)?.reshape((b, 1, 1, 1))?;
        let term = f.values.broadcast_mul(&w)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::shape("no attribute maps"))
}

/// Attribute-to-detector attention at one pyramid level:
/// `F_tb' = F_tb + Norm(MCA(sum_i s_i F_i, F_tb))`.
#[derive(Clone, Debug)]
pub struct AttrTbAttention {
    pub attr_proj: Linear,
    pub tb_proj: Linear,
    pub mca: MultiHeadCrossAttention,
    pub norm: ChannelLayerNorm,
    pub normalize_weights: bool,
}

impl AttrTbAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        attr_channels: usize,
        tb_channels: usize,
        sim_dim: usize,
        head_dim: usize,
        normalize_weights: bool,
    ) -> Result<Self> {
        Ok(Self {
            attr_proj: Linear::new(ps, &format!("{name}.attr_proj"), attr_channels, sim_dim)?,
            tb_proj: Linear::new(ps, &format!("{name}.tb_proj"), tb_channels, sim_dim)?,
            mca: MultiHeadCrossAttention::new(
                ps,
                &format!("{name}.mca"),
                attr_channels,
                tb_channels,
                tb_channels,
                tb_channels,
                head_dim,
            )?,
            norm: ChannelLayerNorm::new(ps, &format!("{name}.norm"), tb_channels)?,
            normalize_weights,
        })
    }

    pub fn similarity(&self, features: &[FeatureMap], tb: &FeatureMap) -> Result<SimilarityWeights> {
        compute_similarity_weights(features, tb, &self.attr_proj, &self.tb_proj)
    }

    /// The query map `X`, after the optional softmax over attributes.
    pub fn query(&self, features: &[FeatureMap], tb: &FeatureMap) -> Result<Tensor> {
        let sim = self.similarity(features, tb)?;
        let w = if self.normalize_weights {
            softmax_last(&sim.weights)?
        } else {
            sim.weights
        };
        weighted_attribute_sum(features, &w)
    }

    pub fn forward(&self, features: &[FeatureMap], tb: &FeatureMap, s: usize) -> Result<FeatureMap> {
        let x = self.query(features, tb)?;
        if x.dims()[2..] != tb.values.dims()[2..] || x.dims()[0] != tb.batch() {
            return Err(Error::shape(format!(
                "attribute maps {:?} incompatible with detector feature {:?}",
                x.dims(),
                tb.values.dims()
            )));
        }
        let attended = self.mca.forward(&x, &tb.values, s)?;
        let out = (&tb.values + self.norm.forward(&attended)?)?;
        FeatureMap::new(out, tb.stride)
    }
}

pub fn attr_tb_attention(
    at: &AttrTbAttention,
    features: &[FeatureMap],
    tb_feature: &FeatureMap,
    s: usize,
) -> Result<FeatureMap> {
    at.forward(features, tb_feature, s)
}
