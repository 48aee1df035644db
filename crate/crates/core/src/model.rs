//! The full network: backbone and pyramid, per-level attribute blocks,
//! optional attribute/attribute and attribute/detector attention, the
//! attribute classifier and the two-stage detector.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::attention::{downsample_ratio, AttrAttrAttention, AttrTbAttention};
use crate::attribute::{fuse_attribute_scales, AttributeBlock, AttributeBlockConfig, AttributeClassifier, AttributeFeatureSet};
use crate::backbone::{Backbone, BackboneConfig, BackbonePreset, FeaturePyramid, Fpn, LEVELS};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScaleMode {
    Single,
    Multi,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Single => "single",
            ScaleMode::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::Config(format!("unknown scale mode `{other}`"))),
        }
    }

    /// Levels that carry attention modules.
    pub fn levels(self) -> &'static [u8] {
        match self {
            ScaleMode::Single => &[5],
            ScaleMode::Multi => &LEVELS,
        }
    }
}

/// Component switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ablation {
    pub group_conv: bool,
    pub a2_attn: bool,
    pub at_attn: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        group_conv: false,
        a2_attn: false,
        at_attn: false,
    };
    pub const FULL: Ablation = Ablation {
        group_conv: true,
        a2_attn: true,
        at_attn: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fpn_channels: usize,
    pub n_attributes: usize,
    pub channels_per_attribute: usize,
    pub attr_kernel_size: usize,
    pub head_dim: usize,
    pub downsample_base: usize,
    pub similarity_dim: usize,
    pub normalize_weights: bool,
    pub ablation: Ablation,
    pub scale_mode: ScaleMode,
    pub detector: DetectorConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            fpn_channels: 64,
            n_attributes: 7,
            channels_per_attribute: 8,
            attr_kernel_size: 3,
            head_dim: 8,
            downsample_base: 4,
            similarity_dim: 32,
            normalize_weights: false,
            ablation: Ablation::FULL,
            scale_mode: ScaleMode::Multi,
            detector: DetectorConfig::default(),
        }
    }

    pub fn resnet50_like() -> Self {
        Self {
            backbone: BackboneConfig::resnet50_like(),
            fpn_channels: 256,
            channels_per_attribute: 32,
            head_dim: 32,
            downsample_base: 16,
            similarity_dim: 256,
            ..Self::tiny()
        }
    }

    pub fn from_preset(preset: BackbonePreset) -> Self {
        match preset {
            BackbonePreset::Tiny => Self::tiny(),
            BackbonePreset::Resnet50Like => Self::resnet50_like(),
        }
    }

    pub fn attribute_block(&self) -> AttributeBlockConfig {
        AttributeBlockConfig {
            n_attributes: self.n_attributes,
            channels_per_attribute: self.channels_per_attribute,
            kernel_size: self.attr_kernel_size,
            group_conv: self.ablation.group_conv,
        }
    }
}

/// Forward results for a batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `(B, N_a)` attribute logits.
    pub attr_logits: Tensor,
    /// Detector input pyramid, after attribute/detector attention if enabled.
    pub pyramid: FeaturePyramid,
    pub attributes: AttributeFeatureSet,
}

impl ModelOutput {
    pub fn attr_probs(&self) -> Result<Tensor> {
        sigmoid(&self.attr_logits)
    }
}

#[derive(Clone, Debug)]
pub struct AttrNet {
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub blocks: BTreeMap<u8, AttributeBlock>,
    pub a2: BTreeMap<u8, AttrAttrAttention>,
    pub at: BTreeMap<u8, AttrTbAttention>,
    pub classifier: AttributeClassifier,
    pub detector: Detector,
    pub cfg: ModelConfig,
}

impl AttrNet {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(ps, "backbone", &cfg.backbone)?;
        let fpn = Fpn::new(ps, "fpn", cfg.backbone.widths, cfg.fpn_channels)?;
        let block_cfg = cfg.attribute_block();
        let mut blocks = BTreeMap::new();
        for (level, &width) in LEVELS.iter().zip(&cfg.backbone.widths) {
            blocks.insert(*level, AttributeBlock::new(ps, &format!("attr.block{level}"), width, &block_cfg)?);
        }
        let mut a2 = BTreeMap::new();
        let mut at = BTreeMap::new();
        for &level in cfg.scale_mode.levels() {
            if cfg.ablation.a2_attn {
                a2.insert(
                    level,
                    AttrAttrAttention::new(
                        ps,
                        &format!("a2attn{level}"),
                        cfg.n_attributes,
                        cfg.channels_per_attribute,
                        cfg.head_dim.min(cfg.channels_per_attribute),
                    )?,
                );
            }
            if cfg.ablation.at_attn {
                at.insert(
                    level,
                    AttrTbAttention::new(
                        ps,
                        &format!("atattn{level}"),
                        cfg.channels_per_attribute,
                        cfg.fpn_channels,
                        cfg.similarity_dim,
                        cfg.head_dim,
                        cfg.normalize_weights,
                    )?,
                );
            }
        }
        let classifier = AttributeClassifier::new(
            ps,
            "attr.classifier",
            LEVELS.len() * block_cfg.total_channels(),
            cfg.n_attributes,
        )?;
        let detector = Detector::new(ps, "detector", cfg.fpn_channels, cfg.detector.clone())?;
        Ok(Self {
            backbone,
            fpn,
            blocks,
            a2,
            at,
            classifier,
            detector,
            cfg: cfg.clone(),
        })
    }

    /// `images` is `(B, 1, H, W)` with intensities scaled to `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        let stages = self.backbone.extract_stage_features(images)?;
        let mut pyramid = self.fpn.build_fpn_pyramid(&stages)?;
        let mut attributes = AttributeFeatureSet::default();
        for (&level, block) in &self.blocks {
            let mut feats = block.forward(stages.level(level)?)?;
            if let Some(a2) = self.a2.get(&level) {
                let s = downsample_ratio(self.cfg.downsample_base, level, feats[0].height(), feats[0].width());
                feats = a2.forward(&feats, s)?;
            }
            attributes.levels.insert(level, feats);
        }
        let attr_logits = self.classifier.logits(&fuse_attribute_scales(&attributes)?)?;
        for (&level, at) in &self.at {
            let tb = pyramid.level(level)?;
            let s = downsample_ratio(self.cfg.downsample_base, level, tb.height(), tb.width());
            let refined = at.forward(attributes.level(level)?, tb, s)?;
            pyramid.insert(level, refined);
        }
        Ok(ModelOutput {
            attr_logits,
            pyramid,
            attributes,
        })
    }
}
