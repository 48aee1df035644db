//! Residual backbone producing stage features C2..C5 and the top-down
//! feature pyramid P2..P5 built from them.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{upsample_nearest2x, Conv2d, ParamStore};

/// Pyramid levels in increasing stride order.
pub const LEVELS: [u8; 4] = [2, 3, 4, 5];

pub fn level_stride(level: u8) -> usize {
    1 << level
}

/// A batched `(B, C, H, W)` feature grid with its stride relative to the input.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: usize) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape(format!(
                "feature map must be rank 4, got {:?}",
                values.dims()
            )));
        }
        Ok(Self { values, stride })
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[3]
    }

    pub fn all_finite(&self) -> Result<bool> {
        let v = self
            .values
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FeaturePyramid {
    levels: BTreeMap<u8, FeatureMap>,
}

impl FeaturePyramid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, level: u8, map: FeatureMap) {
        self.levels.insert(level, map);
    }

    pub fn level(&self, level: u8) -> Result<&FeatureMap> {
        self.levels.get(&level).ok_or(Error::MissingLevel(level))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &FeatureMap)> {
        self.levels.iter().map(|(&l, m)| (l, m))
    }

    pub fn levels(&self) -> impl Iterator<Item = u8> + '_ {
        self.levels.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn require_all(&self) -> Result<()> {
        for l in LEVELS {
            self.level(l)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackbonePreset {
    Tiny,
    Resnet50Like,
}

impl BackbonePreset {
    pub fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Resnet50Like => "resnet50_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "resnet50_like" => Ok(Self::Resnet50Like),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of stages C2..C5.
    pub widths: [usize; 4],
    /// Residual blocks per stage.
    pub depths: [usize; 4],
    pub bottleneck: bool,
}

impl BackboneConfig {
    /// Four single-block stages; the default for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            preset: BackbonePreset::Tiny,
            in_channels: 1,
            stem_channels: 8,
            widths: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            bottleneck: false,
        }
    }

    /// Bottleneck stages laid out like ResNet-50.
    pub fn resnet50_like() -> Self {
        Self {
            preset: BackbonePreset::Resnet50Like,
            in_channels: 1,
            stem_channels: 64,
            widths: [256, 512, 1024, 2048],
            depths: [3, 4, 6, 3],
            bottleneck: true,
        }
    }

    pub fn from_preset(preset: BackbonePreset) -> Self {
        match preset {
            BackbonePreset::Tiny => Self::tiny(),
            BackbonePreset::Resnet50Like => Self::resnet50_like(),
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    convs: Vec<Conv2d>,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    fn basic(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let convs = vec![
            Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1)?,
            Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1)?,
        ];
        Ok(Self {
            convs,
            shortcut: Self::shortcut(ps, name, c_in, c_out, stride)?,
        })
    }

    fn bottleneck(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let mid = (c_out / 4).max(1);
        let convs = vec![
            Conv2d::new(ps, &format!("{name}.conv1"), c_in, mid, 1, 1, 1)?,
            Conv2d::new(ps, &format!("{name}.conv2"), mid, mid, 3, stride, 1)?,
            Conv2d::new(ps, &format!("{name}.conv3"), mid, c_out, 1, 1, 1)?,
        ];
        Ok(Self {
            convs,
            shortcut: Self::shortcut(ps, name, c_in, c_out, stride)?,
        })
    }

    fn shortcut(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Option<Conv2d>> {
        if stride == 1 && c_in == c_out {
            return Ok(None);
        }
        Ok(Some(Conv2d::new(
            ps,
            &format!("{name}.shortcut"),
            c_in,
            c_out,
            1,
            stride,
            1,
        )?))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Vec<Conv2d>,
    stages: Vec<Vec<ResidualBlock>>,
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let stem = vec![
            Conv2d::new(ps, &format!("{name}.stem1"), cfg.in_channels, cfg.stem_channels, 3, 2, 1)?,
            Conv2d::new(ps, &format!("{name}.stem2"), cfg.stem_channels, cfg.stem_channels, 3, 2, 1)?,
        ];
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.stem_channels;
        for (s, (&width, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth.max(1) {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block_name = format!("{name}.stage{}.block{b}", s + 2);
                blocks.push(if cfg.bottleneck {
                    ResidualBlock::bottleneck(ps, &block_name, c_in, width, stride)?
                } else {
                    ResidualBlock::basic(ps, &block_name, c_in, width, stride)?
                });
                c_in = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stages,
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Stage outputs C2..C5 at strides 4, 8, 16, 32 for a `(B, 1, H, W)` batch.
    pub fn extract_stage_features(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by 32"
            )));
        }
        let mut x = images.clone();
        for conv in &self.stem {
            x = conv.forward(&x)?.relu()?;
        }
        let mut pyramid = FeaturePyramid::new();
        for (level, blocks) in LEVELS.iter().zip(&self.stages) {
            for block in blocks {
                x = block.forward(&x)?;
            }
            pyramid.insert(*level, FeatureMap::new(x.clone(), level_stride(*level))?);
        }
        Ok(pyramid)
    }
}

/// Lateral 1x1 projections merged top-down with nearest 2x upsampling.
#[derive(Clone, Debug)]
pub struct Fpn {
    laterals: BTreeMap<u8, Conv2d>,
    channels: usize,
}

impl Fpn {
    pub fn new(ps: &mut ParamStore, name: &str, stage_widths: [usize; 4], channels: usize) -> Result<Self> {
        let mut laterals = BTreeMap::new();
        for (level, width) in LEVELS.iter().zip(stage_widths) {
            laterals.insert(
                *level,
                Conv2d::new(ps, &format!("{name}.lateral{level}"), width, channels, 1, 1, 1)?,
            );
        }
        Ok(Self { laterals, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lateral(&self, level: u8) -> Result<&Conv2d> {
        self.laterals.get(&level).ok_or(Error::MissingLevel(level))
    }

    pub fn build_fpn_pyramid(&self, stages: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut out = FeaturePyramid::new();
        let mut above: Option<Tensor> = None;
        for &level in LEVELS.iter().rev() {
            let stage = stages.level(level)?;
            let mut merged = self.lateral(level)?.forward(&stage.values)?;
            if let Some(up) = &above {
                let up = upsample_nearest2x(up)?;
                if up.dims() != merged.dims() {
                    return Err(Error::shape(format!(
                        "level {level}: upsampled {:?} vs lateral {:?}",
                        up.dims(),
                        merged.dims()
                    )));
                }
                merged = (merged + up)?;
            }
            out.insert(level, FeatureMap::new(merged.clone(), stage.stride)?);
            above = Some(merged);
        }
        Ok(out)
    }
}
