//! Flat `key = value` run configuration. Files are TOML; tables flatten to
//! dotted keys, so `[attn] head_dim = 4` and `"attn.head_dim" = 4` mean the
//! same. Precedence is defaults < file < overrides, and `backbone.preset`
//! is applied before anything else so later keys refine the preset.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackbonePreset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScaleMode};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Every key that was set explicitly, rendered as TOML values.
    pub explicit: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            explicit: BTreeMap::new(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

pub fn parse_document(text: &str) -> Result<BTreeMap<String, toml::Value>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parse a `key=value` override. The value is read as a TOML value and
/// falls back to a bare string, so `backbone.preset=tiny` works unquoted.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = k.trim().to_string();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let v = v.trim();
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((key, value))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{key}: expected a nonnegative integer, got {v}"))),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("{key}: expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

fn as_f64_list(key: &str, v: &toml::Value) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key}: expected an array, got {v}")))?;
    let list = arr.iter().map(|x| as_f64(key, x)).collect::<Result<Vec<_>>>()?;
    if list.is_empty() {
        return Err(Error::Config(format!("{key}: must not be empty")));
    }
    Ok(list)
}

fn as_weights(key: &str, v: &toml::Value) -> Result<[f64; 4]> {
    let l = as_f64_list(key, v)?;
    l.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four weights")))
}

impl RunConfig {
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, toml::Value)>,
    {
        let mut cfg = Self::default();
        let mut rest = Vec::new();
        for (k, v) in entries {
            if k == "backbone.preset" {
                let preset = BackbonePreset::parse(as_str(&k, &v)?)?;
                cfg.model = ModelConfig::from_preset(preset);
                cfg.explicit.insert(k, v.to_string());
            } else {
                rest.push((k, v));
            }
        }
        for (k, v) in rest {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, toml::Value)> = Vec::new();
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
            entries.extend(parse_document(&std::fs::read_to_string(p)?)?);
        }
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        // Presets reset the model section, so the last preset wins and is
        // applied first; every other key keeps its relative order.
        let preset = entries.iter().rev().find(|(k, _)| k == "backbone.preset").cloned();
        let mut ordered: Vec<(String, toml::Value)> = preset.into_iter().collect();
        ordered.extend(entries.into_iter().filter(|(k, _)| k != "backbone.preset"));
        Self::from_entries(ordered)
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let m = &mut self.model;
        let d = &mut m.detector;
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = as_usize(key, v)?,
            "batch_size" => t.batch_size = as_usize(key, v)?,
            "initial_lr" => t.initial_lr = as_f64(key, v)?,
            "lr_decay_every" => t.lr_decay_every = as_usize(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = as_f64(key, v)?,
            "weight_decay" => t.weight_decay = as_f64(key, v)?,
            "seed" => t.seed = as_usize(key, v)? as u64,
            "lambda" => t.lambda = as_f64(key, v)?,
            "threads" => t.threads = as_usize(key, v)?,
            "eval_every" => t.eval_every = as_usize(key, v)?,
            "optimizer" => {
                let name = as_str(key, v)?;
                if name != "adamw" {
                    return Err(Error::Config(format!("optimizer `{name}` is not supported (adamw)")));
                }
            }
            "fpn.channels" => m.fpn_channels = as_usize(key, v)?,
            "attr.n_attributes" => m.n_attributes = as_usize(key, v)?,
            "attr.channels_per_attribute" => m.channels_per_attribute = as_usize(key, v)?,
            "attr.kernel_size" => m.attr_kernel_size = as_usize(key, v)?,
            "attn.head_dim" => m.head_dim = as_usize(key, v)?,
            "attn.downsample_base" => m.downsample_base = as_usize(key, v)?,
            "atattn.normalize_weights" => m.normalize_weights = as_bool(key, v)?,
            "atattn.similarity_dim" => m.similarity_dim = as_usize(key, v)?,
            "ablation.group_conv" => m.ablation.group_conv = as_bool(key, v)?,
            "ablation.a2_attn" => m.ablation.a2_attn = as_bool(key, v)?,
            "ablation.at_attn" => m.ablation.at_attn = as_bool(key, v)?,
            "scale_mode" => m.scale_mode = ScaleMode::parse(as_str(key, v)?)?,
            "detector.anchor_base" => d.anchors.base = as_f64(key, v)?,
            "detector.anchor_scales" => d.anchors.scales = as_f64_list(key, v)?,
            "detector.anchor_aspects" => d.anchors.aspects = as_f64_list(key, v)?,
            "detector.rpn_pos_iou" => d.rpn_pos_iou = as_f64(key, v)?,
            "detector.rpn_neg_iou" => d.rpn_neg_iou = as_f64(key, v)?,
            "detector.rpn_batch_per_image" => d.rpn_batch_per_image = as_usize(key, v)?,
            "detector.rpn_pos_fraction" => d.rpn_pos_fraction = as_f64(key, v)?,
            "detector.pre_nms_top_n" => d.pre_nms_top_n = as_usize(key, v)?,
            "detector.rpn_nms_thresh" => d.rpn_nms_thresh = as_f64(key, v)?,
            "detector.post_nms_top_n" => d.post_nms_top_n = as_usize(key, v)?,
            "detector.roi_output_size" => d.roi.output_size = as_usize(key, v)?,
            "detector.roi_sampling_ratio" => d.roi.sampling_ratio = as_usize(key, v)?,
            "detector.roi_batch_per_image" => d.roi_batch_per_image = as_usize(key, v)?,
            "detector.roi_pos_fraction" => d.roi_pos_fraction = as_f64(key, v)?,
            "detector.roi_fg_iou" => d.roi_fg_iou = as_f64(key, v)?,
            "detector.rpn_box_weights" => d.rpn_box_weights = as_weights(key, v)?,
            "detector.roi_box_weights" => d.roi_box_weights = as_weights(key, v)?,
            "detector.smooth_l1_beta" => d.smooth_l1_beta = as_f64(key, v)?,
            "detector.score_thresh" => d.score_thresh = as_f64(key, v)?,
            "detector.nms_thresh" => d.nms_thresh = as_f64(key, v)?,
            "detector.max_detections" => d.max_detections = as_usize(key, v)?,
            "backbone.preset" => {
                let preset = BackbonePreset::parse(as_str(key, v)?)?;
                self.model = ModelConfig::from_preset(preset);
            }
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        self.explicit.insert(key.to_string(), v.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.model.detector;
        if !(0.0 <= d.rpn_neg_iou && d.rpn_neg_iou < d.rpn_pos_iou && d.rpn_pos_iou <= 1.0) {
            return Err(Error::Config("anchor thresholds need 0 <= neg < pos <= 1".into()));
        }
        if self.model.head_dim == 0 || self.model.fpn_channels % self.model.head_dim != 0 {
            return Err(Error::Config(format!(
                "attn.head_dim {} must divide fpn.channels {}",
                self.model.head_dim, self.model.fpn_channels
            )));
        }
        Ok(())
    }

    /// Checkpoint metadata: the explicit keys plus the resolved ablation
    /// and scale settings, which determine the checkpoint's weight names.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut e = self.explicit.clone();
        let m = &self.model;
        e.insert("backbone.preset".into(), format!("\"{}\"", m.backbone.preset.as_str()));
        e.insert("ablation.group_conv".into(), m.ablation.group_conv.to_string());
        e.insert("ablation.a2_attn".into(), m.ablation.a2_attn.to_string());
        e.insert("ablation.at_attn".into(), m.ablation.at_attn.to_string());
        e.insert("scale_mode".into(), format!("\"{}\"", m.scale_mode.as_str()));
        e.insert("attr.n_attributes".into(), m.n_attributes.to_string());
        e
    }

    /// Inverse of [`echo`](Self::echo).
    pub fn from_echo(echo: &std::collections::HashMap<String, String>) -> Result<Self> {
        let mut entries: Vec<(String, toml::Value)> = Vec::new();
        for (k, v) in echo {
            entries.push(parse_override(&format!("{k}={v}"))?);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let preset = entries.iter().position(|(k, _)| k == "backbone.preset");
        if let Some(i) = preset {
            let p = entries.remove(i);
            entries.insert(0, p);
        }
        Self::from_entries(entries)
    }
}
