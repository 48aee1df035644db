//! Mixed-supervision dataset records.
//!
//! A record carries image-level attribute labels, lesion boxes, or both.
//! Records labeled `healthy` or `sick_non_tb` are detection negatives: their
//! box list, when present, must be empty.

mod manifest;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, load_manifest_expecting, save_manifest};
pub use synth::{synthesize_dataset, LesionBlob, SynthConfig, SyntheticDataset};

/// Number of attribute kinds when nothing else is configured.
pub const DEFAULT_N_ATTRIBUTES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Tb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    SickNonTb,
    Tb,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::SickNonTb => "sick_non_tb",
            Label::Tb => "tb",
        }
    }

    /// Non-TB images are pure background for the detector.
    pub fn is_detection_negative(self) -> bool {
        !matches!(self, Label::Tb)
    }
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left,
/// corner-based and end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub category: Category,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            category: Category::Tb,
        }
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x_min < self.x_max && self.y_min < self.y_max)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
            category: self.category,
        }
    }
}

/// Multi-hot attribute annotation. Entries are expected to be 0 or 1; the
/// type itself does not enforce it so that `validate_record` can report bad
/// values instead of failing at construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeLabelVector(pub Vec<u8>);

impl AttributeLabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XrayRecord {
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub label: Label,
    pub attributes: Option<AttributeLabelVector>,
    pub boxes: Option<Vec<BoundingBox>>,
}

impl XrayRecord {
    pub fn has_attribute_supervision(&self) -> bool {
        self.attributes.is_some()
    }

    /// Box-annotated records and detection negatives both train the detector.
    pub fn has_detection_supervision(&self) -> bool {
        self.boxes.is_some() || self.label.is_detection_negative()
    }

    pub fn gt_boxes(&self) -> &[BoundingBox] {
        self.boxes.as_deref().unwrap_or(&[])
    }

    pub fn resolve_image_path(&self, base_dir: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ZeroDimension,
    NonFiniteBox { index: usize },
    DegenerateBox { index: usize },
    BoxOutsideImage { index: usize },
    NegativeHasBoxes(Label),
    AttributeLength { expected: usize, found: usize },
    NonBinaryAttribute { index: usize, value: u8 },
    NoSupervision,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension => write!(f, "image dimensions must be positive"),
            Violation::NonFiniteBox { index } => write!(f, "non-finite box (box {index})"),
            Violation::DegenerateBox { index } => write!(f, "degenerate box (box {index})"),
            Violation::BoxOutsideImage { index } => {
                write!(f, "box outside image extent (box {index})")
            }
            Violation::NegativeHasBoxes(label) => {
                write!(f, "{} record has boxes", label.as_str())
            }
            Violation::AttributeLength { expected, found } => {
                write!(f, "attribute vector has length {found}, expected {expected}")
            }
            Violation::NonBinaryAttribute { index, value } => {
                write!(f, "attribute {index} has non-binary value {value}")
            }
            Violation::NoSupervision => write!(f, "record carries no supervision"),
        }
    }
}

/// Check every record invariant and report all violations found.
pub fn validate_record(record: &XrayRecord, n_attributes: usize) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if record.width == 0 || record.height == 0 {
        violations.push(Violation::ZeroDimension);
    }
    if let Some(boxes) = &record.boxes {
        let (w, h) = (record.width as f64, record.height as f64);
        for (index, b) in boxes.iter().enumerate() {
            if !b.is_finite() {
                violations.push(Violation::NonFiniteBox { index });
                continue;
            }
            if b.is_degenerate() {
                violations.push(Violation::DegenerateBox { index });
            }
            if !b.within(w, h) {
                violations.push(Violation::BoxOutsideImage { index });
            }
        }
        if record.label.is_detection_negative() && !boxes.is_empty() {
            violations.push(Violation::NegativeHasBoxes(record.label));
        }
    }
    if let Some(attrs) = &record.attributes {
        if attrs.len() != n_attributes {
            violations.push(Violation::AttributeLength {
                expected: n_attributes,
                found: attrs.len(),
            });
        }
        for (index, &value) in attrs.values().iter().enumerate() {
            if value > 1 {
                violations.push(Violation::NonBinaryAttribute { index, value });
            }
        }
    }
    if !record.has_attribute_supervision() && !record.has_detection_supervision() {
        violations.push(Violation::NoSupervision);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<XrayRecord>,
    pub n_attributes: usize,
}

impl DatasetManifest {
    /// (train, val) record counts.
    pub fn split_counts(&self) -> (usize, usize) {
        self.records.iter().fold((0, 0), |(t, v), r| match r.split {
            Split::Train => (t + 1, v),
            Split::Val => (t, v + 1),
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &XrayRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}
