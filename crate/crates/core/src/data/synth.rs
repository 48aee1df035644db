//! Deterministic synthetic corpus standing in for the clinical datasets.
//!
//! Generation rule for record `i` of `n`:
//!
//! * Label cycles `tb, healthy, tb, sick_non_tb` with `i mod 4`.
//! * Attribute bits: healthy records have none; `sick_non_tb` sets each bit
//!   with probability 0.2; `tb` sets each bit with probability 0.5 and at
//!   least one bit.
//! * Every set attribute `k` paints a faint sign mark (a small Gaussian spot)
//!   centered on column `(k + 1) / (n_attributes + 1)` of the top band.
//! * `tb` records contain `1 + a[0]` bright lesion blobs, pairwise disjoint
//!   with a 2 px gap, below the top band. Attribute bit 1 enlarges the blob
//!   radii by 1.5x. Each blob is an elliptical bump; its annotated box is the
//!   bounding box of the ellipse support.
//! * The last `max(1, round(n * val_fraction))` records form the val split and
//!   are fully supervised. A train record is attribute-only with probability
//!   `attr_only_fraction`, box-only with probability `box_only_fraction`, and
//!   carries both kinds of label otherwise.

use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::manifest::manifest_to_string;
use super::{
    save_manifest, AttributeLabelVector, BoundingBox, DatasetManifest, Label, Split, XrayRecord,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_records: usize,
    pub image_size: usize,
    pub n_attributes: usize,
    pub attr_only_fraction: f64,
    pub box_only_fraction: f64,
    pub val_fraction: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_records: usize, image_size: usize, n_attributes: usize) -> Self {
        Self {
            seed,
            n_records,
            image_size,
            n_attributes,
            attr_only_fraction: 0.25,
            box_only_fraction: 0.25,
            val_fraction: 0.15,
        }
    }
}

/// One painted lesion: an axis-aligned elliptical bump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionBlob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl LesionBlob {
    /// Bounding box of the region where the blob adds intensity.
    pub fn support(&self) -> BoundingBox {
        BoundingBox::new(
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
    /// Painted lesions per record, including those of records whose boxes
    /// are withheld.
    pub lesions: Vec<Vec<LesionBlob>>,
}

impl SyntheticDataset {
    /// SHA-256 over the manifest text followed by every image's raw pixels.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(manifest_to_string(&self.manifest)?.as_bytes());
        for img in &self.images {
            h.update(img.as_raw());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Write `manifest.jsonl` and `images/*.png` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        for (record, img) in self.manifest.records.iter().zip(&self.images) {
            img.save(dir.join(&record.image_path))?;
        }
        save_manifest(&self.manifest, dir.join("manifest.jsonl"))
    }
}

pub fn synthesize_dataset(
    seed: u64,
    n_records: usize,
    image_size: usize,
    n_attributes: usize,
) -> Result<SyntheticDataset> {
    generate(&SynthConfig::new(seed, n_records, image_size, n_attributes))
}

enum Supervision {
    Both,
    AttributesOnly,
    BoxesOnly,
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    let size = cfg.image_size;
    if size == 0 || size % 32 != 0 {
        return Err(Error::InvalidSize(size));
    }
    if cfg.n_records < 2 {
        return Err(Error::Config(format!(
            "need at least 2 records, got {}",
            cfg.n_records
        )));
    }
    if cfg.n_attributes == 0 {
        return Err(Error::Config("n_attributes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_records;
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);

    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut lesions = Vec::with_capacity(n);
    for i in 0..n {
        let label = match i % 4 {
            0 | 2 => Label::Tb,
            1 => Label::Healthy,
            _ => Label::SickNonTb,
        };
        let split = if i >= n - n_val {
            Split::Val
        } else {
            Split::Train
        };
        let attrs = draw_attributes(&mut rng, label, cfg.n_attributes);
        let blobs = if label == Label::Tb {
            place_lesions(&mut rng, &attrs, size)
        } else {
            Vec::new()
        };
        let image = paint(&mut rng, size, &attrs, &blobs);

        let supervision = if split == Split::Val {
            Supervision::Both
        } else {
            let u: f64 = rng.random();
            if u < cfg.attr_only_fraction {
                Supervision::AttributesOnly
            } else if u < cfg.attr_only_fraction + cfg.box_only_fraction {
                Supervision::BoxesOnly
            } else {
                Supervision::Both
            }
        };
        let boxes: Vec<BoundingBox> = blobs.iter().map(LesionBlob::support).collect();
        let (attributes, boxes) = match supervision {
            Supervision::Both => (Some(attrs), Some(boxes)),
            Supervision::AttributesOnly => (Some(attrs), None),
            Supervision::BoxesOnly => (None, Some(boxes)),
        };
        records.push(XrayRecord {
            image_path: format!("images/{i:05}.png"),
            width: size as u32,
            height: size as u32,
            split,
            label,
            attributes: attributes.map(AttributeLabelVector),
            boxes,
        });
        images.push(image);
        lesions.push(blobs);
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            records,
            n_attributes: cfg.n_attributes,
        },
        images,
        lesions,
    })
}

fn draw_attributes(rng: &mut ChaCha8Rng, label: Label, n: usize) -> Vec<u8> {
    match label {
        Label::Healthy => vec![0; n],
        Label::SickNonTb => (0..n).map(|_| rng.random_bool(0.2) as u8).collect(),
        Label::Tb => {
            let mut bits: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
            if bits.iter().all(|&b| b == 0) {
                bits[rng.random_range(0..n)] = 1;
            }
            bits
        }
    }
}

fn top_band(size: usize) -> f64 {
    size as f64 * 0.2
}

fn place_lesions(rng: &mut ChaCha8Rng, attrs: &[u8], size: usize) -> Vec<LesionBlob> {
    let s = size as f64;
    let wanted = 1 + attrs[0] as usize;
    let grow = if attrs.get(1) == Some(&1) { 1.5 } else { 1.0 };
    let (r_lo, r_hi) = (s / 16.0, s / 10.0);
    let mut blobs: Vec<LesionBlob> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..64 {
            let rx = rng.random_range(r_lo..r_hi) * grow;
            let ry = rng.random_range(r_lo..r_hi) * grow;
            let cx = rng.random_range(rx + 1.0..s - rx - 1.0);
            let cy = rng.random_range(top_band(size) + ry..s - ry - 1.0);
            let cand = LesionBlob { cx, cy, rx, ry };
            let clear = blobs.iter().all(|b| {
                let (p, q) = (b.support(), cand.support());
                p.x_max + 2.0 <= q.x_min
                    || q.x_max + 2.0 <= p.x_min
                    || p.y_max + 2.0 <= q.y_min
                    || q.y_max + 2.0 <= p.y_min
            });
            if clear {
                blobs.push(cand);
                break;
            }
        }
    }
    blobs
}

fn paint(rng: &mut ChaCha8Rng, size: usize, attrs: &[u8], blobs: &[LesionBlob]) -> GrayImage {
    let s = size as f64;
    let sigma = s / 40.0;
    let marks: Vec<(f64, f64)> = attrs
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(k, _)| (s * (k + 1) as f64 / (attrs.len() + 1) as f64, s * 0.1))
        .collect();
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = 45.0 + 25.0 * (std::f64::consts::PI * px / s).sin();
        v += rng.random_range(-6.0..6.0);
        for &(mx, my) in &marks {
            let d2 = (px - mx).powi(2) + (py - my).powi(2);
            v += 55.0 * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        for b in blobs {
            let d2 = ((px - b.cx) / b.rx).powi(2) + ((py - b.cy) / b.ry).powi(2);
            if d2 < 1.0 {
                v += 150.0 * (1.0 - d2).powi(2);
            }
        }
        image::Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}
