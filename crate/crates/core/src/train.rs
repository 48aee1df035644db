//! Joint training of the detection and attribute branches under mixed
//! supervision, with a step-decay schedule, checkpointing and a CSV log.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribute::{attribute_bce_loss, label_matrix};
use crate::data::{BoundingBox, DatasetManifest, Split, SyntheticDataset, XrayRecord};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::eval::{compute_accuracy, compute_f_score, compute_map, RunMetrics};
use crate::model::{AttrNet, ModelConfig};
use crate::nn::{sigmoid, ParamStore};

/// The two branch losses and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_det: f64,
    pub loss_cls: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn joint_loss(loss_det: f64, loss_cls: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        loss_det,
        loss_cls,
        lambda,
        total: loss_det + lambda * loss_cls,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub lambda: f64,
    pub threads: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            initial_lr: 1e-3,
            lr_decay_every: 20,
            lr_decay_factor: 10.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            lambda: 1.0,
            threads: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("initial_lr", self.initial_lr),
            ("lr_decay_every", self.lr_decay_every as f64),
            ("lr_decay_factor", self.lr_decay_factor),
            ("threads", self.threads as f64),
            ("eval_every", self.eval_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `initial_lr / factor^floor(epoch / every)`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::OutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let k = (epoch / cfg.lr_decay_every.max(1)) as i32;
    Ok(cfg.initial_lr / cfg.lr_decay_factor.powi(k))
}

/// A decoded image batch with per-sample supervision.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 1, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub attributes: Vec<Option<Vec<f32>>>,
    /// `None` = no detection supervision; `Some(vec![])` = negative image.
    pub boxes: Vec<Option<Vec<BoundingBox>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

/// Records and their decoded pixels, kept in memory.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub records: Vec<XrayRecord>,
    pixels: Vec<Vec<f32>>,
    pub height: usize,
    pub width: usize,
    pub n_attributes: usize,
}

/// Ground-truth boxes of a detection-supervised record; `None` when boxes
/// are withheld.
pub fn detection_target(r: &XrayRecord) -> Option<Vec<BoundingBox>> {
    if r.boxes.is_some() || r.label.is_detection_negative() {
        Some(r.gt_boxes().to_vec())
    } else {
        None
    }
}

impl ImageSet {
    /// Decode every record of `split`, resolving image paths against `base`.
    pub fn load(manifest: &DatasetManifest, split: Split, base: &Path) -> Result<Self> {
        let records: Vec<XrayRecord> = manifest.split(split).cloned().collect();
        let mut pixels = Vec::with_capacity(records.len());
        let (mut height, mut width) = (0, 0);
        for r in &records {
            let path = r.resolve_image_path(base);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let img = image::open(&path)?.to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if (w, h) != (r.width as usize, r.height as usize) {
                return Err(Error::shape(format!(
                    "{} is {w}x{h}, manifest says {}x{}",
                    path.display(),
                    r.width,
                    r.height
                )));
            }
            if height == 0 {
                (height, width) = (h, w);
            } else if (h, w) != (height, width) {
                return Err(Error::shape("images in a split must share one size"));
            }
            pixels.push(img.into_raw().into_iter().map(|p| p as f32 / 255.0).collect());
        }
        Self::from_pixels(records, pixels, height, width, manifest.n_attributes)
    }

    /// Every record of a generated corpus, regardless of split.
    pub fn from_synthetic(ds: &SyntheticDataset) -> Result<Self> {
        let records = ds.manifest.records.clone();
        let (height, width) = records
            .first()
            .map(|r| (r.height as usize, r.width as usize))
            .ok_or(Error::EmptyManifest)?;
        let pixels = ds
            .images
            .iter()
            .map(|img| img.as_raw().iter().map(|&p| p as f32 / 255.0).collect())
            .collect();
        Self::from_pixels(records, pixels, height, width, ds.manifest.n_attributes)
    }

    pub fn from_pixels(
        records: Vec<XrayRecord>,
        pixels: Vec<Vec<f32>>,
        height: usize,
        width: usize,
        n_attributes: usize,
    ) -> Result<Self> {
        if records.len() != pixels.len() || pixels.iter().any(|p| p.len() != height * width) {
            return Err(Error::shape("pixel buffers do not match records"));
        }
        Ok(Self {
            records,
            pixels,
            height,
            width,
            n_attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut flat = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            flat.extend_from_slice(&self.pixels[i]);
        }
        let images = Tensor::from_vec(flat, (indices.len(), 1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Batch {
            images,
            attributes: indices
                .iter()
                .map(|&i| self.records[i].attributes.as_ref().map(|a| a.as_f32()))
                .collect(),
            boxes: indices.iter().map(|&i| detection_target(&self.records[i])).collect(),
        })
    }
}

/// Shuffled batches in which, when the pool allows, every batch holds at
/// least one attribute-labeled and one detection-supervised record.
pub fn stratified_batches(records: &[XrayRecord], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let has_attr = |i: usize| records[i].has_attribute_supervision();
    let has_det = |i: usize| detection_target(&records[i]).is_some();
    for kind in 0..2 {
        let pred = |i: usize| if kind == 0 { has_attr(i) } else { has_det(i) };
        let other = |i: usize| if kind == 0 { has_det(i) } else { has_attr(i) };
        for b in 0..batches.len() {
            if batches[b].iter().any(|&i| pred(i)) || batches[b].len() < 2 {
                continue;
            }
            // Donor: another batch with a spare record of this kind.
            let donor = (0..batches.len()).find_map(|d| {
                if d == b || batches[d].iter().filter(|&&i| pred(i)).count() < 2 {
                    return None;
                }
                let pos = batches[d].iter().position(|&i| pred(i) && (!other(i) || batches[d].iter().filter(|&&j| other(j)).count() > 1))?;
                Some((d, pos))
            });
            let Some((d, pos)) = donor else { continue };
            let own_other = batches[b].iter().filter(|&&i| other(i)).count();
            let Some(give) = batches[b].iter().position(|&i| !other(i) || own_other > 1) else { continue };
            let (x, y) = (batches[b][give], batches[d][pos]);
            batches[b][give] = y;
            batches[d][pos] = x;
        }
    }
    batches
}

/// Network, parameters and optimizer state.
pub struct Trainer {
    pub model: AttrNet,
    pub params: ParamStore,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Self::with_dtype(model_cfg, cfg, DType::F32)
    }

    pub fn with_dtype(model_cfg: &ModelConfig, cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(cfg.seed, dtype);
        let model = AttrNet::new(&mut params, model_cfg)?;
        let optimizer = AdamW::new(
            params.vars(),
            ParamsAdamW {
                lr: cfg.initial_lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            },
        )?;
        Ok(Self {
            model,
            params,
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            optimizer,
            // Sampling draws from its own stream so it never perturbs weights.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.set_learning_rate(lr);
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.learning_rate()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Both branch losses as graph tensors, without stepping.
    pub fn branch_losses(&mut self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let out = self.model.forward(&batch.images)?;
        let probs = sigmoid(&out.attr_logits)?;
        let mask: Vec<bool> = batch.attributes.iter().map(Option::is_some).collect();
        let labels = label_matrix(&batch.attributes, self.model_cfg.n_attributes, probs.dtype())?;
        let loss_cls = attribute_bce_loss(&probs, &labels, &mask)?;
        let loss_det = if batch.boxes.iter().any(Option::is_some) {
            self.model.detector.loss(&out.pyramid, &batch.boxes, &mut self.rng)?.total
        } else {
            Tensor::zeros((), probs.dtype(), probs.device())?
        };
        Ok((loss_det, loss_cls))
    }

    /// One optimizer step on the weighted sum of both branch losses.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (det, cls) = self.branch_losses(batch)?;
        let total = (&det + (&cls * self.cfg.lambda)?)?;
        self.optimizer.backward_step(&total)?;
        Ok(joint_loss(scalar(&det)?, scalar(&cls)?, self.cfg.lambda))
    }

    /// Attribute probabilities and detections for a batch.
    pub fn predict(&self, images: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<Detection>>)> {
        let out = self.model.forward(images)?;
        let probs = sigmoid(&out.attr_logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let dets = self.model.detector.detect(&out.pyramid)?;
        Ok((probs, dets))
    }

    /// Attribute accuracy/F-score over attribute-labeled records and mAP
    /// over detection-supervised records.
    pub fn evaluate(&self, data: &ImageSet) -> Result<RunMetrics> {
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        let (mut dets, mut gts) = (Vec::new(), Vec::new());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(self.cfg.batch_size.max(1)) {
            let batch = data.batch(chunk, self.params.dtype())?;
            let (p, d) = self.predict(&batch.images)?;
            for (k, &i) in chunk.iter().enumerate() {
                let r = &data.records[i];
                if let Some(a) = &r.attributes {
                    probs.push(p[k].clone());
                    labels.push(a.values().to_vec());
                }
                if let Some(g) = detection_target(r) {
                    dets.push(d[k].clone());
                    gts.push(g);
                }
            }
        }
        Ok(RunMetrics {
            accuracy: compute_accuracy(&probs, &labels, 0.5)?,
            f_score: compute_f_score(&probs, &labels, 0.5)?,
            map: compute_map(&dets, &gts, 0.5),
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, config_echo: &BTreeMap<String, String>) -> Result<()> {
        let meta: HashMap<String, String> = config_echo.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        self.params.save(path, meta)
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.params.load(path)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_det: f64,
    pub loss_cls: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_map: f64,
}

pub const METRICS_HEADER: [&str; 7] = ["epoch", "loss_det", "loss_cls", "total", "val_acc", "val_f1", "val_map"];
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn write_metrics(path: impl AsRef<Path>, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.loss_det.to_string(),
            r.loss_cls.to_string(),
            r.total.to_string(),
            r.val_acc.to_string(),
            r.val_f1.to_string(),
            r.val_map.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let malformed = |reason: String| Error::MalformedLog {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let header = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(malformed(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| malformed(format!("row {}: bad value `{}`", n + 1, &rec[i])))
        };
        rows.push(EpochRecord {
            epoch: rec[0]
                .parse()
                .map_err(|_| malformed(format!("row {}: bad epoch `{}`", n + 1, &rec[0])))?,
            loss_det: f(1)?,
            loss_cls: f(2)?,
            total: f(3)?,
            val_acc: f(4)?,
            val_f1: f(5)?,
            val_map: f(6)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub final_metrics: RunMetrics,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Full schedule over the train split with validation every `eval_every`
/// epochs (and after the last). Skipped validations are logged as NaN.
pub fn run_training(
    train: &ImageSet,
    val: &ImageSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    config_echo: &BTreeMap<String, String>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let metrics_log = out_dir.join(METRICS_FILE);
    let mut last = RunMetrics {
        f_score: f64::NAN,
        accuracy: f64::NAN,
        map: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        trainer.set_learning_rate(lr_at_epoch(epoch, cfg)?);
        let batches = stratified_batches(&train.records, cfg.batch_size, trainer.rng());
        let (mut det, mut cls, mut n) = (0.0, 0.0, 0usize);
        for idx in &batches {
            let batch = train.batch(idx, DType::F32)?;
            let step = trainer.train_step(&batch)?;
            det += step.loss_det;
            cls += step.loss_cls;
            n += 1;
        }
        let mean = joint_loss(det / n as f64, cls / n as f64, cfg.lambda);
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let metrics = if evaluate && !val.is_empty() {
            last = trainer.evaluate(val)?;
            last
        } else {
            RunMetrics {
                f_score: f64::NAN,
                accuracy: f64::NAN,
                map: f64::NAN,
            }
        };
        log::info!(
            "epoch {epoch}: det {:.4} cls {:.4} total {:.4} acc {:.4} f1 {:.4} map {:.4}",
            mean.loss_det,
            mean.loss_cls,
            mean.total,
            metrics.accuracy,
            metrics.f_score,
            metrics.map
        );
        history.push(EpochRecord {
            epoch,
            loss_det: mean.loss_det,
            loss_cls: mean.loss_cls,
            total: mean.total,
            val_acc: metrics.accuracy,
            val_f1: metrics.f_score,
            val_map: metrics.map,
        });
        write_metrics(&metrics_log, &history)?;
    }
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trainer.save_checkpoint(&checkpoint, config_echo)?;
    Ok(TrainOutcome {
        history,
        final_metrics: last,
        checkpoint,
        metrics_log,
    })
}
