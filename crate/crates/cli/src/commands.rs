use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use attrnet_core::data::{load_manifest, synthesize_dataset, Split};
use attrnet_core::eval::{
    ablation_grid, ablation_report, compute_accuracy, compute_f_score, compute_map, config_key, precision_recall_curve,
    ConfigKey,
};
use attrnet_core::nn::read_metadata;
use attrnet_core::train::{
    detection_target, read_metrics, run_training, EpochRecord, ImageSet, CHECKPOINT_FILE, METRICS_FILE,
};
use attrnet_core::{Ablation, Error, EvalReport, RunConfig, RunMetrics, ScaleMode, Trainer};
use attrnet_core::DType;

use crate::plot::{LineChart, Series};
use crate::{AblateArgs, Command, EvalArgs, PlotArgs, SplitArg, SynthArgs, TrainArgs};

pub(crate) fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot(a),
    }
}

fn guard(outputs: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    if let Some(p) = outputs.iter().find(|p| p.exists()) {
        bail!("{} already exists; pass --overwrite to replace it", p.display());
    }
    Ok(())
}

fn apply_threads(threads: usize) {
    if threads > 0 && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn synth(a: SynthArgs) -> Result<()> {
    guard(&[a.out.join("manifest.jsonl")], a.overwrite)?;
    let ds = synthesize_dataset(a.seed, a.n, a.size, a.n_attributes)?;
    ds.write_to(&a.out)?;
    let (train, val) = ds.manifest.split_counts();
    println!("wrote {} records ({train} train, {val} val) to {}", ds.manifest.records.len(), a.out.display());
    println!("digest {}", ds.digest()?);
    Ok(())
}

fn load_splits(manifest: &Path) -> Result<(ImageSet, ImageSet)> {
    let m = load_manifest(manifest)?;
    let base = base_dir(manifest);
    Ok((ImageSet::load(&m, Split::Train, &base)?, ImageSet::load(&m, Split::Val, &base)?))
}

fn write_echo(path: &Path, echo: &BTreeMap<String, String>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (k, v) in echo {
        writeln!(f, "\"{k}\" = {v}")?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    guard(&[a.out.join(CHECKPOINT_FILE), a.out.join(METRICS_FILE)], a.overwrite)?;
    apply_threads(cfg.train.threads);
    let (train, val) = load_splits(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let echo = cfg.echo();
    write_echo(&a.out.join("config.toml"), &echo)?;
    let outcome = run_training(&train, &val, &cfg.model, &cfg.train, &a.out, &echo)?;
    let m = outcome.final_metrics;
    println!(
        "accuracy {:.4} f_score {:.4} map {:.4}; checkpoint {}",
        m.accuracy,
        m.f_score,
        m.map,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| base_dir(&a.checkpoint));
    guard(
        &[out.join("detections.jsonl"), out.join("eval_metrics.json"), out.join("pr_curve.csv")],
        a.overwrite,
    )?;
    if !a.checkpoint.exists() {
        return Err(Error::MissingFile(a.checkpoint.clone()).into());
    }
    let cfg = RunConfig::from_echo(&read_metadata(&a.checkpoint)?)?;
    apply_threads(cfg.train.threads);
    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    trainer.load_checkpoint(&a.checkpoint)?;

    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let manifest = load_manifest(&a.data)?;
    let set = ImageSet::load(&manifest, split, &base_dir(&a.data))?;
    if set.is_empty() {
        bail!("split `{}` of {} is empty", split.as_str(), a.data.display());
    }
    fs::create_dir_all(&out)?;

    let (mut probs, mut labels, mut dets, mut gts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut jsonl = fs::File::create(out.join("detections.jsonl"))?;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(cfg.train.batch_size.max(1)) {
        let batch = set.batch(chunk, DType::F32)?;
        let (p, d) = trainer.predict(&batch.images)?;
        for (k, &i) in chunk.iter().enumerate() {
            let r = &set.records[i];
            let boxes: Vec<[f64; 5]> = d[k]
                .iter()
                .map(|det| {
                    let [x1, y1, x2, y2] = det.bbox.coords();
                    [x1, y1, x2, y2, det.score]
                })
                .collect();
            let line = serde_json::json!({ "image_path": r.image_path, "boxes": boxes });
            writeln!(jsonl, "{line}")?;
            if let Some(attr) = &r.attributes {
                probs.push(p[k].clone());
                labels.push(attr.values().to_vec());
            }
            if let Some(g) = detection_target(r) {
                dets.push(d[k].clone());
                gts.push(g);
            }
        }
    }
    let metrics = RunMetrics {
        accuracy: compute_accuracy(&probs, &labels, 0.5)?,
        f_score: compute_f_score(&probs, &labels, 0.5)?,
        map: compute_map(&dets, &gts, 0.5),
    };
    let summary = serde_json::json!({
        "split": split.as_str(),
        "n_images": set.len(),
        "accuracy": metrics.accuracy,
        "f_score": metrics.f_score,
        "map": metrics.map,
    });
    fs::write(out.join("eval_metrics.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut w = csv::Writer::from_path(out.join("pr_curve.csv"))?;
    w.write_record(PR_HEADER)?;
    for p in precision_recall_curve(&dets, &gts, 0.5) {
        w.write_record([p.score.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush()?;
    println!("accuracy {:.4} f_score {:.4} map {:.4}", metrics.accuracy, metrics.f_score, metrics.map);
    Ok(())
}

const PR_HEADER: [&str; 3] = ["score", "precision", "recall"];

/// Directory name of one ablation run.
fn run_slug(ablation: Ablation, scale: ScaleMode) -> String {
    if ablation == Ablation::BASELINE {
        return "baseline".into();
    }
    let b = |v: bool| u8::from(v);
    format!(
        "{}_gc{}_a2{}_at{}",
        scale.as_str(),
        b(ablation.group_conv),
        b(ablation.a2_attn),
        b(ablation.at_attn)
    )
}

struct Job {
    ablation: Ablation,
    scale: ScaleMode,
    seed_index: usize,
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    guard(&[a.out.join("ablation_report.csv"), a.out.join("runs")], a.overwrite)?;
    apply_threads(base.train.threads);
    fs::create_dir_all(&a.out)?;
    let manifest = match &a.data {
        Some(m) => m.clone(),
        None => {
            let dir = a.out.join("data");
            let ds = synthesize_dataset(a.synth_seed, a.synth_n, a.synth_size, base.model.n_attributes)?;
            ds.write_to(&dir)?;
            dir.join("manifest.jsonl")
        }
    };
    let (train, val) = load_splits(&manifest)?;

    let jobs: Vec<Job> = ablation_grid()
        .into_iter()
        .flat_map(|(_, ablation, scale)| {
            (0..a.seeds).map(move |seed_index| Job {
                ablation,
                scale,
                seed_index,
            })
        })
        .collect();
    let run_job = |job: &Job| -> Result<RunMetrics> {
        let mut cfg = base.clone();
        let ab = job.ablation;
        cfg.set("ablation.group_conv", &toml_bool(ab.group_conv))?;
        cfg.set("ablation.a2_attn", &toml_bool(ab.a2_attn))?;
        cfg.set("ablation.at_attn", &toml_bool(ab.at_attn))?;
        cfg.set("scale_mode", &toml::Value::String(job.scale.as_str().into()))?;
        cfg.set("seed", &toml::Value::Integer((base.train.seed + job.seed_index as u64) as i64))?;
        let dir = a
            .out
            .join("runs")
            .join(run_slug(ab, job.scale))
            .join(format!("seed{}", job.seed_index));
        log::info!("training {}", dir.display());
        let outcome = run_training(&train, &val, &cfg.model, &cfg.train, &dir, &cfg.echo())?;
        Ok(outcome.final_metrics)
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunMetrics>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(&jobs[i]);
                results.lock().expect("result slot poisoned")[i] = Some(r);
            });
        }
    });

    let mut runs: BTreeMap<ConfigKey, (Ablation, ScaleMode, Vec<RunMetrics>)> = BTreeMap::new();
    for (job, r) in jobs.iter().zip(results.into_inner().expect("result slot poisoned")) {
        let m = r.context("worker exited without a result")??;
        runs.entry(config_key(job.ablation, job.scale))
            .or_insert_with(|| (job.ablation, job.scale, Vec::new()))
            .2
            .push(m);
    }
    let mut reports = BTreeMap::new();
    for (key, (ablation, scale, metrics)) in runs {
        reports.insert(key, EvalReport::from_runs(&metrics, ablation, scale)?);
    }
    let table = ablation_report(&reports)?;
    table.write(&a.out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn toml_bool(v: bool) -> toml::Value {
    toml::Value::Boolean(v)
}

/// Legend names for a set of files: the file stem, qualified by the parent
/// directory when stems collide (every run logs to `metrics.csv`).
pub fn series_labels(paths: &[PathBuf]) -> Vec<String> {
    let stem = |p: &PathBuf| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in paths {
        *counts.entry(stem(p)).or_default() += 1;
    }
    paths
        .iter()
        .map(|p| {
            let s = stem(p);
            if counts[&s] > 1 {
                let parent = p
                    .parent()
                    .and_then(Path::file_name)
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                format!("{parent}/{s}")
            } else {
                s
            }
        })
        .collect()
}

fn read_pr_curve(path: &Path) -> attrnet_core::Result<Vec<(f64, f64)>> {
    let malformed = |reason: String| Error::MalformedLog {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let header = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().ne(PR_HEADER) {
        return Err(malformed(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut points = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let f = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| malformed(format!("row {}: bad value `{}`", n + 1, &rec[i])))
        };
        points.push((f(2)?, f(1)?));
    }
    Ok(points)
}

/// Write `loss_curve.png` and `val_metrics.png` for `logs`, plus
/// `pr_curve_<name>.png` for every PR file. Returns the files written.
pub fn emit_plots(logs: &[PathBuf], pr_files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let histories: Vec<Vec<EpochRecord>> = logs.iter().map(read_metrics).collect::<attrnet_core::Result<_>>()?;
    let curves: Vec<Vec<(f64, f64)>> = pr_files
        .iter()
        .map(|p| read_pr_curve(p))
        .collect::<attrnet_core::Result<_>>()?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    if !logs.is_empty() {
        let names = series_labels(logs);
        let epoch_series = |f: fn(&EpochRecord) -> f64, suffix: &str| -> Vec<Series> {
            names
                .iter()
                .zip(&histories)
                .map(|(n, h)| Series {
                    name: format!("{n}{suffix}"),
                    points: h.iter().map(|r| (r.epoch as f64, f(r))).collect(),
                })
                .collect()
        };
        let loss = LineChart {
            title: "training loss".into(),
            x_label: "epoch".into(),
            y_label: "total loss".into(),
            series: epoch_series(|r| r.total, ""),
            y_range: None,
            x_range: None,
        };
        let path = out_dir.join("loss_curve.png");
        loss.save(&path)?;
        written.push(path);

        let mut series = Vec::new();
        for (suffix, f) in [
            (" acc", (|r: &EpochRecord| r.val_acc) as fn(&EpochRecord) -> f64),
            (" f1", |r: &EpochRecord| r.val_f1),
            (" mAP", |r: &EpochRecord| r.val_map),
        ] {
            series.extend(epoch_series(f, suffix));
        }
        let val = LineChart {
            title: "validation metrics".into(),
            x_label: "epoch".into(),
            y_label: "value".into(),
            series,
            y_range: Some((0.0, 1.0)),
            x_range: None,
        };
        let path = out_dir.join("val_metrics.png");
        val.save(&path)?;
        written.push(path);
    }

    for (name, points) in series_labels(pr_files).into_iter().zip(curves) {
        let chart = LineChart {
            title: format!("precision-recall: {name}"),
            x_label: "recall".into(),
            y_label: "precision".into(),
            series: vec![Series { name: name.clone(), points }],
            y_range: Some((0.0, 1.0)),
            x_range: Some((0.0, 1.0)),
        };
        let path = out_dir.join(format!("pr_curve_{}.png", name.replace(['/', '\\'], "_")));
        chart.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn plot(a: PlotArgs) -> Result<()> {
    if a.logs.is_empty() && a.pr.is_empty() {
        log::warn!("no logs given; nothing to plot");
        return Ok(());
    }
    let mut pr = a.pr.clone();
    for log in &a.logs {
        let sibling = base_dir(log).join("pr_curve.csv");
        if sibling.exists() && !pr.contains(&sibling) {
            pr.push(sibling);
        }
    }
    guard(&[a.out.join("loss_curve.png"), a.out.join("val_metrics.png")], a.overwrite)?;
    for p in emit_plots(&a.logs, &pr, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}
