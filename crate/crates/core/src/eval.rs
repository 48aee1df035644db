//! Attribute accuracy and F-score, detection AP, run aggregation, and the
//! ablation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::BoundingBox;
use crate::detector::{iou, Detection};
use crate::error::{Error, Result};
use crate::model::{Ablation, ScaleMode};

fn check_shapes(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<usize> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.first().map_or(0, Vec::len);
    for (p, l) in probs.iter().zip(labels) {
        if p.len() != n || l.len() != n {
            return Err(Error::shape("ragged probability or label rows"));
        }
    }
    Ok(n)
}

/// Fraction of cells where `p >= threshold` agrees with the label. An empty
/// matrix scores 0.
pub fn compute_accuracy(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    let n = check_shapes(probs, labels)?;
    let cells = probs.len() * n;
    if cells == 0 {
        return Ok(0.0);
    }
    let correct = probs
        .iter()
        .zip(labels)
        .flat_map(|(p, l)| p.iter().zip(l))
        .filter(|(&p, &l)| (p >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / cells as f64)
}

/// Macro F1 over attribute columns; a column with no predicted and no true
/// positives contributes 0.
pub fn compute_f_score(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    let n = check_shapes(probs, labels)?;
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for j in 0..n {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, l) in probs.iter().zip(labels) {
            match (p[j] >= threshold, l[j] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / n as f64)
}

/// One point per ranked detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Rank all detections by score (ties by image, then position), match each
/// greedily to the best-overlapping unmatched ground truth of its image.
pub fn precision_recall_curve(detections: &[Vec<Detection>], gts: &[Vec<BoundingBox>], iou_thr: f64) -> Vec<PrPoint> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |k| (i, k)))
        .collect();
    ranked.sort_by(|a, b| {
        detections[b.0][b.1]
            .score
            .total_cmp(&detections[a.0][a.1].score)
            .then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (img, k) in ranked {
        let det = &detections[img][k];
        let empty = Vec::new();
        let g = gts.get(img).unwrap_or(&empty);
        let mut best = (None, iou_thr);
        for (j, gt) in g.iter().enumerate() {
            let v = iou(&det.bbox, gt);
            if v >= best.1 && (best.0.is_none() || v > best.1) {
                best = (Some(j), v);
            }
        }
        match best.0 {
            Some(j) if !used[img][j] => {
                used[img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        curve.push(PrPoint {
            score: det.score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
    }
    curve
}

/// Area under the precision envelope of the PR curve (all-point
/// interpolation).
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let envelope = curve[i..].iter().map(|p| p.precision).fold(0.0, f64::max);
        ap += (curve[i].recall - prev_recall) * envelope;
        prev_recall = curve[i].recall;
    }
    ap
}

/// Single-class mAP (= AP). No ground truth gives 0.
pub fn compute_map(detections: &[Vec<Detection>], gts: &[Vec<BoundingBox>], iou_thr: f64) -> f64 {
    if gts.iter().all(Vec::is_empty) {
        return 0.0;
    }
    average_precision(&precision_recall_curve(detections, gts, iou_thr))
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let (mean, std) = aggregate_runs(values)?;
        Ok(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

/// Metrics of one trained model, as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub f_score: f64,
    pub accuracy: f64,
    pub map: f64,
}

/// Percent mean/std over runs of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub f_score: MeanStd,
    pub accuracy: MeanStd,
    pub map: MeanStd,
    pub n_runs: usize,
    pub ablation: Ablation,
    pub scale_mode: ScaleMode,
}

impl EvalReport {
    pub fn from_runs(runs: &[RunMetrics], ablation: Ablation, scale_mode: ScaleMode) -> Result<Self> {
        let pct = |f: fn(&RunMetrics) -> f64| runs.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>();
        Ok(Self {
            f_score: MeanStd::from_values(&pct(|r| r.f_score))?,
            accuracy: MeanStd::from_values(&pct(|r| r.accuracy))?,
            map: MeanStd::from_values(&pct(|r| r.map))?,
            n_runs: runs.len(),
            ablation,
            scale_mode,
        })
    }
}

/// Row label and configuration of the component study, in table order.
pub fn ablation_grid() -> Vec<(&'static str, Ablation, ScaleMode)> {
    let partial = [
        Ablation {
            group_conv: false,
            a2_attn: true,
            at_attn: true,
        },
        Ablation {
            group_conv: true,
            a2_attn: false,
            at_attn: true,
        },
        Ablation {
            group_conv: true,
            a2_attn: true,
            at_attn: false,
        },
        Ablation::FULL,
    ];
    let mut rows = vec![("Baseline", Ablation::BASELINE, ScaleMode::Multi)];
    for (name, mode) in [("SingleScale", ScaleMode::Single), ("MultiScale", ScaleMode::Multi)] {
        rows.extend(partial.iter().map(|&a| (name, a, mode)));
    }
    rows
}

/// Key for a configuration's reports. The baseline has no attention modules
/// so its scale mode is irrelevant; it is always keyed as `Multi`.
pub type ConfigKey = (Ablation, ScaleMode);

pub fn config_key(ablation: Ablation, scale_mode: ScaleMode) -> ConfigKey {
    if ablation == Ablation::BASELINE {
        (ablation, ScaleMode::Multi)
    } else {
        (ablation, scale_mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: &'static str,
    pub ablation: Ablation,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

/// Rows present in `results`, in table order. The baseline is required.
pub fn ablation_report(results: &BTreeMap<ConfigKey, EvalReport>) -> Result<AblationTable> {
    if !results.contains_key(&config_key(Ablation::BASELINE, ScaleMode::Multi)) {
        return Err(Error::MissingBaseline);
    }
    let rows = ablation_grid()
        .into_iter()
        .filter_map(|(method, ablation, mode)| {
            results.get(&config_key(ablation, mode)).map(|r| AblationRow {
                method,
                ablation,
                report: *r,
            })
        })
        .collect();
    Ok(AblationTable { rows })
}

impl AblationTable {
    fn cells(row: &AblationRow) -> [String; 8] {
        [
            row.method.to_string(),
            "Two-stage Model".to_string(),
            mark(row.ablation.group_conv).to_string(),
            mark(row.ablation.a2_attn).to_string(),
            mark(row.ablation.at_attn).to_string(),
            row.report.f_score.to_string(),
            row.report.accuracy.to_string(),
            row.report.map.to_string(),
        ]
    }

    pub const HEADER: [&'static str; 8] = [
        "Methods", "Detector", "GroupConv", "A2-Attn", "AT-Attn", "F-score", "Accuracy", "mAP",
    ];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER)?;
        for row in &self.rows {
            w.write_record(Self::cells(row))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Space-aligned text table.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 8]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = Self::HEADER.map(|h| h.chars().count());
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &Self::HEADER.map(String::from));
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        let _ = writeln!(out, "{}", "-".repeat(total));
        for cells in &body {
            line(&mut out, cells);
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("ablation_report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("ablation_report.txt"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(c: [f64; 4], s: f64) -> Detection {
        Detection::new(BoundingBox::from_coords(c), s)
    }

    #[test]
    fn accuracy_examples() {
        let l = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(compute_accuracy(&[vec![0.9, 0.1], vec![0.2, 0.8]], &l, 0.5).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&[vec![0.5, 0.5]], &[vec![0, 0]], 0.5).unwrap(), 0.0);
        assert_eq!(compute_accuracy(&[vec![0.9, 0.9], vec![0.2, 0.8]], &l, 0.5).unwrap(), 0.75);
        assert!(matches!(compute_accuracy(&[vec![0.9]], &l, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn f_score_examples() {
        // Each column: one TP, one FP, one FN -> P = R = 0.5.
        let p = vec![vec![0.9, 0.9], vec![0.9, 0.9], vec![0.1, 0.1]];
        let l = vec![vec![1, 1], vec![0, 0], vec![1, 1]];
        assert!((compute_f_score(&p, &l, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(compute_f_score(&[vec![0.9, 0.1]], &[vec![1, 0]], 0.5).unwrap(), 0.5);
        assert_eq!(
            compute_f_score(&[vec![0.9, 0.9], vec![0.1, 0.1]], &[vec![1, 1], vec![0, 0]], 0.5).unwrap(),
            1.0
        );
    }

    #[test]
    fn map_examples() {
        let gt = vec![vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0)]];
        // IoU 0.7: [0,0,10,7].
        let good = det([0.0, 0.0, 10.0, 7.0], 0.9);
        assert_eq!(compute_map(&[vec![good]], &gt, 0.5), 1.0);
        let bad = det([0.0, 0.0, 10.0, 2.0], 0.8);
        assert_eq!(compute_map(&[vec![bad]], &gt, 0.5), 0.0);
        let curve = precision_recall_curve(&[vec![bad, good]], &gt, 0.5);
        assert_eq!((curve[0].precision, curve[0].recall), (1.0, 1.0));
        assert_eq!((curve[1].precision, curve[1].recall), (0.5, 1.0));
        assert_eq!(average_precision(&curve), 1.0);
        assert_eq!(compute_map(&[vec![]], &[vec![]], 0.5), 0.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt = vec![vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0)]];
        let d = vec![vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([0.0, 0.0, 10.0, 10.0], 0.8)]];
        let c = precision_recall_curve(&d, &gt, 0.5);
        assert_eq!(c[1].precision, 0.5);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_runs(&[1.0, 2.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(aggregate_runs(&[5.0]).unwrap(), (5.0, 0.0));
        assert_eq!(aggregate_runs(&[2.0; 4]).unwrap(), (2.0, 0.0));
        assert!(matches!(aggregate_runs(&[]), Err(Error::EmptyList)));
    }

    fn report(f: (f64, f64), a: (f64, f64), m: (f64, f64), ablation: Ablation, mode: ScaleMode) -> EvalReport {
        let ms = |(mean, std)| MeanStd { mean, std };
        EvalReport {
            f_score: ms(f),
            accuracy: ms(a),
            map: ms(m),
            n_runs: 5,
            ablation,
            scale_mode: mode,
        }
    }

    #[test]
    fn baseline_row_format() {
        let mut r = BTreeMap::new();
        r.insert(
            config_key(Ablation::BASELINE, ScaleMode::Multi),
            report((29.24, 0.76), (88.08, 0.12), (17.10, 0.11), Ablation::BASELINE, ScaleMode::Multi),
        );
        let t = ablation_report(&r).unwrap();
        assert_eq!(t.rows.len(), 1);
        let csv = t.to_csv().unwrap();
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "Baseline,Two-stage Model,✗,✗,✗,29.24±0.76,88.08±0.12,17.10±0.11"
        );
        assert!(t.to_text().contains("29.24±0.76  88.08±0.12  17.10±0.11"));
    }

    #[test]
    fn full_grid_has_nine_rows_in_order() {
        let mut r = BTreeMap::new();
        for (_, a, m) in ablation_grid() {
            r.insert(config_key(a, m), report((1.0, 0.0), (1.0, 0.0), (1.0, 0.0), a, m));
        }
        let t = ablation_report(&r).unwrap();
        let names: Vec<_> = t.rows.iter().map(|r| r.method).collect();
        assert_eq!(names.len(), 9);
        assert_eq!(names[0], "Baseline");
        assert!(names[1..5].iter().all(|&n| n == "SingleScale"));
        assert!(names[5..].iter().all(|&n| n == "MultiScale"));
        assert_eq!(t.rows[8].ablation, Ablation::FULL);
        assert!(!t.rows[1].ablation.group_conv);
        assert!(!t.rows[2].ablation.a2_attn);
        assert!(!t.rows[3].ablation.at_attn);
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let mut r = BTreeMap::new();
        r.insert(
            config_key(Ablation::FULL, ScaleMode::Multi),
            report((1.0, 0.0), (1.0, 0.0), (1.0, 0.0), Ablation::FULL, ScaleMode::Multi),
        );
        assert!(matches!(ablation_report(&r), Err(Error::MissingBaseline)));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<u8>>)> {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, cols), rows),
            prop::collection::vec(prop::collection::vec(0u8..2, cols), rows),
        )
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_permutation((p, l) in matrix(5, 3), rot in 0usize..5, swap in any::<bool>()) {
            let mut p2 = p.clone();
            let mut l2 = l.clone();
            p2.rotate_left(rot);
            l2.rotate_left(rot);
            if swap {
                for r in p2.iter_mut() { r.swap(0, 2); }
                for r in l2.iter_mut() { r.swap(0, 2); }
            }
            prop_assert_eq!(compute_accuracy(&p, &l, 0.5).unwrap(), compute_accuracy(&p2, &l2, 0.5).unwrap());
            let (a, b) = (compute_f_score(&p, &l, 0.5).unwrap(), compute_f_score(&p2, &l2, 0.5).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn aggregate_translation(v in prop::collection::vec(-100.0f64..100.0, 1..10), c in -50.0f64..50.0) {
            let (m, s) = aggregate_runs(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let (m2, s2) = aggregate_runs(&shifted).unwrap();
            prop_assert!((m2 - (m + c)).abs() < 1e-9);
            prop_assert!((s2 - s).abs() < 1e-9);
            prop_assert!(s >= 0.0);
        }
    }
}
