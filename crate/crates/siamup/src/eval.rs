//! OTB-style metrics (success-plot AUC, center-distance precision), result
//! file IO, and the baseline-vs-updatable benchmark driver.
//!
//! Success uses the strict `IoU > t` convention over 21 thresholds
//! 0, 0.05, ..., 1.0, so perfect tracking scores 20/21, not 1.0. Precision
//! at radius r is the fraction of frames whose center distance is <= r.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::Model;
use crate::tracker::{track_sequence, TrackedFrame, TrackerConfig};

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_RADIUS: f64 = 20.0;

fn check_aligned(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty sequences".into()));
    }
    Ok(())
}

/// Success rate at each IoU threshold t in {0, 0.05, ..., 1.0}.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt.iter()).map(|(p, g)| iou(p, g)).collect();
    Ok((0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = i as f64 * 0.05;
            ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
        })
        .collect())
}

/// Area under the success curve: the mean success rate over thresholds.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let curve = success_curve(pred, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Fraction of frames with center distance within `radius` (inclusive).
pub fn precision_at(pred: &[BBox], gt: &[BBox], radius: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    let hits = pred
        .iter()
        .zip(gt.iter())
        .filter(|(p, g)| p.center_distance(g) <= radius)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Precision at integer radii 0..=50 px.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    (0..=50).map(|r| precision_at(pred, gt, r as f64)).collect()
}

/// Mean IoU over frames.
pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_aligned(pred, gt)?;
    Ok(pred.iter().zip(gt.iter()).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Metrics of one tracked sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub frames: usize,
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub mean_iou: f64,
    pub success_auc: f64,
    pub precision: f64,
}

/// Metrics of one tracker variant over a sequence set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub per_sequence: Vec<SequenceReport>,
    pub aggregate: Aggregate,
}

pub fn evaluate_pairs(name: &str, pred: &[BBox], gt: &[BBox]) -> Result<SequenceReport> {
    Ok(SequenceReport {
        name: name.to_string(),
        frames: pred.len(),
        mean_iou: mean_iou(pred, gt)?,
        success_auc: success_auc(pred, gt)?,
        precision: precision_at(pred, gt, PRECISION_RADIUS)?,
    })
}

/// Unweighted mean over sequences.
pub fn aggregate(reports: &[SequenceReport]) -> Aggregate {
    let n = reports.len().max(1) as f64;
    Aggregate {
        mean_iou: reports.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        success_auc: reports.iter().map(|r| r.success_auc).sum::<f64>() / n,
        precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
    }
}

/// Evaluate one variant over sequences, pairing tracked boxes with the
/// annotated ground truth (frames without ground truth are skipped).
pub fn evaluate_tracker(
    model: &Model,
    sequences: &[Sequence],
    cfg: &TrackerConfig,
    variant: &str,
    seed: u64,
) -> Result<(EvalReport, Vec<String>)> {
    let mut per_sequence = Vec::new();
    let mut failures = Vec::new();
    for seq in sequences {
        match track_and_score(model, seq, cfg) {
            Ok(report) => per_sequence.push(report),
            Err(e) => failures.push(format!("{}: {e}", seq.name)),
        }
    }
    let aggregate = aggregate(&per_sequence);
    Ok((
        EvalReport {
            variant: variant.to_string(),
            seed,
            per_sequence,
            aggregate,
        },
        failures,
    ))
}

fn track_and_score(model: &Model, seq: &Sequence, cfg: &TrackerConfig) -> Result<SequenceReport> {
    let (rows, _) = track_sequence(model, seq, cfg)?;
    let start = seq.first_annotated().expect("tracked sequence has a start");
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if let Some(g) = seq.gt[start + i] {
            pred.push(row.bbox);
            gt.push(g);
        }
    }
    evaluate_pairs(&seq.name, &pred, &gt)
}

/// Outcome of the baseline-vs-updatable comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub reports: Vec<EvalReport>,
    /// Per (seed, sequence) `updatable AUC - baseline AUC`.
    pub auc_deltas: Vec<f64>,
    pub median_auc_delta: f64,
    pub mean_auc_delta: f64,
    pub failures: Vec<String>,
}

/// Run both variants over per-seed sequence sets and summarize the AUC
/// deltas. The baseline is the same checkpoint with updating disabled.
pub fn run_benchmark(
    model: &Model,
    tracker_cfg: &TrackerConfig,
    sequences_for_seed: impl Fn(u64) -> Result<Vec<Sequence>>,
    seeds: &[u64],
) -> Result<BenchmarkOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one benchmark seed".into()));
    }
    let mut reports = Vec::new();
    let mut deltas = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let sequences = sequences_for_seed(seed)?;
        if sequences.is_empty() {
            return Err(Error::InvalidConfig(format!("seed {seed} produced no sequences")));
        }
        let baseline_cfg = TrackerConfig { update_enabled: false, ..tracker_cfg.clone() };
        let updatable_cfg = TrackerConfig { update_enabled: true, ..tracker_cfg.clone() };
        let (base, mut f1) = evaluate_tracker(model, &sequences, &baseline_cfg, "baseline", seed)?;
        let (upd, mut f2) = evaluate_tracker(model, &sequences, &updatable_cfg, "updatable", seed)?;
        failures.append(&mut f1);
        failures.append(&mut f2);
        for (b, u) in base.per_sequence.iter().zip(upd.per_sequence.iter()) {
            debug_assert_eq!(b.name, u.name);
            deltas.push(u.success_auc - b.success_auc);
        }
        reports.push(base);
        reports.push(upd);
    }
    let median = median_of(&deltas);
    let mean = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    Ok(BenchmarkOutcome {
        reports,
        median_auc_delta: median,
        mean_auc_delta: mean,
        auc_deltas: deltas,
        failures,
    })
}

pub fn median_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Write a result file: one `x,y,w,h,confidence` line per frame, corner
/// form, frame pixel coordinates.
pub fn write_result_file(path: &Path, rows: &[TrackedFrame]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for row in rows {
        let (x, y, w, h) = row.bbox.corner();
        writeln!(f, "{x},{y},{w},{h},{}", row.confidence)?;
    }
    Ok(())
}

/// Read a result file back.
pub fn read_result_file(path: &Path) -> Result<Vec<TrackedFrame>> {
    let file = std::fs::File::open(path).map_err(|e| Error::DataFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::DataFormat {
                path: path.to_path_buf(),
                msg: format!("line {}: expected 5 fields, found {}", lineno + 1, fields.len()),
            });
        }
        let mut vals = [0.0f64; 5];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.trim().parse().map_err(|_| Error::DataFormat {
                path: path.to_path_buf(),
                msg: format!("line {}: unparseable number {f:?}", lineno + 1),
            })?;
        }
        rows.push(TrackedFrame {
            bbox: BBox::from_corner(vals[0], vals[1], vals[2], vals[3])
                .map_err(|e| Error::DataFormat {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {e}", lineno + 1),
                })?,
            confidence: vals[4],
        });
    }
    Ok(rows)
}

/// Report CSV: one row per sequence plus an aggregate row.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "variant,seed,sequence,frames,mean_iou,success_auc,precision_at_20")?;
    for r in &report.per_sequence {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            report.variant, report.seed, r.name, r.frames, r.mean_iou, r.success_auc, r.precision
        )?;
    }
    writeln!(
        f,
        "{},{},AGGREGATE,{},{},{},{}",
        report.variant,
        report.seed,
        report.per_sequence.iter().map(|r| r.frames).sum::<usize>(),
        report.aggregate.mean_iou,
        report.aggregate.success_auc,
        report.aggregate.precision
    )?;
    Ok(())
}
