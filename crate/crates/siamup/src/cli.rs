//! Command-line entry points: `synth`, `train`, `track`, `eval`,
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (config /
//! input format), 3 runtime failure. Failures additionally emit one
//! machine-readable JSON line on stderr:
//! `{"error":{"code":2,"kind":"validation","message":"..."}}`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_sequence, save_otb, synth_sequence, Sequence};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, evaluate_pairs, precision_curve, read_result_file, success_curve, write_result_file,
    EvalReport, SequenceReport,
};
use crate::model::Model;
use crate::plot::{render_curves, write_curve_csv, Series, SERIES_COLORS};
use crate::tracker::{track_sequence, TrackerConfig};
use crate::trainer;

#[derive(Parser)]
#[command(name = "siamup", version, about = "Updatable Siamese tracker: synthesize data, train, track, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic drift sequences in OTB layout.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of OTB-layout sequences.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track one sequence with a trained checkpoint.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Result file: one `x,y,w,h,confidence` line per frame.
        #[arg(long)]
        out: PathBuf,
        /// Disable online template updating (baseline tracker).
        #[arg(long)]
        no_update: bool,
    },
    /// Score result files against ground truth and emit reports + curves.
    Eval {
        /// Directory of result files (`<sequence>.txt`).
        #[arg(long)]
        results: PathBuf,
        /// Directory of ground-truth sequence directories.
        #[arg(long)]
        gt: PathBuf,
        /// Output directory for report.csv / report.json.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for curve CSVs and PNGs.
        #[arg(long)]
        plots: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parse argv and run. Never panics on user input.
pub fn dispatch<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                print!("{e}");
                return 0;
            }
            emit_error(1, "usage", &e.to_string());
            return 1;
        }
    };
    let result = match cli.cmd {
        Cmd::Synth { config, seed, out } => run_synth(&config, seed, &out),
        Cmd::Train { config, data, out, seed } => run_train(&config, &data, &out, seed),
        Cmd::Track { checkpoint, sequence, out, no_update } => {
            run_track(&checkpoint, &sequence, &out, no_update)
        }
        Cmd::Eval { results, gt, report, plots } => run_eval(&results, &gt, &report, &plots),
        Cmd::Gradcheck { config } => run_gradcheck(&config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "validation" } else { "runtime" };
            emit_error(code, kind, &e.to_string());
            code
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidBox(_)
        | Error::DataFormat { .. }
        | Error::Checkpoint(_)
        | Error::Json(_) => 2,
        _ => 3,
    }
}

fn emit_error(code: i32, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "code": code, "kind": kind, "message": message } });
    eprintln!("{line}");
}

/// Echo the effective config, the seed and the tool version into a run
/// directory so the run can be reproduced.
fn write_run_meta(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config_echo.json"), cfg.to_json_pretty())?;
    let meta = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "determinism": "exact: single-threaded f64, bit-reproducible for one build on one platform",
    });
    std::fs::write(dir.join("run_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

fn load_config_with_seed(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_synth(config: &Path, seed: Option<u64>, out: &Path) -> Result<i32> {
    let cfg = load_config_with_seed(config, seed)?;
    write_run_meta(out, &cfg)?;
    for i in 0..cfg.synth.count {
        let seq_seed = cfg.seed.wrapping_add(i as u64);
        let seq = synth_sequence(&cfg.synth, seq_seed)?;
        save_otb(&seq, &out.join(&seq.name))?;
        println!("wrote {} ({} frames)", seq.name, seq.len());
    }
    println!("synth: {} sequences in {}", cfg.synth.count, out.display());
    Ok(0)
}

fn load_sequence_dir(data: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| Error::DataFormat {
            path: data.to_path_buf(),
            msg: format!("cannot list data directory: {e}"),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("groundtruth_rect.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::DataFormat {
            path: data.to_path_buf(),
            msg: "no sequence directories (need <name>/groundtruth_rect.txt)".into(),
        });
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn run_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let cfg = load_config_with_seed(config, seed)?;
    let sequences = load_sequence_dir(data)?;
    println!("train: {} sequences from {}", sequences.len(), data.display());
    write_run_meta(out, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let mut log = std::fs::File::create(out.join("train_log.csv"))?;
    let steps_per_epoch = cfg.train.steps_per_epoch();
    let cfg_for_hook = cfg.clone();
    let report = trainer::train(
        &mut model,
        &sequences,
        &cfg.train,
        &cfg.labeling,
        &cfg.loss,
        cfg.seed,
        Some(&mut log),
        |model, epoch| {
            let path = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
            checkpoint::save(&path, model, &cfg_for_hook, epoch, epoch * steps_per_epoch)?;
            println!("epoch {epoch}/{} complete, checkpoint {}", cfg_for_hook.train.epochs, path.display());
            Ok(())
        },
    )?;
    let final_path = out.join("checkpoint.ckpt");
    checkpoint::save(&final_path, &model, &cfg, cfg.train.epochs, report.steps)?;
    println!(
        "train: {} steps, final loss {:.4}, checkpoint {}",
        report.steps,
        report.final_loss,
        final_path.display()
    );
    Ok(0)
}

fn run_track(ckpt: &Path, sequence: &Path, out: &Path, no_update: bool) -> Result<i32> {
    let (model, run_cfg, _, _) = checkpoint::load(ckpt)?;
    let seq = load_sequence(sequence)?;
    let tracker_cfg = TrackerConfig {
        update_enabled: run_cfg.tracker.update_enabled && !no_update,
        ..run_cfg.tracker.clone()
    };
    let (rows, refreshes) = track_sequence(&model, &seq, &tracker_cfg)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_result_file(out, &rows)?;
    println!(
        "track: {} frames, {} template refreshes, results in {}",
        rows.len(),
        refreshes.len(),
        out.display()
    );
    Ok(0)
}

fn run_eval(results: &Path, gt: &Path, report_dir: &Path, plots: &Path) -> Result<i32> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(results)
        .map_err(|e| Error::DataFormat {
            path: results.to_path_buf(),
            msg: format!("cannot list results: {e}"),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DataFormat {
            path: results.to_path_buf(),
            msg: "no result files (*.txt)".into(),
        });
    }

    let mut per_sequence: Vec<SequenceReport> = Vec::new();
    let mut success_curves: Vec<Vec<f64>> = Vec::new();
    let mut precision_curves: Vec<Vec<f64>> = Vec::new();
    for file in &files {
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rows = read_result_file(file)?;
        let seq = load_sequence(&gt.join(&name))?;
        let start = seq.first_annotated().ok_or_else(|| Error::DataFormat {
            path: gt.join(&name),
            msg: "sequence has no annotated frames".into(),
        })?;
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            match seq.gt.get(start + i) {
                Some(Some(g)) => {
                    pred.push(row.bbox);
                    truth.push(*g);
                }
                Some(None) => {}
                None => {
                    return Err(Error::DataFormat {
                        path: file.clone(),
                        msg: format!(
                            "{} result rows but sequence has {} frames from its first annotation",
                            rows.len(),
                            seq.len() - start
                        ),
                    })
                }
            }
        }
        per_sequence.push(evaluate_pairs(&name, &pred, &truth)?);
        success_curves.push(success_curve(&pred, &truth)?);
        precision_curves.push(precision_curve(&pred, &truth)?);
    }

    let agg = aggregate(&per_sequence);
    let report = EvalReport {
        variant: "results".into(),
        seed: 0,
        per_sequence,
        aggregate: agg,
    };
    std::fs::create_dir_all(report_dir)?;
    crate::eval::write_report_csv(&report_dir.join("report.csv"), &report)?;
    std::fs::write(
        report_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;

    // Curves: unweighted mean over sequences.
    std::fs::create_dir_all(plots)?;
    let mean_curve = |curves: &[Vec<f64>]| -> Vec<f64> {
        let n = curves.len() as f64;
        let len = curves[0].len();
        (0..len)
            .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n)
            .collect()
    };
    let succ = mean_curve(&success_curves);
    let prec = mean_curve(&precision_curves);
    let succ_x: Vec<f64> = (0..succ.len()).map(|i| i as f64 * 0.05).collect();
    let prec_x: Vec<f64> = (0..prec.len()).map(|i| i as f64).collect();
    write_curve_csv(&plots.join("success_curve.csv"), "iou_threshold,success_rate", &succ_x, &succ)?;
    write_curve_csv(&plots.join("precision_curve.csv"), "radius_px,precision", &prec_x, &prec)?;
    render_curves(
        &plots.join("success_plot.png"),
        &[Series { ys: &succ, color: SERIES_COLORS[0] }],
        0.0,
        1.0,
    )?;
    render_curves(
        &plots.join("precision_plot.png"),
        &[Series { ys: &prec, color: SERIES_COLORS[1] }],
        0.0,
        50.0,
    )?;
    println!(
        "eval: {} sequences, mean IoU {:.4}, success AUC {:.4}, precision@20 {:.4}",
        report.per_sequence.len(),
        report.aggregate.mean_iou,
        report.aggregate.success_auc,
        report.aggregate.precision
    );
    Ok(0)
}

fn run_gradcheck(config: &Path) -> Result<i32> {
    // The suites are self-contained; the config is still validated so a
    // broken file fails fast.
    let _ = RunConfig::load(config)?;
    let outcome = crate::gradsuite::run_all()?;
    for r in &outcome.reports {
        println!(
            "gradcheck {}: max rel err {:.3e} over {} scalars{}",
            r.module,
            r.max_rel_err,
            r.scalars_checked,
            if r.max_rel_err >= crate::gradsuite::TOLERANCE {
                format!("  FAIL (worst: {})", r.worst_param)
            } else {
                String::new()
            }
        );
    }
    if outcome.passed() {
        println!("gradcheck: all modules within {:.0e}", crate::gradsuite::TOLERANCE);
        Ok(0)
    } else {
        Err(Error::NonFinite {
            context: format!(
                "gradient check failed: max rel err {:.3e} >= {:.0e}",
                outcome.max_rel_err,
                crate::gradsuite::TOLERANCE
            ),
        })
    }
}
