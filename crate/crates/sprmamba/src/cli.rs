//! Command-line pipeline: data generation, training, prediction, evaluation,
//! and the embedded selfcheck.
//!
//! Exit codes: 0 success, 1 selfcheck failure, 2 usage or data errors.
//! Every command honors `--seed`; the `SPRM_SEED` environment variable
//! overrides the flag.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{read_features, read_labels, read_predictions, write_features, write_predictions};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_video, Protocol, VideoReport};
use crate::model::argmax_rows;
use crate::selfcheck::run_selfcheck;
use crate::synth::gen_synthetic;
use crate::training::train;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sprm",
    version,
    about = "Temporal phase recognition pipeline: synthetic data, training, prediction, evaluation"
)]
struct Cli {
    /// Seed for all randomness (SPRM_SEED overrides this flag).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic workflow sequences as SPRF + label files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model on every .sprf sequence in a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// History CSV path (default: checkpoint path with .history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Predict per-frame phases for one feature file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1-based stage to read probabilities from (default: final stage).
        #[arg(long, default_value_t = 0)]
        stage: usize,
    },
    /// Evaluate predictions against labels (files or directories).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fps: f64,
        /// Also score under the relaxed boundary protocol.
        #[arg(long)]
        relaxed: bool,
        /// Write the aggregate report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Characters per segment ribbon row.
        #[arg(long, default_value_t = 64)]
        ribbon_width: usize,
    },
    /// Run the embedded invariant suite.
    Selfcheck,
}

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let seed = match std::env::var("SPRM_SEED") {
        Ok(v) => match v.parse::<u64>() {
            Ok(s) => Some(s),
            Err(_) => {
                eprintln!("error: SPRM_SEED must be an unsigned integer, got '{v}'");
                return 2;
            }
        },
        Err(_) => cli.seed,
    };
    let outcome = match cli.command {
        Command::GenData { config, out_dir, count } => cmd_gen_data(&config, &out_dir, count, seed),
        Command::Train { config, data_dir, out, history } => {
            cmd_train(&config, &data_dir, &out, history.as_deref(), seed)
        }
        Command::Predict { checkpoint, features, out, stage } => {
            cmd_predict(&checkpoint, &features, &out, stage)
        }
        Command::Eval { pred, labels, fps, relaxed, csv, ribbon_width } => {
            cmd_eval(&pred, &labels, fps, relaxed, csv.as_deref(), ribbon_width)
        }
        Command::Selfcheck => return cmd_selfcheck(),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let (mut cfg, seen) = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    let unset: Vec<&str> = RunConfig::known_keys()
        .into_iter()
        .filter(|k| !seen.iter().any(|s| s == k))
        .collect();
    if !unset.is_empty() {
        eprintln!("config: using documented defaults for: {}", unset.join(", "));
    }
    Ok(cfg)
}

fn phase_char(p: usize) -> char {
    match p {
        0..=8 => (b'1' + p as u8) as char,
        9..=34 => (b'A' + (p - 9) as u8) as char,
        _ => '?',
    }
}

/// One character per bucket; each bucket shows its majority phase.
fn ribbon(labels: &[usize], width: usize) -> String {
    if labels.is_empty() || width == 0 {
        return String::new();
    }
    let width = width.min(labels.len());
    let mut out = String::with_capacity(width);
    for b in 0..width {
        let start = b * labels.len() / width;
        let end = ((b + 1) * labels.len() / width).max(start + 1);
        let bucket = &labels[start..end];
        let max_phase = *bucket.iter().max().unwrap();
        let mut counts = vec![0usize; max_phase + 1];
        for &p in bucket {
            counts[p] += 1;
        }
        let majority = counts
            .iter()
            .enumerate()
            .max_by_key(|&(_, c)| *c)
            .map(|(p, _)| p)
            .unwrap();
        out.push(phase_char(majority));
    }
    out
}

fn cmd_gen_data(config: &Path, out_dir: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let seqs = gen_synthetic(&cfg.synth, count)?;
    let mut phase_frames = vec![0usize; cfg.synth.num_classes];
    for seq in &seqs {
        let path = out_dir.join(format!("{}.sprf", seq.video_id));
        write_features(&path, seq)?;
        for &l in &seq.labels {
            phase_frames[l] += 1;
        }
    }
    println!("wrote {count} sequences to {}", out_dir.display());
    println!("{:<10}{:>10}", "phase", "frames");
    for (p, &frames) in phase_frames.iter().enumerate() {
        println!("{:<10}{frames:>10}", format!("P{}", p + 1));
    }
    let total: usize = phase_frames.iter().sum();
    println!("{:<10}{total:>10}", "total");
    Ok(())
}

fn sorted_sprf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |ext| ext == "sprf"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_train(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    history_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    let files = sorted_sprf_files(data_dir)?;
    if files.is_empty() {
        return Err(Error::Usage(format!(
            "no .sprf sequences in {}",
            data_dir.display()
        )));
    }
    let mut dataset = Vec::with_capacity(files.len());
    for f in &files {
        dataset.push(read_features(f)?);
    }
    let (_, d) = dataset[0].features.dims2()?;
    if cfg.model.input_dim != d {
        eprintln!(
            "config: input_dim {} does not match data dimension {d}; using {d}",
            cfg.model.input_dim
        );
        cfg.model.input_dim = d;
    }
    let (model, history) = train(&dataset, None, &cfg.model, &cfg.train)?;
    save_checkpoint(&model, out)?;
    let default_history = out.with_extension("history.csv");
    let history_path = history_path.unwrap_or(&default_history);
    history.write_csv(history_path)?;
    let last = history.records.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} sequences; final loss {:.4}, train accuracy {:.2}%",
        history.records.len(),
        dataset.len(),
        last.total_loss,
        last.train_acc
    );
    println!("checkpoint: {}", out.display());
    println!("history:    {}", history_path.display());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, features: &Path, out: &Path, stage: usize) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let seq = read_features(features)?;
    let (_, d) = seq.features.dims2()?;
    if d != model.config.input_dim {
        return Err(Error::Dimension(format!(
            "feature dimension mismatch: checkpoint expects D={}, {} has D={d}",
            model.config.input_dim,
            features.display()
        )));
    }
    let outputs = model.forward_eval(&seq.features, None)?;
    let idx = match stage {
        0 => outputs.len() - 1,
        s if s <= outputs.len() => s - 1,
        s => {
            return Err(Error::Usage(format!(
                "stage {s} out of range (model has {} stages)",
                outputs.len()
            )))
        }
    };
    let probs = &outputs[idx].probs;
    let pred = argmax_rows(probs);
    write_predictions(out, &seq.labels, &pred, probs)?;
    println!(
        "wrote {} frames (stage {}/{}) to {}",
        seq.len(),
        idx + 1,
        outputs.len(),
        out.display()
    );
    Ok(())
}

/// Pairs of (video id, predictions csv, labels csv) from file or directory
/// arguments.
fn collect_eval_pairs(pred: &Path, labels: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_file() {
        let id = pred
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![(id, pred.to_path_buf(), labels.to_path_buf())]);
    }
    let mut out = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(pred)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", pred.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |ext| ext == "csv"))
        .collect();
    files.sort();
    for f in files {
        let id = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label_file = labels.join(format!("{id}.labels.csv"));
        if !label_file.exists() {
            return Err(Error::Data(format!(
                "no labels for video '{id}' at {}",
                label_file.display()
            )));
        }
        out.push((id, f, label_file));
    }
    if out.is_empty() {
        return Err(Error::Usage(format!(
            "no prediction files in {}",
            pred.display()
        )));
    }
    Ok(out)
}

fn cmd_eval(
    pred_path: &Path,
    labels_path: &Path,
    fps: f64,
    relaxed: bool,
    csv: Option<&Path>,
    ribbon_width: usize,
) -> Result<()> {
    let pairs = collect_eval_pairs(pred_path, labels_path)?;
    let mut standard: Vec<VideoReport> = Vec::new();
    let mut relaxed_reports: Vec<VideoReport> = Vec::new();
    for (id, pred_file, label_file) in &pairs {
        let preds = read_predictions(pred_file)?;
        let gt = read_labels(label_file)?;
        if preds.pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "video '{id}': {} predictions vs {} labels",
                preds.pred.len(),
                gt.len()
            )));
        }
        let num_classes = preds
            .probs
            .first()
            .map_or(0, |row| row.len())
            .max(gt.iter().chain(&preds.pred).max().map_or(0, |&m| m + 1));
        let report = evaluate_video(id, &preds.pred, &gt, num_classes, Protocol::Standard, fps, 10.0)?;
        println!(
            "video {id}: accuracy {:.2}%  precision {:.2}%  recall {:.2}%  jaccard {:.2}%",
            report.accuracy, report.precision, report.recall, report.jaccard
        );
        println!("  gt:   {}", ribbon(&gt, ribbon_width));
        println!("  pred: {}", ribbon(&preds.pred, ribbon_width));
        standard.push(report);
        if relaxed {
            relaxed_reports.push(evaluate_video(
                id,
                &preds.pred,
                &gt,
                num_classes,
                Protocol::Relaxed,
                fps,
                10.0,
            )?);
        }
    }
    let agg = aggregate(&standard)?;
    println!();
    print!("{}", agg.to_text());
    let mut csv_text = agg.to_csv();
    if relaxed {
        let ragg = aggregate(&relaxed_reports)?;
        println!();
        print!("{}", ragg.to_text());
        for line in ragg.to_csv().lines().skip(1) {
            csv_text.push_str(&format!("relaxed_{line}\n"));
        }
    }
    if let Some(path) = csv {
        std::fs::write(path, &csv_text)?;
        println!("\nreport csv: {}", path.display());
    }
    Ok(())
}

fn cmd_selfcheck() -> i32 {
    let corrupt = std::env::var("SPRM_SELFCHECK_CORRUPT").map_or(false, |v| v == "1");
    if corrupt {
        eprintln!("selfcheck: corruption hook active (SPRM_SELFCHECK_CORRUPT=1)");
    }
    let results = run_selfcheck(corrupt);
    let mut all_ok = true;
    for r in &results {
        let tag = if r.passed { " ok " } else { "FAIL" };
        println!("[{tag}] {:<24} {}", r.name, r.detail);
        all_ok &= r.passed;
    }
    if all_ok {
        println!("all {} checks passed", results.len());
        0
    } else {
        println!("selfcheck FAILED");
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ribbon_compresses_by_majority() {
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(ribbon(&labels, 4), "1122");
        assert_eq!(ribbon(&labels, 8), "11112222");
        // Width above the sequence length clamps to one char per frame.
        assert_eq!(ribbon(&labels, 100), "11112222");
    }

    #[test]
    fn phase_chars_cover_digits_then_letters() {
        assert_eq!(phase_char(0), '1');
        assert_eq!(phase_char(7), '8');
        assert_eq!(phase_char(9), 'A');
    }
}
