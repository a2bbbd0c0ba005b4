//! Command-line front end: dataset generation, the two training stages,
//! evaluation, pairing and the self-check suite.
//!
//! Exit codes: 0 success, 1 bad input or contract violation, 2 failed
//! verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use quadformer::config::RunConfig;
use quadformer::data::{Dataset, DatasetSpec};
use quadformer::pipeline::{self, RunOptions};

#[derive(Parser)]
#[command(name = "quadformer", version, about = "Domain-adaptive thin-line segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Args)]
struct StageArgs {
    /// Continue the run saved in the output directory.
    #[arg(long)]
    resume: bool,
    /// Save and stop after this many completed steps.
    #[arg(long, value_name = "STEPS")]
    stop_after: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic two-domain dataset.
    Generate {
        /// Output directory.
        out: PathBuf,
        /// Dataset manifest to start from.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override one manifest key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Source-only training; also writes warm-up pseudo labels.
    Warmup {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Adaptation from a warm-up checkpoint.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        /// Completed warm-up checkpoint directory.
        #[arg(long)]
        warmup: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pair list from `pair`; computed when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Target-validation IoU of a checkpoint, with per-image masks.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-way SSIM pairing of the training images.
    Pair {
        #[arg(long)]
        data: PathBuf,
        /// Output TSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property and oracle suite.
    Verify {
        /// Corrupt one backward rule to demonstrate that the suite fails.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Distinguishes verification failure from ordinary errors.
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("QF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("QF_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn resume_dir(stage: &StageArgs, out: &Path) -> Option<PathBuf> {
    stage.resume.then(|| out.to_path_buf())
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { out, spec, overrides } => {
            let base = match spec {
                Some(p) => DatasetSpec::load(p)?,
                None => DatasetSpec::default(),
            };
            let spec = base.with_overrides(&overrides)?;
            Dataset::generate(&spec, &out)?;
            println!(
                "wrote {} source and {} target images to {}",
                spec.source_train,
                spec.target_train + spec.target_val,
                out.display()
            );
        }
        Command::Warmup { data, out, config, stage } => {
            let config = config.run_config()?;
            let data = Dataset::open(data)?;
            let opts = RunOptions {
                resume: resume_dir(&stage, &out),
                stop_after: stage.stop_after,
                pairs: None,
            };
            let r = pipeline::run_warmup(&config, &data, &out, &opts)?;
            let ck = &r.checkpoint;
            println!("warmup step {}/{}", ck.step, ck.total);
            if ck.is_complete() {
                println!("source-val IoU {}", fmt_iou(r.source_val_iou));
                println!("target-val IoU {}", fmt_iou(r.target_val_iou));
            }
        }
        Command::Adapt { data, warmup, out, pairs, config, stage } => {
            let config = config.run_config()?;
            let data = Dataset::open(data)?;
            let opts = RunOptions {
                resume: resume_dir(&stage, &out),
                stop_after: stage.stop_after,
                pairs,
            };
            let r = pipeline::run_adapt(&config, &data, &warmup, &out, &opts)?;
            let ck = &r.checkpoint;
            println!("adapt step {}/{}, {} pairs", ck.step, ck.total, r.pairs.len());
            if ck.is_complete() {
                println!("target-val IoU {}", fmt_iou(r.target_val_iou));
            }
        }
        Command::Eval { data, checkpoint, out } => {
            let data = Dataset::open(data)?;
            let report = pipeline::run_eval(&checkpoint, &data, &out)?;
            println!(
                "target-val IoU {:.4} over {} images (mean per-image {:.4})",
                report.iou(),
                report.rows.len(),
                report.mean_iou()
            );
        }
        Command::Pair { data, out } => {
            let data = Dataset::open(data)?;
            let pairs = pipeline::compute_pairs(&data)?;
            std::fs::write(&out, pipeline::pairs_to_tsv(&pairs))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{} pairs written to {}", pairs.len(), out.display());
        }
        Command::Verify { inject_fault } => {
            quadformer::autograd::set_backward_fault(inject_fault);
            let report = quadformer::verify::run();
            for c in &report.checks {
                let status = if c.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<18} {:>6.1}s  {}", c.name, c.seconds, c.detail);
            }
            if !report.passed() {
                bail!(VerificationFailed);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
