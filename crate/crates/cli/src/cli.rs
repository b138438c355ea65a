use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::{exit_code, EXIT_OK, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "idnanet", version, about = "Infrared small-target segmentation: train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides `optim.seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch; writes log.csv and checkpoint.idna into --out.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Report mIoU / Pd / Fa of a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
    },
    /// Write the probability map of one image as an 8-bit PNG.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PNG")]
        input: PathBuf,
    },
    /// Generate the synthetic dataset into --out.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep thresholds and write `threshold,fa,pd` rows.
    Roc {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Number of evenly spaced thresholds from 1 to 0.
        #[arg(long, value_name = "N")]
        thresholds: Option<usize>,
    },
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn config(common: &Common) -> anyhow::Result<Option<RunConfig>> {
    let Some(path) = &common.config else {
        return Ok(common.seed.map(|seed| RunConfig {
            seed,
            ..RunConfig::default()
        }));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { common } => {
            let cfg = config(&common)?.unwrap_or_default();
            let out = out_dir(&common, "run");
            let outcome = commands::train(&cfg, &out, |l| println!("{}", commands::log_line(l)))?;
            println!("checkpoint={}", outcome.checkpoint.display());
        }
        Command::Eval { common, ckpt } => {
            let (cfg, net) = commands::load_for_inference(&ckpt, config(&common)?)?;
            let samples = commands::dataset(&cfg)?;
            let report = commands::evaluate(&cfg, &net, &samples)?;
            print!("{}", commands::report_text(&report));
            if let Some(out) = &common.out {
                commands::write_report(&report, out)?;
            }
        }
        Command::Predict { common, ckpt, input } => {
            let (cfg, net) = commands::load_for_inference(&ckpt, config(&common)?)?;
            let output = predict_path(common.out.as_deref(), &input);
            commands::predict(&cfg, &net, &input, &output)?;
            println!("{}", output.display());
        }
        Command::Synth { common } => {
            let cfg = config(&common)?.unwrap_or_default();
            let out = out_dir(&common, "synth");
            let manifest = commands::synth(&cfg, &out)?;
            println!("manifest={}", manifest.display());
        }
        Command::Roc { common, ckpt, thresholds } => {
            let (cfg, net) = commands::load_for_inference(&ckpt, config(&common)?)?;
            let samples = commands::dataset(&cfg)?;
            let points = commands::roc(&cfg, &net, &samples, thresholds.unwrap_or(cfg.eval.roc_points))?;
            let csv = commands::roc_csv(&points);
            match &common.out {
                Some(out) => {
                    std::fs::create_dir_all(out)?;
                    let path = out.join("roc.csv");
                    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
                    println!("{}", path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

/// `--out` ending in `.png` is the file itself; otherwise a directory that
/// receives `<input stem>_prob.png`.
fn predict_path(out: Option<&Path>, input: &Path) -> PathBuf {
    let name = format!(
        "{}_prob.png",
        input.file_stem().map_or("prediction".into(), |s| s.to_string_lossy())
    );
    match out {
        Some(o) if o.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) => o.to_path_buf(),
        Some(o) => o.join(name),
        None => PathBuf::from(name),
    }
}
