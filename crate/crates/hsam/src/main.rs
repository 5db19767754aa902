use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hsam::report::{self, Format};
use hsam::{config, dataset_io, log, run};
use hsam_core::config::RunConfig;
use hsam_core::data::{generate, GenerateSpec};
use hsam_core::metrics::HdVariant;

#[derive(Parser)]
#[command(name = "hsam", version, about = "Two-stage hierarchical mask decoding on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Classes including background.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.4)]
        tail_ratio: f64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.log and checkpoints into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Split evaluated during training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric table destination; CSV when the name ends in .csv.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for predicted and ground-truth label maps.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Architecture the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = HdArg::Avg)]
        hd: HdArg,
    },
    /// Run gradient checks, attention identities, noise statistics and
    /// parameter counts.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Tabulate a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum HdArg {
    Avg,
    Max,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { seed, n, size, classes, tail_ratio, split, out } => {
            let ds = generate(&GenerateSpec { seed, n, height: size, width: size, classes, tail_ratio, split })?;
            dataset_io::write(&ds, &out)?;
            let m = dataset_io::Manifest::of(&ds);
            println!("wrote {} samples to {} (pixel frequencies {:?})", ds.len(), out.display(), m.frequencies);
        }
        Command::Train { config, data, eval_data, out, resume } => {
            let cfg = load_config(config.as_ref())?;
            let (train, _) = dataset_io::read(&data)?;
            let eval = eval_data.map(|p| dataset_io::read(&p)).transpose()?.map(|(d, _)| d);
            let plan = run::TrainPlan { cfg: &cfg, train: &train, eval: eval.as_ref(), out: &out, resume: resume.as_deref() };
            let outcome = run::train(&plan, |r| println!("{}", r.to_line()))?;
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval { checkpoint, data, report, dump_masks, config, hd } => {
            let expected = config.as_ref().map(|p| config::load(p)).transpose()?;
            let (ds, _) = dataset_io::read(&data)?;
            let variant = match hd {
                HdArg::Avg => HdVariant::Avg,
                HdArg::Max => HdVariant::Max,
            };
            let ev = run::evaluate_checkpoint(&checkpoint, expected.as_ref(), &ds, variant)?;
            print!("{}", report::metric_table(&ev.report, Format::Text));
            if let Some(path) = report {
                let format = if path.extension().is_some_and(|e| e == "csv") { Format::Csv } else { Format::Text };
                std::fs::write(&path, report::metric_table(&ev.report, format))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(dir) = dump_masks {
                run::dump_masks(&dir, &ds, &ev.predictions)?;
            }
        }
        Command::Verify { config, seeds, json } => {
            let cfg = load_config(config.as_ref())?;
            let r = run::verify(&cfg, seeds)?;
            print!("{}", run::verify_lines(&r));
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&r)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if !r.all_passed() {
                bail!("{} check(s) failed", r.failures().count());
            }
        }
        Command::Report { log: path, format } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{}", report::log_table(&log::parse_log(&text)?, format));
        }
    }
    Ok(())
}
