use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use driftseg::commands::{self, AdaptMethod, SplitCommandKind};
use driftseg::config::{read_json, ExperimentConfig};
use driftseg::report;
use driftseg::runner::read_records;
use driftseg::ConfigError;
use driftseg_core::adaptation::AdaptConfig;
use driftseg_core::evaluation::ScoreConfig;

#[derive(Parser)]
#[command(name = "driftseg", version, about = "Building damage segmentation under domain shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// SyntheticSpec JSON; the six-domain benchmark when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write IID, leave-domain-out or Gupta splits of a dataset.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        kind: SplitCommandKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated tier-3 domains for the Gupta split.
        #[arg(long, value_delimiter = ',')]
        tier3: Option<Vec<String>>,
    },
    /// Train one model from a job file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate BN statistics overlays on a dataset.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        method: AdaptMethod,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to these domains (comma-separated).
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<String>>,
        /// Output directory; `<ckpt>.overlays` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// AdaptConfig JSON.
        #[arg(long)]
        adapt_config: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, printing a metrics report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// BN overlay file; repeat for per-domain overlays.
        #[arg(long)]
        overlay: Vec<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        /// 1-based fold index in the split file.
        #[arg(long, default_value_t = 1)]
        fold: usize,
        /// Score the training side instead of the test side.
        #[arg(long)]
        train_side: bool,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment config, resuming completed records.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render result tables from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Also write the CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let n = commands::synth(spec.as_deref(), &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Split {
            dataset,
            kind,
            out,
            test_fraction,
            seed,
            tier3,
        } => {
            let file = commands::split(&dataset, kind, test_fraction, seed, tier3)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&file)?)?;
            println!("wrote {} split(s) to {}", file.splits.len(), out.display());
        }
        Command::Train { config } => {
            let result = commands::train_job(&config)?;
            if let Some(last) = result.log.last() {
                println!("epoch {} loss {:.4}", last.epoch, last.mean_loss);
            }
            println!("checkpoint {}", result.checkpoint.display());
            if let Some(p) = result.swa_checkpoint {
                println!("swa checkpoint {}", p.display());
            }
        }
        Command::Adapt {
            ckpt,
            method,
            data,
            domains,
            out,
            adapt_config,
        } => {
            let config: AdaptConfig = match adapt_config {
                Some(p) => read_json(&p)?,
                None => AdaptConfig::default(),
            };
            let out = out.unwrap_or_else(|| ckpt.with_extension("overlays"));
            for p in commands::adapt(&ckpt, method, &data, domains.as_deref(), &out, &config)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            ckpt,
            overlay,
            split,
            fold,
            train_side,
            batch_size,
            out,
        } => {
            let report = commands::eval(&ckpt, &overlay, &split, fold, train_side, batch_size, &ScoreConfig::default())?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Run { config } => {
            let config = ExperimentConfig::load(&config)?;
            let summary = driftseg::run(&config)?;
            println!(
                "{} new record(s), {} total in {}",
                summary.new_records.len(),
                summary.records.len(),
                config.output_dir.join(driftseg::runner::RESULTS_FILE).display()
            );
            let tables = report::tables(&summary.records)?;
            std::fs::write(config.output_dir.join("report.md"), report::markdown(&tables))?;
            std::fs::write(config.output_dir.join("report.csv"), report::csv(&tables))?;
        }
        Command::Report { records, csv } => {
            let records = read_records(&records)?;
            if records.is_empty() {
                return Err(driftseg::config::config_error("no records to report"));
            }
            let tables = report::tables(&records)?;
            print!("{}", report::markdown(&tables));
            if let Some(p) = csv {
                std::fs::write(p, report::csv(&tables))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    driftseg::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match driftseg::init_threads().and_then(|()| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
