use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use great_core::complexity::cost_report;
use great_core::harness::bench::{run_bench, SweepSpec};
use great_core::harness::gradcheck::{run_gradcheck, small_config};
use great_core::harness::{
    evaluate, gen_synthetic, load_checkpoint, load_dataset, predict, save_checkpoint, save_dataset, train, TrainConfig,
};
use great_core::ModelConfig;

#[derive(Parser)]
#[command(name = "great", version, about = "Graph reasoning transformer toolkit")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset file.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.grt and metrics.jsonl into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU and pixel accuracy of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Config file; defaults to a 16x16, L=4, C'=16, M=8 two-layer model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form and measured interaction costs over a sweep.
    Bench {
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Parameter, MAC and interaction-state accounting for a config.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            classes,
            out,
        } => {
            let data = gen_synthetic(seed, count, size, classes)?;
            save_dataset(&out, &data).with_context(|| format!("writing {}", out.display()))?;
            if !cli.json {
                emit(&format!(
                    "wrote {count} images of {size}x{size} with {classes} classes to {}\n",
                    out.display()
                ))?;
            }
        }
        Command::Train { config, data, out } => {
            let config = read_config(config.as_deref())?;
            let data = load_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            fs::create_dir_all(&out)?;
            let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
            let outcome = train(&config, &data, &mut |record| {
                serde_json::to_writer(&mut metrics, record)?;
                metrics.write_all(b"\n")?;
                Ok(())
            })?;
            metrics.flush()?;
            save_checkpoint(&out.join("checkpoint.grt"), &config, &outcome.model)?;
            let last = outcome.records.last();
            if cli.json {
                print_json(&last)?;
            } else if let Some(r) = last {
                emit(&format!(
                    "{} steps, final loss {:.6}, mIoU {:.4}, PixAcc {:.4}\n",
                    r.step + 1,
                    r.loss,
                    r.miou.unwrap_or(f64::NAN),
                    r.pixacc.unwrap_or(f64::NAN)
                ))?;
            }
        }
        Command::Eval { checkpoint, data } => {
            let (config, model) =
                load_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let data = load_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let pred = predict(&model, &config.model(), &data.images)?;
            let (miou, pixacc) = evaluate(&pred, &data.masks, config.classes)?;
            if cli.json {
                print_json(&serde_json::json!({ "miou": miou, "pixacc": pixacc }))?;
            } else {
                emit(&format!("mIoU {miou:.6}  PixAcc {pixacc:.6}\n"))?;
            }
        }
        Command::Gradcheck { config, seed } => {
            let model: ModelConfig = match config {
                Some(p) => read_config(Some(&p))?.model(),
                None => small_config(),
            };
            let report = run_gradcheck(&model, seed)?;
            if cli.json {
                print_json(&report)?;
            } else {
                emit(&format!("{report}\n"))?;
            }
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench { sweep } => {
            let spec = match sweep {
                Some(p) => {
                    SweepSpec::from_json(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?
                }
                None => SweepSpec::default(),
            };
            let report = run_bench(&spec)?;
            if cli.json {
                print_json(&report)?;
            } else {
                emit(&report.to_string())?;
            }
        }
        Command::Params { config } => {
            let report = cost_report(&read_config(config.as_deref())?.model())?;
            if cli.json {
                print_json(&report)?;
            } else {
                emit(&report.to_string())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<great_core::Error>().is_some_and(|g| g.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
