use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use spherediff_cli::commands::{self, EvalArgs, SampleArgs, SampleFormat};
use spherediff_cli::config::RunConfig;
use spherediff_cli::exit::ExitError;

/// Continuous diffusion language models on the hypersphere.
#[derive(Parser)]
#[command(name = "spherediff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Build the Riemannian-normal parameter tables for a run.
    Precompute {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Table file to write.
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set train.lr=3e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a predictor and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Text corpus; without it the config's [source] is used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Table file from `precompute`.
        #[arg(long)]
        table: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV); defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate sequences from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        /// Random walk steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the raw parameters rather than the EMA copy.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 1e-3)]
        stop_delta: f64,
        /// Multiplies the diffusion coefficient; 0 is deterministic.
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
    },
    /// Estimate the likelihood bound of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Run configuration; its [eval] section and [source] are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation data: text file or JSONL of token arrays.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Quadrature times.
        #[arg(long)]
        quad: Option<usize>,
        /// Bridge draws per sequence.
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report file (JSON); stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        raw: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write diagnostic CSVs: MMD, projected vs full, radial, ablation.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Skip training the three objectives.
        #[arg(long)]
        skip_ablation: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write sequences from the configured source as JSONL.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        num: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), ExitError> {
    match cli.command {
        Command::Precompute { config, out, set } => {
            print(&commands::precompute(&RunConfig::load(&config, &set)?, &out)?);
        }
        Command::Train {
            config,
            data,
            table,
            out,
            log,
            set,
        } => {
            let cfg = RunConfig::load(&config, &set)?;
            print(&commands::train(&cfg, data.as_deref(), &table, &out, log.as_deref())?);
        }
        Command::Sample {
            ckpt,
            num,
            len,
            steps,
            seed,
            format,
            out,
            raw,
            stop_delta,
            noise_scale,
        } => {
            let args = SampleArgs {
                ckpt,
                num,
                len,
                steps,
                seed,
                format: match format {
                    Format::Text => SampleFormat::Text,
                    Format::Jsonl => SampleFormat::Jsonl,
                },
                out,
                raw,
                stop_delta,
                noise_scale,
            };
            let (_, text) = commands::sample(&args)?;
            if args.out.is_none() {
                print!("{text}");
            }
        }
        Command::Eval {
            ckpt,
            config,
            data,
            quad,
            draws,
            seed,
            out,
            raw,
            set,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p, &set)?,
                None => RunConfig::parse("", &set)?,
            };
            if let Some(q) = quad {
                cfg.eval.quad = q;
            }
            if let Some(r) = draws {
                cfg.eval.draws = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = commands::eval(&cfg, &EvalArgs { ckpt, data, out, raw })?;
            print(&serde_json::to_value(report).expect("report serializes"));
        }
        Command::Diagnose {
            config,
            table,
            out_dir,
            skip_ablation,
            set,
        } => {
            let cfg = RunConfig::load(&config, &set)?;
            print(&commands::diagnose(&cfg, &table, &out_dir, !skip_ablation)?);
        }
        Command::Export {
            config,
            data,
            num,
            len,
            out,
            set,
        } => {
            let cfg = RunConfig::load(&config, &set)?;
            print(&commands::export(&cfg, data.as_deref(), num, len, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
