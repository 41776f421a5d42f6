mod commands;
mod config;
mod error;
mod output;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moe_workbench::scaling::IsoFlopAxis;

use commands::route::RouteSim;
use config::{load_config, preset, RunConfig};
use error::CliError;
use output::Format;

#[derive(Parser)]
#[command(name = "moe-workbench", version, about = "Desk-scale MoE transformer workbench")]
struct Cli {
    /// Write the command's output to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigSource {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled preset: `hunyuan-large` or `toy`.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn resolve(&self, default_preset: &str) -> Result<RunConfig, CliError> {
        match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path),
            (None, Some(name)) => preset(name),
            (None, None) => preset(default_preset),
        }
    }
}

#[derive(Args, Clone, Copy)]
struct FormatFlags {
    /// Emit CSV.
    #[arg(long, conflicts_with = "json")]
    csv: bool,
    /// Emit JSON.
    #[arg(long)]
    json: bool,
}

impl FormatFlags {
    fn format(self) -> Format {
        Format::from_flags(self.csv, self.json)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Params,
    Tokens,
}

impl From<Axis> for IsoFlopAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Params => IsoFlopAxis::Params,
            Axis::Tokens => IsoFlopAxis::Tokens,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// KV-cache bytes per token for MHA, GQA, MQA, CLA and GQA+CLA.
    KvReport {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        format: FormatFlags,
    },
    /// Training compute C = 9.59 N D + 2.3e8 D, optionally batch-corrected.
    Budget {
        #[command(flatten)]
        source: ConfigSource,
        /// Activated parameters.
        #[arg(long)]
        n: Option<f64>,
        /// Training tokens.
        #[arg(long)]
        d: Option<f64>,
        /// B / B_crit; adds C_min = C / (1 + B / B_crit).
        #[arg(long)]
        b_ratio: Option<f64>,
        #[command(flatten)]
        format: FormatFlags,
    },
    /// Power-law fit of isoFLOP optima against C_min (JSON).
    Fit {
        #[command(flatten)]
        source: ConfigSource,
        /// Measurements CSV with header c_min,n,d,loss.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "params")]
        axis: Axis,
        /// Include the per-budget optima in the output.
        #[arg(long)]
        optima: bool,
    },
    /// Per-budget isoFLOP minima from a measurements CSV.
    Isoflop {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "params")]
        axis: Axis,
        #[command(flatten)]
        format: FormatFlags,
    },
    /// CSV of (tokens_seen, group, lr) over an even grid.
    LrPlan {
        #[command(flatten)]
        source: ConfigSource,
        /// Grid points including both ends.
        #[arg(long, default_value_t = 101)]
        points: usize,
        /// Overrides lr.total_tokens.
        #[arg(long)]
        total_tokens: Option<f64>,
    },
    /// Route synthetic gates and report the dispatch plan.
    RouteSim {
        #[arg(long, default_value_t = 16)]
        experts: usize,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        /// Per-expert capacity; defaults to ceil(capacity_factor * tokens * top_k / experts).
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long, default_value_t = 1.25)]
        capacity_factor: f64,
        /// Every token prefers expert 0.
        #[arg(long)]
        all_to_one: bool,
        /// Reassign overflow to experts with free capacity instead of dropping it.
        #[arg(long)]
        recycle: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        format: FormatFlags,
    },
    /// Train the micro model to memorise random sequences.
    TrainDemo {
        #[command(flatten)]
        source: ConfigSource,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides output.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        format: FormatFlags,
    },
    /// Greedy decoding through the KV cache.
    InferDemo {
        #[command(flatten)]
        source: ConfigSource,
        /// Load weights from a checkpoint instead of initialising from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated token ids.
        #[arg(long, default_value = "0,1,2,3")]
        prompt: String,
        #[arg(long, default_value_t = 8)]
        generate: usize,
        #[arg(long)]
        json: bool,
    },
}

fn measurements(input: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    input
        .or_else(|| cfg.scaling.measurements.clone())
        .ok_or_else(|| CliError::Usage("no measurements: pass --input or set scaling.measurements".into()))
}

fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::KvReport { source, format } => {
            commands::analysis::kv_report(&source.resolve("hunyuan-large")?, format.format())
        }
        Command::Budget { source, n, d, b_ratio, format } => {
            let cfg = source.resolve("hunyuan-large")?;
            let explicit = n.is_some() || d.is_some();
            let pick = |flag: Option<f64>, key: Option<f64>, name: &str| {
                flag.or(if explicit { None } else { key })
                    .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
            };
            let n = pick(n, cfg.scaling.activated_params, "n")?;
            let d = pick(d, cfg.scaling.tokens, "d")?;
            let ratio = b_ratio.or(if explicit { None } else { cfg.scaling.batch_over_critical });
            commands::analysis::budget(n, d, ratio, format.format())
        }
        Command::Fit { source, input, axis, optima } => {
            let cfg = source.resolve("toy")?;
            let points = commands::analysis::read_measurements(&measurements(input, &cfg)?)?;
            commands::analysis::fit(&points, axis.into(), optima)
        }
        Command::Isoflop { source, input, axis, format } => {
            let cfg = source.resolve("toy")?;
            let points = commands::analysis::read_measurements(&measurements(input, &cfg)?)?;
            commands::analysis::isoflop(&points, axis.into(), format.format())
        }
        Command::LrPlan { source, points, total_tokens } => {
            let cfg = source.resolve("hunyuan-large")?;
            let total = total_tokens
                .or(cfg.lr.total_tokens)
                .ok_or_else(|| CliError::config("config.invalid", "lr.total_tokens is required for lr-plan"))?;
            commands::analysis::lr_plan(&cfg, total, points)
        }
        Command::RouteSim { experts, tokens, top_k, capacity, capacity_factor, all_to_one, recycle, seed, format } => {
            let sim = RouteSim { experts, tokens, top_k, capacity, capacity_factor, all_to_one, recycle, seed };
            commands::route::route_sim(&sim, format.format())
        }
        Command::TrainDemo { source, steps, checkpoint, format } => {
            let mut cfg = source.resolve("toy")?;
            if let Some(s) = steps {
                if s == 0 {
                    return Err(CliError::Usage("--steps must be at least 1".into()));
                }
                cfg.train.steps = s;
            }
            let checkpoint = checkpoint.or_else(|| cfg.output.checkpoint.clone());
            commands::demo::train_demo(&cfg, checkpoint.as_deref(), format.format())
        }
        Command::InferDemo { source, checkpoint, prompt, generate, json } => {
            let cfg = source.resolve("toy")?;
            let prompt = commands::demo::parse_prompt(&prompt)?;
            let format = if json { Format::Json } else { Format::Human };
            commands::demo::infer_demo(&cfg, checkpoint.as_deref(), &prompt, generate, format)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli.command).and_then(|text| match &cli.out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io("io.write", path, e)),
        None => {
            std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("io.write", "<stdout>".as_ref(), e))
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
