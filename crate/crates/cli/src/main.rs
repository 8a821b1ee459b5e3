mod commands;
mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spectromind::tfd::TfdKind;

use commands::{Ctx, Method};
use config::RunConfig;
use error::CliResult;

#[derive(Parser)]
#[command(name = "spectromind", version, about = "EEG visual-stimulus decoding pipeline")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding stage records and artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = parse_kind)]
    representation: Option<TfdKind>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Image-generation service base URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    rt_factor: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and register a dataset directory.
    Import {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark with a one-hot teacher.
    Synth,
    /// Notch, band-pass and standardize every trial.
    Preprocess,
    /// Compute time-frequency images for `--representation`.
    Tfd,
    /// Fit a CNN (cnn, conv1d) or a classical baseline (lr-squared, lr-windowed, pca-lr).
    Train {
        #[arg(long, default_value = "cnn")]
        model: String,
    },
    /// Train the student CNN against teacher soft targets.
    Distill {
        /// Teacher outputs (.jsonl) or image embeddings (EMBD).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score held-out trials and write a report.
    Evaluate {
        #[arg(long)]
        method: Option<String>,
    },
    /// Write held-out predictions.
    Predict {
        #[arg(long)]
        method: Option<String>,
    },
    /// Render predicted classes through the image-generation service.
    Reconstruct {
        #[arg(long)]
        method: Option<String>,
    },
    /// Decode a continuous recording window by window and time each step.
    StreamSim {
        #[arg(long)]
        method: Option<String>,
        /// Number of held-out trials to stream.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compare evaluated methods in one table.
    Report { methods: Vec<String> },
}

fn parse_kind(s: &str) -> Result<TfdKind, String> {
    s.parse().map_err(|e: spectromind::Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.representation {
        cfg.representation = k;
    }
    if let Some(a) = cli.alpha {
        cfg.kd.alpha = a;
    }
    if let Some(t) = cli.temperature {
        cfg.kd.temperature = t;
    }
    if let Some(e) = &cli.endpoint {
        cfg.endpoint = e.clone();
    }
    if let Some(r) = cli.rt_factor {
        cfg.rt_factor = r;
    }
    if let Command::Distill { teacher: Some(t) } = &cli.command {
        cfg.teacher = Some(t.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx::new(cfg, cli.out.clone())?;
    let method = |m: &Option<String>| -> CliResult<Method> {
        match m {
            Some(m) => Method::parse(m, &ctx.cfg),
            None => Ok(Method::Kd(ctx.cfg.representation)),
        }
    };
    match &cli.command {
        Command::Import { dataset } => commands::import(&ctx, dataset.clone()),
        Command::Synth => commands::synth(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Tfd => commands::tfd(&ctx),
        Command::Train { model } => {
            let m = Method::parse(model, &ctx.cfg)?;
            if matches!(m, Method::Kd(_)) {
                return Err(error::CliError::Config("use `distill` for knowledge-distillation runs".into()));
            }
            commands::fit(&ctx, m)
        }
        Command::Distill { .. } => commands::fit(&ctx, Method::Kd(ctx.cfg.representation)),
        Command::Evaluate { method: m } => commands::evaluate(&ctx, method(m)?),
        Command::Predict { method: m } => commands::predict(&ctx, method(m)?),
        Command::Reconstruct { method: m } => commands::reconstruct_images(&ctx, method(m)?),
        Command::StreamSim { method: m, trials } => commands::stream_sim(&ctx, method(m)?, *trials),
        Command::Report { methods } => {
            print!("{}", commands::report_table(&ctx, methods)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
