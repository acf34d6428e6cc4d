use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use pglode_cli::commands::{self, CaseWindow};
use pglode_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "pglode", version, about = "Synthetic extreme-rainfall forecasting experiments")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and model initialisation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate {
        #[arg(long)]
        n_days: Option<usize>,
    },
    /// Train one model and save its checkpoint and loss curve.
    Train {
        /// pg-lode or convlstm.
        #[arg(long)]
        model: String,
    },
    /// Score persistence and checkpoints on the evaluation split.
    Evaluate {
        /// Checkpoints to score; defaults to those in the output directory.
        checkpoints: Vec<PathBuf>,
    },
    /// Tile time series around one day.
    CaseStudy {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        tile_row: usize,
        #[arg(long, default_value_t = 0)]
        tile_col: usize,
        /// Absolute day index at the centre of the window.
        #[arg(long)]
        center_day: usize,
        #[arg(long, default_value_t = 12)]
        window: usize,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Command::Generate { n_days: Some(n) } = cli.command {
        cfg.n_days = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Generate { .. } => {
            let s = commands::cmd_generate(&cfg)?;
            println!(
                "wrote {} days to {}; planted extremes: {} pixels on {} days",
                s.days,
                s.path.display(),
                s.burst_pixels,
                s.burst_days
            );
        }
        Command::Train { model } => {
            let kind = commands::parse_model(&model)?;
            let report = commands::cmd_train(&cfg, kind, |e| {
                println!("{kind} epoch {} loss {:.4} (mse {:.4}, bce {:.4})", e.epoch, e.total, e.mse, e.bce)
            })?;
            if let Some(path) = &report.checkpoint {
                println!("wrote {} after {:.1} s", path.display(), report.wall_seconds);
            }
        }
        Command::Evaluate { checkpoints } => {
            let paths = commands::resolve_checkpoints(&cfg, &checkpoints);
            let rows = commands::cmd_evaluate(&cfg, &paths)?;
            print!("{}", pglode::verify::render_csv(&rows));
        }
        Command::CaseStudy { checkpoints, tile_row, tile_col, center_day, window } => {
            let paths = commands::resolve_checkpoints(&cfg, &checkpoints);
            let w = CaseWindow { tile_row, tile_col, center_day, window };
            let study = commands::cmd_case_study(&cfg, &paths, &w)?;
            print!("{}", study.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
