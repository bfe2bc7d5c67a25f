//! `smfit`: simulate phantoms, fit the network or the voxelwise baseline, score, upsample and
//! render parameter maps.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smfit_core::forward::IntegrationMode;
use smfit_core::inr::Preset;
use smfit_core::train::LossKind;

#[derive(Parser)]
#[command(name = "smfit", version, about = "Standard Model fitting with coordinate networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom (signals, ground truth, sigma map, mask, protocol).
    Simulate(Common),
    /// Train the coordinate network on a signal volume.
    Fit(Common),
    /// Voxelwise Levenberg–Marquardt fit.
    Nlls(Common),
    /// Pearson ρ and RMSE of an estimate against ground truth.
    Score(Common),
    /// Evaluate a checkpoint on a finer lattice.
    Upsample(Common),
    /// Write one slice of a volume component as an 8-bit PGM image.
    Render(Common),
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long, value_parser = parse_lmax)]
    pub lmax: Option<usize>,
    #[arg(long, value_parser = parse_integration)]
    pub integration: Option<IntegrationMode>,
    /// Gradient deviation field (9-component volume).
    #[arg(long)]
    pub grad_dev: Option<PathBuf>,
}

fn parse_lmax(s: &str) -> Result<usize, String> {
    match s {
        "2" | "4" | "6" | "8" => Ok(s.parse().unwrap()),
        _ => Err(format!("lmax must be one of 2, 4, 6, 8 (got '{s}')")),
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: smfit_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: smfit_core::Error| e.to_string())
}

fn parse_integration(s: &str) -> Result<IntegrationMode, String> {
    s.parse().map_err(|e: smfit_core::Error| e.to_string())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SMFIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| format!("SMFIT_THREADS must be a positive integer, got '{v}'"))?;
    if n == 0 {
        return Err("SMFIT_THREADS must be a positive integer, got '0'".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Simulate(c) => commands::simulate(&c),
        Command::Fit(c) => commands::fit(&c),
        Command::Nlls(c) => commands::nlls(&c),
        Command::Score(c) => commands::score(&c),
        Command::Upsample(c) => commands::upsample(&c),
        Command::Render(c) => commands::render(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
