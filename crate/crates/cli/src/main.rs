//! `polcomp`: characterize retarders, run tomography, compensate and benchmark.

mod commands;
mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Exit status of a budget-exhausted compensation.
pub const EXIT_BUDGET: u8 = 3;
const EXIT_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "polcomp",
    version,
    about = "Polarization compensation with liquid-crystal retarders"
)]
struct Cli {
    /// Directory for relative and default output paths.
    #[arg(long, global = true, env = "POLCOMP_OUT_DIR", value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Build a retardance curve from a characterization sweep.
    Characterize(CharacterizeArgs),
    /// Estimate the Stokes vector of a scan, or of every scan in a directory.
    Tomography(TomographyArgs),
    /// Run the compensation loop against a simulated fiber.
    Compensate(CompensateArgs),
    /// Run seeded compensation trials and write statistics.
    Bench(BenchArgs),
    /// Generate synthetic input files.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CharacterizeArgs {
    /// Sweep CSV; metadata is read from the `.json` file beside it.
    pub sweep: PathBuf,
    /// Curve CSV to write [default: <sweep stem>.curve.csv].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Wavelength recorded in the curve metadata.
    #[arg(long, default_value_t = 1550.0)]
    pub wavelength_nm: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TomographyArgs {
    /// Scan CSV, or a directory of scan CSVs.
    pub input: PathBuf,
    /// JSON to write [default: <input stem>.tomography.json].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Known input state for fidelity (H, V, D, A, R, L or u1,u2,u3).
    #[arg(long)]
    pub truth: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    None,
    Paper,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LoopArgs {
    #[arg(long)]
    pub coarse_threshold: Option<f64>,
    #[arg(long)]
    pub fine_threshold: Option<f64>,
    /// Fine-tuning budget; also caps the coarse budget.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompensateArgs {
    /// Retardance curve CSV, one per cell in beam order (3 or 4).
    #[arg(long = "curve", required = true)]
    pub curves: Vec<PathBuf>,
    /// Target state: H, V, D, A, R, L or u1,u2,u3.
    #[arg(long, default_value = "R")]
    pub target: String,
    #[arg(long, value_enum, default_value_t = NoisePreset::Paper)]
    pub noise_preset: NoisePreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub loop_args: LoopArgs,
    /// JSON-lines log [default: compensate.jsonl].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Number of trials.
    #[arg(short = 'n', long = "trials", default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_enum, default_value_t = NoisePreset::Paper)]
    pub noise_preset: NoisePreset,
    /// Trial i uses seed base_seed + i.
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[arg(long, default_value = "R")]
    pub target: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub loop_args: LoopArgs,
    /// Statistics JSON [default: bench_stats.json].
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Per-step fidelity traces CSV [default: <stats stem>.traces.csv].
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthCommand {
    /// Characterization sweep of a model retarder.
    Sweep(SynthSweepArgs),
    /// Tomography scan of a known state.
    Scan(SynthScanArgs),
    /// Retardance curves of the four simulated bench cells.
    Curves(SynthCurvesArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthSweepArgs {
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Drive voltage where the model retardance is exactly π.
    #[arg(long, default_value_t = 2.0)]
    pub pi_at_v: f64,
    #[arg(long, default_value_t = 0.1)]
    pub v_start: f64,
    #[arg(long, default_value_t = 16.0)]
    pub v_end: f64,
    #[arg(long, default_value_t = 0.01)]
    pub v_step: f64,
    /// Detector noise per sample, volts (full scale is 1 V).
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Samples averaged per drive voltage.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub background: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Every reading at full scale, which no curve can be built from.
    #[arg(long)]
    pub constant: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthScanArgs {
    /// Scan CSV, or a directory when `--count` is above 1.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "H")]
    pub state: String,
    #[arg(long, value_enum, default_value_t = NoisePreset::None)]
    pub noise_preset: NoisePreset,
    #[arg(long, default_value_t = 310)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scans; scan i uses seed + i.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthCurvesArgs {
    /// Directory receiving lcvr1.csv to lcvr4.csv.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Bad flags or flag combinations caught after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn place(out_dir: Option<&Path>, given: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    let p = given.unwrap_or_else(default);
    match out_dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p,
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned())
}

impl Command {
    /// Fills in every output path, so the command can be stored and replayed as is.
    fn resolve_outputs(&mut self, out_dir: Option<&Path>) {
        match self {
            Command::Characterize(a) => {
                let d = PathBuf::from(format!("{}.curve.csv", stem(&a.sweep)));
                a.out = Some(place(out_dir, a.out.take(), || d));
            }
            Command::Tomography(a) => {
                let d = PathBuf::from(format!("{}.tomography.json", stem(&a.input)));
                a.out = Some(place(out_dir, a.out.take(), || d));
            }
            Command::Compensate(a) => {
                a.out = Some(place(out_dir, a.out.take(), || "compensate.jsonl".into()));
            }
            Command::Bench(a) => {
                let out = place(out_dir, a.out.take(), || "bench_stats.json".into());
                let traces = match a.traces.take() {
                    Some(t) => place(out_dir, Some(t), PathBuf::new),
                    None => out.with_file_name(format!("{}.traces.csv", stem(&out))),
                };
                a.out = Some(out);
                a.traces = Some(traces);
            }
            Command::Synth(SynthCommand::Sweep(a)) => {
                a.out = Some(place(out_dir, a.out.take(), || "sweep.csv".into()));
            }
            Command::Synth(SynthCommand::Scan(a)) => {
                let d = if a.count > 1 { "scans" } else { "scan.csv" };
                a.out = Some(place(out_dir, a.out.take(), || d.into()));
            }
            Command::Synth(SynthCommand::Curves(a)) => {
                a.out = Some(place(out_dir, a.out.take(), || "curves".into()));
            }
            Command::Replay(_) => {}
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let invocation: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let mut command = cli.command;
    command.resolve_outputs(cli.out_dir.as_deref());
    match commands::dispatch(command, invocation, None) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_ERROR)
            }
        }
    }
}
