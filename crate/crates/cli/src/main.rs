//! `scanid`: synthesize scanner data, forge, train, evaluate and map.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
//! Errors are printed as one line `error[<kind>]: <message>` on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::CliError;

#[derive(Parser, Debug)]
#[command(name = "scanid", version, about = "Scanner model identification and forgery maps from noise fingerprints")]
struct Cli {
    /// Worker threads for data-parallel work (1 = sequential, byte-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// JSON run config; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-scanner dataset with a split manifest.
    Synth(SynthArgs),
    /// Make a self-copy or multi-source forgery with a ground-truth mask.
    Forge(ForgeArgs),
    /// Train the patch classifier on a dataset directory.
    Train(TrainArgs),
    /// Patch and image accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Reliability maps of one image for a list of strides.
    Map(MapArgs),
    /// Summarize the artifacts of one or more run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scanners: Option<usize>,
    #[arg(long)]
    pub per_scanner: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub gain_std: Option<f64>,
    #[arg(long)]
    pub row_std: Option<f64>,
    #[arg(long)]
    pub readout_std: Option<f64>,
    /// Take page content from the images in this directory.
    #[arg(long)]
    pub content_dir: Option<PathBuf>,
    /// Write PNG scans instead of device-quality JPEG.
    #[arg(long)]
    pub lossless: bool,
}

#[derive(Args, Debug)]
pub struct ForgeArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Donor image; its presence selects a multi-source splice.
    #[arg(long)]
    pub donor: Option<PathBuf>,
    /// Scanner labels of target and donor, used only to warn about same-label donors.
    #[arg(long)]
    pub image_label: Option<usize>,
    #[arg(long)]
    pub donor_label: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recompress the forged image as JPEG at this quality.
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    #[arg(long)]
    pub min_side: Option<usize>,
    #[arg(long)]
    pub max_side: Option<usize>,
    #[arg(long)]
    pub min_scale: Option<f64>,
    #[arg(long)]
    pub max_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory holding `manifest.txt`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training sub-image side length.
    #[arg(long)]
    pub sub_image: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Tile side used for voting.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma separated strides.
    #[arg(long, value_delimiter = ',')]
    pub strides: Option<Vec<usize>>,
    /// Reliability below this marks a pixel as suspicious.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Ground-truth mask PNG; adds IoU and F1 to the summary.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to summarize.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Where to write `report.md` (defaults to the first run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = scanid::Exec::with_workers(cli.workers).map_err(|e| CliError::usage(e.to_string()))?;
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => commands::synth(a, file, &exec),
        Command::Forge(a) => commands::forge(a, file),
        Command::Train(a) => commands::train(a, file, &exec),
        Command::Eval(a) => commands::eval(a, file, &exec),
        Command::Map(a) => commands::map(a, file, &exec),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("{line}");
            }
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
