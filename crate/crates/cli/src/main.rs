mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Motion and B0 artifact simulation, line labels and weighted TV
/// reconstruction for multi-echo gradient-echo MRI.
#[derive(Parser, Debug)]
#[command(author, version, about)]
pub struct Cli {
    /// JSON run configuration; unset keys take defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic multi-echo phantom volume
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic, recentered head-motion curve
    Curve {
        #[arg(long)]
        out: PathBuf,
        /// Mean sphere displacement in mm
        #[arg(long)]
        mean_mm: Option<f64>,
    },
    /// Fit a PCA curve model and sample augmented curves
    Augment {
        /// Training curves (CSV); synthetic curves are used when omitted
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
        /// Number of curves to sample
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate motion-corrupted k-space of one volume
    Simulate {
        /// Image-space volume
        #[arg(long)]
        phantom: PathBuf,
        /// Motion curve (CSV); a synthetic curve is used when omitted
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        d_min: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a labelled training dataset from synthetic phantoms
    Dataset {
        /// Curves used for validation/test phantoms and for fitting the
        /// augmentation model; synthetic curves are used when omitted
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        d_min: Option<f64>,
        #[arg(long)]
        n_phantoms: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Motion-weighted TV reconstruction
    Recon {
        /// k-space volume
        #[arg(long)]
        kspace: PathBuf,
        /// Line labels (1 = motion-free), e.g. targets or classifier output
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        /// Reference image for PSNR/SSIM
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted and target line labels
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Append a CSV row to this file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Classification metrics over datasets simulated at several thresholds
    Sweep {
        /// Directory holding `dmin_<t>/index.json` per threshold
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// Directory holding `dmin_<t>/<sample id>.csv` predictions;
        /// target labels are used when omitted
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Thresholds in mm, overriding the config
        #[arg(long, num_args = 1..)]
        d_min: Vec<f64>,
        /// Split to score: train, val, test or all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{:#}", e.error());
            ExitCode::from(e.code())
        }
    }
}
