//! `mlmt`: dataset building, weak labels, training, prediction, evaluation
//! and the annotation service behind one binary.
//!
//! Exit status: 0 on success, 2 on usage or configuration errors, 1 when a
//! run fails.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default data root for relative manifest paths.
pub const DATA_ROOT_ENV: &str = "MLMT_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "mlmt", version, about = "Multi-layer multi-task detection and segmentation")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML, dotted keys allowed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; receives `config.resolved.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` settings applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Detect,
    Segment,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic blob dataset.
    BuildSynthetic {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        bands: usize,
        /// Slice stride between consecutive bands.
        #[arg(long, default_value_t = 1)]
        gap: usize,
        /// Slice index of the first band.
        #[arg(long, default_value_t = 0)]
        z0: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f32,
        /// Give blobs a labelled off-centre core.
        #[arg(long)]
        cores: bool,
    },
    /// Replace masks with weak labels (threshold + morphology, or eroded GT).
    GenWeakLabels {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Erode the ground-truth masks by this radius instead of thresholding.
        #[arg(long)]
        erode: Option<usize>,
    },
    /// Train the detector on `data.train`.
    #[command(mut_arg("config", |a| a.required(true)))]
    TrainDetect {
        #[command(flatten)]
        common: Common,
    },
    /// Train the segmenter on `data.train`.
    #[command(mut_arg("config", |a| a.required(true)))]
    TrainSegment {
        #[command(flatten)]
        common: Common,
    },
    /// Recursive training of the segmenter from weak masks.
    #[command(mut_arg("config", |a| a.required(true)))]
    TrainRecursive {
        #[command(flatten)]
        common: Common,
    },
    /// Run trained models over a dataset and write the predictions as one.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Detector directory (contains `config.json`).
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Segmenter directory; without a detector it segments the
        /// ground-truth boxes.
        #[arg(long)]
        segmenter: Option<PathBuf>,
    },
    /// Score predictions against ground truth; writes report.json and table.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
    },
    /// Per-band IoU of one class between two sets of masks.
    Agreement {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1)]
        class_id: u8,
    },
    /// Start the annotation service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Bands sharing one box list, as `A:B`; repeatable.
        #[arg(long = "link", value_name = "A:B")]
        links: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mlmt_core::error::Error> for Failure {
    fn from(e: mlmt_core::error::Error) -> Self {
        match e {
            mlmt_core::error::Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::BuildSynthetic {
            common,
            samples,
            bands,
            gap,
            z0,
            size,
            noise,
            cores,
        } => commands::build_synthetic(&common, samples, bands, gap, z0, size, noise, cores),
        Command::GenWeakLabels { common, data, erode } => commands::gen_weak_labels(&common, &data, erode),
        Command::TrainDetect { common } => commands::train_detect(&common),
        Command::TrainSegment { common } => commands::train_segment(&common),
        Command::TrainRecursive { common } => commands::train_recursive(&common),
        Command::Predict {
            common,
            data,
            detector,
            segmenter,
        } => commands::predict(&common, &data, detector.as_deref(), segmenter.as_deref()),
        Command::Evaluate { common, pred, gt, task } => commands::evaluate(&common, &pred, &gt, task),
        Command::Agreement { common, a, b, class_id } => commands::agreement(&common, &a, &b, class_id),
        Command::Serve {
            common,
            data,
            links,
            addr,
        } => commands::serve(&common, &data, &links, addr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
