use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use prn::dataset::{generate, load_dataset, save_dataset, SequenceDataset, SyntheticSpec};
use prn::harness::{evaluate, reconstruct, run_gradcheck, train, GradcheckOptions, TrainConfig};
use prn::network::load_checkpoint;
use prn::{PrnError, Result};

#[derive(Parser)]
#[command(name = "prn", version, about = env!("CARGO_PKG_DESCRIPTION"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence dataset
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; logs one JSON object per iteration to stdout
    Train {
        #[arg(long)]
        config: PathBuf,
        /// May be given several times
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against 3D ground truth
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write predicted 3D shapes for every frame
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the analytic cost gradient against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        nf: usize,
        #[arg(long, default_value_t = 8)]
        np: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        batches: usize,
    },
}

enum Outcome {
    Success,
    VerificationFailed,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| PrnError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|source| PrnError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Serialize)]
struct ShapeRecord {
    camera_id: usize,
    time: f64,
    x3d: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ShapesFile<'a> {
    format: &'a str,
    n_p: usize,
    frames: Vec<ShapeRecord>,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Generate { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            save_dataset(&generate(&spec)?, &out)?;
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_json(&config)?;
            let datasets = data.iter().map(load_dataset).collect::<Result<Vec<SequenceDataset>>>()?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            train(&cfg, &datasets, Some(&out), &mut |entry| {
                if let Ok(line) = serde_json::to_string(entry) {
                    let _ = writeln!(lock, "{line}");
                }
            })?;
        }
        Command::Eval { ckpt, data, report } => {
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let rep = evaluate(&params, &cfg, &ds)?;
            println!("{}", serde_json::json!({ "mpjpe": rep.mpjpe, "ne": rep.ne }));
            write_json(&report, &rep)?;
        }
        Command::Reconstruct { ckpt, data, out } => {
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let shapes = reconstruct(&params, &cfg, &ds)?;
            let frames = ds
                .frames()
                .iter()
                .zip(&shapes)
                .map(|(f, s)| ShapeRecord {
                    camera_id: f.camera_id,
                    time: f.time,
                    x3d: s.points().row_iter().map(|r| r.iter().copied().collect()).collect(),
                })
                .collect();
            write_json(
                &out,
                &ShapesFile {
                    format: "prn-shapes-v1",
                    n_p: ds.n_p,
                    frames,
                },
            )?;
        }
        Command::Gradcheck {
            nf,
            np,
            seed,
            tol,
            batches,
        } => {
            let report = run_gradcheck(&GradcheckOptions {
                n_f: nf,
                n_p: np,
                seed,
                tol,
                batches,
                ..Default::default()
            })?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed {
                return Ok(Outcome::VerificationFailed);
            }
        }
    }
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
