//! `slicefield` command-line entry point.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input, 3 verification or
//! fingerprint failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

/// Input the user can fix: missing files, malformed data, bad arguments.
#[derive(Debug)]
pub struct BadInput(pub String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

/// A check ran and did not pass.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser)]
#[command(name = "slicefield", version, about = "Physics-attention field solver")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on mesh files; writes checkpoint, metrics.csv and run_config.toml into --out.
    Train {
        /// Training meshes (overrides `data.train`).
        #[arg(long = "train", num_args = 1..)]
        train: Vec<PathBuf>,
        /// Validation meshes (overrides `data.val`).
        #[arg(long = "val", num_args = 1..)]
        val: Vec<PathBuf>,
    },
    /// Monolithic forward pass over a mesh.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Build the per-layer state cache from a mesh, streamed in chunks.
    Cache {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Re-stream the mesh per layer instead of keeping hidden features.
        #[arg(long)]
        recompute: bool,
    },
    /// Decode query points against a state cache.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Randomized agreement check of the attention execution paths.
    CheckEquivalence {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 512, 2048])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        slices: usize,
    },
    /// Analytical cost report as CSV.
    Flops {
        /// Mesh points N.
        #[arg(long, default_value_t = 1_000_000)]
        points: usize,
    },
    /// Wall-clock latency of the attention paths as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 4096, 16384])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Drag, lift and field error of predicted pressure against mesh targets.
    Integrate {
        /// Mesh with normals, areas and true pressure as the first target.
        #[arg(long)]
        mesh: PathBuf,
        /// Prediction CSV from `infer` or `decode`.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Uniform subset of a mesh without replacement.
    SampleSubset {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        size: usize,
    },
    /// Per-point slice weights of one head.
    ExportSlices {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Synthetic sphere mesh with the manufactured pressure field.
    GenMesh {
        #[arg(long)]
        points: usize,
        /// Random area-uniform samples instead of a Fibonacci lattice.
        #[arg(long)]
        random: bool,
        /// Points in the reference quadrature written next to the mesh.
        #[arg(long, default_value_t = 1_000_000)]
        reference_points: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if cause.is::<BadInput>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<slicefield::Error>() {
            return core_code(e);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
    }
    1
}

fn core_code(e: &slicefield::Error) -> u8 {
    use slicefield::Error as E;
    match e {
        E::FingerprintMismatch { .. } => 3,
        E::Shape { .. } | E::InvalidArgument(_) | E::Parse { .. } | E::DegenerateTarget | E::Json(_) => 2,
        E::Io(io) => io_code(io),
        E::Chunk { source, .. } | E::Layer { source, .. } => core_code(source),
        _ => 1,
    }
}

fn io_code(e: &std::io::Error) -> u8 {
    use std::io::ErrorKind;
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::PermissionDenied | ErrorKind::InvalidData => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
