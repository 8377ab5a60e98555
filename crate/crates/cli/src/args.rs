use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Skeleton/shape-decoupled body-mesh engine.
///
/// Human-readable progress goes to stderr; every command prints a JSON
/// report to stdout (or to `--report`). Exit codes: 0 success, 1 runtime
/// failure, 2 usage or precondition error.
#[derive(Debug, Parser)]
#[command(name = "armature", version)]
pub struct Cli {
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural desk rig and save it as a container.
    MakeRig(MakeRigArgs),
    /// Check a rig or model file against the rig invariants.
    Validate(ValidateArgs),
    /// Write a synthetic registration dataset from a seeded oracle.
    Synth(SynthArgs),
    /// Write a synthetic observation from seeded random parameters.
    SynthObs(SynthObsArgs),
    /// Train bases, skinning and pose correctives on a dataset.
    Train(TrainArgs),
    /// Fit model parameters to an observation.
    Fit(FitArgs),
    /// Pose a model and write the mesh as OBJ.
    Pose(PoseArgs),
    /// Time forward kinematics plus skinning on one thread.
    Bench(BenchArgs),
    /// Draw random subjects and poses from the model's latent spaces.
    Sample(SampleArgs),
    /// Export the template mesh, skeleton and skin weights.
    Export(ExportArgs),
    /// Serve the model over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MakeRigArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Joint count (2..=22).
    #[arg(long, default_value_t = armature::rig::DEFAULT_JOINTS)]
    pub joints: usize,
    /// Vertices around each limb ring.
    #[arg(long, default_value_t = armature::rig::DEFAULT_RADIAL_SEGMENTS)]
    pub segments: usize,
    /// Rounds of 1-to-4 midpoint subdivision.
    #[arg(long, default_value_t = 0)]
    pub subdivide: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Rig or model container.
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Rig or model container providing the rig.
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 64)]
    pub poses: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with oracle settings.
    #[arg(long)]
    pub oracle_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthObsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the sampled parameters.
    #[arg(long, default_value_t = 0.4)]
    pub scale: f64,
    /// Include dense vertex targets.
    #[arg(long)]
    pub vertices: bool,
    /// Include 3D surface landmarks.
    #[arg(long)]
    pub landmarks: bool,
    /// Leave out 3D joint keypoints.
    #[arg(long)]
    pub no_joints: bool,
    /// Add 2D keypoints seen by a camera three meters in front.
    #[arg(long)]
    pub camera: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the generating parameters.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Rig or model container providing the rig.
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset for the final evaluation (default: the training set).
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines log, one record per epoch.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observation JSON.
    #[arg(long)]
    pub obs: PathBuf,
    /// TOML fit configuration (stages, weights, robust scales).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial parameters (JSON, fit parameter blocks).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Full fit result as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted mesh as OBJ.
    #[arg(long)]
    pub obj: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Model parameters as JSON.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Skeletal attribute override `name=value`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    pub set: Vec<String>,
    /// Skip pose correctives.
    #[arg(long)]
    pub no_correctives: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Rig or model container (default: the seed-0 desk rig).
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Also time the rig after one 1-to-4 subdivision and report the
    /// per-vertex cost ratio.
    #[arg(long)]
    pub scaling: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the latent draws.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model container (default: the seed-0 desk rig, untrained).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Allowed CORS origin (default: any).
    #[arg(long)]
    pub allow_origin: Option<String>,
    /// TOML fit configuration used by `/fit`.
    #[arg(long)]
    pub fit_config: Option<PathBuf>,
}
