//! The `equiv3d` command line: argument parsing, exit codes and dispatch.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.

mod commands;
pub mod report;
pub mod selfcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use report::{config_hash, head_fingerprint, EvalReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "equiv3d", version, about = "Measure and improve multiview 3D equivariance of dense features")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random decision.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render analytic scenes with depth, cameras and oracle features.
    GenSynth(GenSynthArgs),
    /// APE and PCDP over all ordered view pairs of each object.
    EvalEquivariance(EvalEquivArgs),
    /// Finetune the conv head on ground-truth correspondences.
    TrainHead(TrainArgs),
    /// One-shot pose estimation accuracy.
    EvalPose(EvalPoseArgs),
    /// Point tracking AJ, position accuracy and occlusion accuracy.
    EvalTrack(EvalTrackArgs),
    /// Semantic keypoint transfer PCK.
    EvalSemcorr(EvalSemcorrArgs),
    /// Run the built-in oracle checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated scenes, one object each: sphere, box, box-sphere.
    #[arg(long, default_value = "sphere")]
    pub scene: String,
    #[arg(long, default_value_t = 42)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 45.0)]
    pub hfov: f64,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    /// Fourier frequencies in the oracle features (2 channels each, plus one
    /// background channel).
    #[arg(long, default_value_t = 8)]
    pub freqs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub freq_scale: f64,
    /// Standard deviation of Gaussian noise added to every feature value.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Skip oracle features; write depth and cameras only.
    #[arg(long)]
    pub no_features: bool,
    /// Also write an orbit tracking fixture with this many frames.
    #[arg(long, default_value_t = 0)]
    pub track_frames: usize,
    #[arg(long, default_value_t = 3.0)]
    pub track_step: f64,
    #[arg(long, default_value_t = 32)]
    pub track_queries: usize,
    /// Also write this many keypoint pairs from the first object.
    #[arg(long, default_value_t = 0)]
    pub semcorr_pairs: usize,
    #[arg(long, default_value_t = 10)]
    pub semcorr_kpts: usize,
}

#[derive(Debug, Clone, Args)]
pub struct HeadArg {
    /// HED1 checkpoint applied to every feature map, or `zero-init-residual`.
    #[arg(long)]
    pub head: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalEquivArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 1)]
    pub gt_stride: usize,
    #[arg(long, default_value_t = 1)]
    pub candidate_stride: usize,
    /// Search every target pixel for the headline numbers instead of only
    /// valid-depth foreground. Both variants are always listed in `details`.
    #[arg(long)]
    pub full_frame: bool,
    /// Score every candidate instead of the exact coarse-to-fine search.
    #[arg(long)]
    pub exhaustive: bool,
    /// Use only the first N views of each object.
    #[arg(long)]
    pub max_views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output HED1 checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV (default: checkpoint path with `.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Start from this checkpoint instead of the zero-init residual head.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 256)]
    pub pixels_per_pair: usize,
    /// smooth-ap or contrastive.
    #[arg(long, default_value = "smooth-ap")]
    pub loss: String,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.07)]
    pub temp: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub gt_stride: usize,
    /// 0 uses the single nearest pixel as positive.
    #[arg(long, default_value_t = 0.0)]
    pub positive_radius: f64,
    #[arg(long, default_value_t = 2.0)]
    pub negative_exclusion: f64,
    /// Keep the constant j = i term in the positive rank sums.
    #[arg(long)]
    pub include_self_term: bool,
    #[arg(long)]
    pub max_views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalPoseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub head: HeadArg,
    /// Comma-separated reference view ids (default: even view indices).
    #[arg(long)]
    pub ref_views: Option<String>,
    /// Comma-separated query view ids (default: odd view indices).
    #[arg(long)]
    pub query_views: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub ransac_iters: usize,
    /// Inlier threshold in pixels at the manifest's working resolution.
    #[arg(long, default_value_t = 8.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long)]
    pub score_floor: Option<f64>,
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Args)]
pub struct EvalTrackArgs {
    /// Directory of FTB1 frames, read in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Ground truth: per point, per frame `[x, y, visible]`.
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 3)]
    pub refine_radius: usize,
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.55)]
    pub occ_threshold: f64,
    #[arg(long)]
    pub search_window: Option<f64>,
    /// Pick the occlusion threshold that maximizes OA on the ground truth.
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Debug, Args)]
pub struct EvalSemcorrArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding `<id>.ftb` for every image id in the pairs.
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 1)]
    pub candidate_stride: usize,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Deliberately break one check (for testing the harness).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenSynth(a) => commands::gen_synth(a, g),
        Command::EvalEquivariance(a) => commands::eval_equivariance(a, g),
        Command::TrainHead(a) => commands::train_head(a, g),
        Command::EvalPose(a) => commands::eval_pose(a, g),
        Command::EvalTrack(a) => commands::eval_track(a, g),
        Command::EvalSemcorr(a) => commands::eval_semcorr(a, g),
        Command::Selfcheck(a) => commands::selfcheck(a, g),
    }
}
