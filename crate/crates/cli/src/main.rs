mod config;
mod eval;
mod pipeline;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Planar-primitive splatting: synthesize, fit, merge and evaluate indoor
/// geometry.
#[derive(Debug, Parser)]
#[command(name = "planesplat", version)]
pub struct Cli {
    /// JSON file overriding default tolerances and weights; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic box room with exact depth, normal and instance maps.
    Synth(SynthArgs),
    /// Render a scene's primitives from one of its views.
    Render(RenderArgs),
    /// Fit primitive grids to every view of a scene.
    Fit(FitArgs),
    /// Fuse the two primitive lattices at a normal-gradient threshold.
    Select(SelectArgs),
    /// Merge selected primitives into plane instances.
    Merge(MergeArgs),
    /// Depth accuracy of a predicted depth map (PFM) against ground truth.
    EvalDepth(EvalDepthArgs),
    /// Relative pose accuracy of view 1.. against view 0.
    EvalPose(PosePairArgs),
    /// Chamfer distance and F-score between two scenes' surfaces.
    EvalRecon(EvalReconArgs),
    /// RI, VOI and SC between two instance maps (PGM).
    EvalSeg(EvalSegArgs),
    /// Plane recall of a merged scene against ground truth.
    EvalRecall(EvalRecallArgs),
    /// Multi-view relative rotation and translation accuracy.
    EvalRraRta(RraRtaArgs),
    /// Soft render throughput report.
    Bench(BenchArgs),
    /// Finite-difference check of the render gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output format for reports.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for scene.json and the maps.
    #[arg(long)]
    out: PathBuf,
    /// JSON room spec; individual flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of views [default: 1].
    #[arg(long)]
    views: Option<usize>,
    /// Furniture rectangles added inside the room [default: 0].
    #[arg(long)]
    extra_planes: Option<usize>,
    /// Image width, a multiple of 16 [default: 256].
    #[arg(long)]
    width: Option<usize>,
    /// Image height, a multiple of 16 [default: 192].
    #[arg(long)]
    height: Option<usize>,
    /// Focal length in pixels [default: 150].
    #[arg(long)]
    focal: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RenderMode {
    Soft,
    Hard,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, value_enum, default_value_t = RenderMode::Soft)]
    mode: RenderMode,
    /// Output directory for depth.pfm, normal.pfm and (hard mode) ids.pgm.
    #[arg(long)]
    out: PathBuf,
    /// Selection threshold used when the scene has grids but no selection [default: 0.5].
    #[arg(long)]
    g_th: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    scene: PathBuf,
    /// Output scene file with the fitted grids and selection.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV [default: next to --out, suffixed _loss.csv].
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Warm-up iterations [default: 200].
    #[arg(long)]
    warmup_iters: Option<usize>,
    /// Refinement iterations [default: 1800].
    #[arg(long)]
    refine_iters: Option<usize>,
    /// Initial step size [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Normal-gradient threshold for fusing lattices [default: 0.5].
    #[arg(long)]
    g_th: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    scene: PathBuf,
    /// Normal-gradient threshold [default: 0.5].
    #[arg(long)]
    g_th: Option<f64>,
    /// Write the scene with the new selection here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    scene: PathBuf,
    /// Output scene file; per-view plane id maps are written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Point-to-plane distance threshold in metres [default: 0.1].
    #[arg(long)]
    dist: Option<f64>,
    /// Normal angle threshold in degrees [default: 25].
    #[arg(long)]
    angle: Option<f64>,
    /// Selection threshold used when the scene has no selection [default: 0.5].
    #[arg(long)]
    g_th: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalDepthArgs {
    pred: PathBuf,
    gt: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

/// Poses come from scene files or JSON arrays of `{rotation, translation}`.
#[derive(Debug, Args)]
pub struct PosePairArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Translation thresholds in metres [default: 1 0.5 0.2 0.1].
    #[arg(long, num_args = 1..)]
    trans_th: Option<Vec<f64>>,
    /// Rotation thresholds in degrees [default: 30 15 10 5].
    #[arg(long, num_args = 1..)]
    rot_th: Option<Vec<f64>>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalReconArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// F-score distance threshold in metres [default: 0.1].
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Count void (id 0) pixels as a label instead of ignoring them.
    #[arg(long)]
    keep_void: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalRecallArgs {
    /// Merged scene with selected primitives and plane instances.
    pred: PathBuf,
    /// Ground-truth scene with instance maps and plane instances.
    gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Depth thresholds in metres [default: 0.1 0.6].
    #[arg(long, num_args = 1..)]
    depth_th: Option<Vec<f64>>,
    /// Normal thresholds in degrees [default: 5 30].
    #[arg(long, num_args = 1..)]
    normal_th: Option<Vec<f64>>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RraRtaArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Angle thresholds in degrees [default: 5 10 15].
    #[arg(long, num_args = 1..)]
    th: Option<Vec<f64>>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 384)]
    height: usize,
    /// Selection threshold; 0 selects every fine cell.
    #[arg(long, default_value_t = 0.0)]
    g_th: f64,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

/// A command-line mistake, as opposed to bad data; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => pipeline::synth(&a),
        Command::Render(a) => pipeline::render(&a, &cfg),
        Command::Fit(a) => pipeline::fit(&a, &cfg),
        Command::Select(a) => pipeline::select(&a, &cfg),
        Command::Merge(a) => pipeline::merge(&a, &cfg),
        Command::EvalDepth(a) => eval::depth(&a),
        Command::EvalPose(a) => eval::pose(&a),
        Command::EvalRecon(a) => eval::recon(&a, &cfg),
        Command::EvalSeg(a) => eval::seg(&a),
        Command::EvalRecall(a) => eval::recall(&a, &cfg),
        Command::EvalRraRta(a) => eval::rra_rta(&a),
        Command::Bench(a) => tools::bench(&a, &cfg),
        Command::Gradcheck(a) => tools::gradcheck(&a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
