//! Command-line front end: generate synthetic streams, run the mapping
//! pipeline, re-evaluate checkpoints, and build comparison reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viewfield::config::{RunConfig, RunMode};
use viewfield::geom::CameraIntrinsics;
use viewfield::pipeline::{emit_report, eval_checkpoint, run_pipeline};
use viewfield::tracksim::{generate_stream, write_stream, StreamSpec, TrajectoryKind};

#[derive(Parser)]
#[command(name = "viewfield", version, about = "View-centric neural-field mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tracker stream (scene, trajectory, drift,
    /// loop closure) into a directory.
    Gen(GenArgs),
    /// Train a map online from a stream and write run artifacts.
    Run(RunArgs),
    /// Re-evaluate a saved atlas checkpoint against a stream's held-out
    /// frames.
    Eval(EvalArgs),
    /// Build a side-by-side report from completed run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for stream.jsonl and images/.
    #[arg(long)]
    out: PathBuf,
    /// Trajectory shape: "loop" or "line".
    #[arg(long, default_value = "loop")]
    trajectory: String,
    /// Loop radius or line length in meters.
    #[arg(long, default_value_t = 2.0)]
    extent: f64,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    /// Image width and height in pixels (square).
    #[arg(long, default_value_t = 64)]
    resolution: u32,
    /// Per-frame translational drift in meters.
    #[arg(long, default_value_t = 0.01)]
    drift: f64,
    /// Per-frame rotational drift in radians.
    #[arg(long, default_value_t = 0.002)]
    drift_rot: f64,
    /// Frame index at which the loop closure fires (omit to disable).
    #[arg(long)]
    loop_close_at: Option<usize>,
    /// Every n-th frame is held out for evaluation.
    #[arg(long, default_value_t = 10)]
    holdout_every: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream file to consume.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// "view_centric" or "world_centric_single".
    #[arg(long)]
    mode: Option<RunMode>,
    /// Train without the depth loss term.
    #[arg(long)]
    rgb_only: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_steps_per_keyframe: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    blend_p: Option<f64>,
    /// Disable trajectory rescaling to the unit sphere.
    #[arg(long)]
    no_rescale: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Atlas checkpoint directory (a run's `checkpoint/`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream file providing the held-out frames.
    #[arg(long)]
    stream: PathBuf,
    /// Where to write metrics.csv (printed to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    blend_p: f64,
    #[arg(long)]
    no_rescale: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed run directories to compare.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen(args: &GenArgs) -> viewfield::Result<()> {
    let kind = match args.trajectory.as_str() {
        "loop" => TrajectoryKind::Loop { radius: args.extent },
        "line" => TrajectoryKind::Line { length: args.extent },
        other => {
            return Err(viewfield::Error::InvalidArgument(format!(
                "unknown trajectory `{other}` (expected loop|line)"
            )))
        }
    };
    let n = args.resolution;
    let spec = StreamSpec {
        kind,
        n_frames: args.frames,
        intrinsics: CameraIntrinsics {
            fx: n as f64,
            fy: n as f64,
            cx: n as f64 / 2.0,
            cy: n as f64 / 2.0,
            width: n,
            height: n,
        },
        drift_trans: args.drift,
        drift_rot: args.drift_rot,
        loop_close_at: args.loop_close_at,
        holdout_every: args.holdout_every,
        seed: args.seed,
        ..Default::default()
    };
    let events = generate_stream(&spec)?;
    let path = write_stream(&events, &spec.intrinsics, &args.out)?;
    println!("wrote {} ({} events)", path.display(), events.len());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> viewfield::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &args.stream {
        cfg.stream = s.to_string_lossy().into_owned();
    }
    if let Some(o) = &args.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if args.rgb_only {
        cfg.rgb_only = true;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.train_steps_per_keyframe {
        cfg.train_steps_per_keyframe = n;
    }
    if let Some(n) = args.eval_interval {
        cfg.eval_interval = n;
    }
    if let Some(p) = args.blend_p {
        cfg.blend_p = p;
    }
    if args.no_rescale {
        cfg.rescale = false;
    }
    let arts = run_pipeline(&cfg)?;
    println!(
        "run complete: {} keyframes, {} models, {} held-out frames",
        arts.summary.n_keyframes, arts.summary.n_models, arts.summary.n_test_frames
    );
    for e in &arts.summary.evals {
        println!(
            "eval @{} [{}]: psnr {:.3} dB, ssim {:.4}{}",
            e.train_keyframes,
            e.event,
            e.mean_psnr,
            e.mean_ssim,
            e.mean_l1_depth
                .map(|d| format!(", depth L1 {d:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> viewfield::Result<()> {
    let records = eval_checkpoint(
        &args.checkpoint,
        &args.stream,
        args.blend_p,
        !args.no_rescale,
        args.out.as_deref(),
    )?;
    for r in &records {
        println!(
            "frame {}: psnr {:.3} dB, ssim {:.4}{}",
            r.frame_id,
            r.psnr,
            r.ssim,
            r.l1_depth
                .map(|d| format!(", depth L1 {d:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => emit_report(&args.runs, &args.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
