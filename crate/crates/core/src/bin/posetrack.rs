use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use posetrack::cli::{self, PresetName, SceneKind, TrackOverrides};
use posetrack::graph::WindowMode;
use posetrack::tracker::MotionModel;
use std::path::PathBuf;

/// Fixed-lag multi-object pose tracking pipeline. Set RUST_LOG=info for
/// per-frame timings.
#[derive(Parser)]
#[command(name = "posetrack", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Static,
    Dynamic,
}

#[derive(Subcommand)]
enum Command {
    /// Generate frames, ground truth, detection errors and models from a scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a ready-made static or dynamic scenario.
    Scene {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full-image occlusion window as START,END seconds.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        occlusion: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tracker over a frame stream.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        motion: Option<MotionModel>,
        #[arg(long)]
        window_mode: Option<WindowMode>,
        /// Window horizon in seconds.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        preset: Option<PresetName>,
        /// Object models; their radii feed prediction suppression.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Emit raw detections as predictions.
    Baseline {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-threshold recall/precision curves.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep prediction gates and motion noise, writing the PR curve.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Full result including the selected presets.
        #[arg(long)]
        presets: Option<PathBuf>,
    },
    /// Fit the visibility-dependent covariance model to detection errors.
    Fitcov {
        #[arg(long)]
        errors: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Args::parse().command {
        Command::Simulate { scenario, out } => cli::cmd_simulate(&scenario, &out),
        Command::Scene {
            kind,
            objects,
            seed,
            occlusion,
            out,
        } => {
            let kind = match kind {
                Kind::Static => SceneKind::Static,
                Kind::Dynamic => SceneKind::Dynamic,
            };
            cli::cmd_scene(kind, objects, seed, occlusion.map(|v| (v[0], v[1])), &out)
        }
        Command::Track {
            config,
            frames,
            out,
            motion,
            window_mode,
            horizon,
            preset,
            models,
        } => {
            let o = TrackOverrides {
                motion,
                window_mode,
                horizon,
                preset,
                models,
            };
            cli::cmd_track(config.as_deref(), frames.as_deref(), out.as_deref(), &o)
        }
        Command::Baseline { frames, out } => cli::cmd_baseline(&frames, &out),
        Command::Eval {
            config,
            predictions,
            truth,
            models,
            out,
            csv,
        } => {
            let r = cli::cmd_eval(
                config.as_deref(),
                predictions.as_deref(),
                truth.as_deref(),
                models.as_deref(),
                out.as_deref(),
                csv.as_deref(),
            )?;
            println!("average_recall={} average_precision={}", r.average_recall, r.average_precision);
            Ok(())
        }
        Command::Sweep {
            config,
            frames,
            truth,
            models,
            grid,
            out,
            presets,
        } => {
            let r = cli::cmd_sweep(config.as_deref(), &frames, &truth, &models, grid.as_deref(), &out, presets.as_deref())?;
            let (ro, po) = (&r.rows[r.recall_oriented], &r.rows[r.precision_oriented]);
            println!(
                "baseline recall={} precision={}\nrecall-oriented: scale={} tau_t={:e} tau_r={:e} recall={} precision={}\nprecision-oriented: scale={} tau_t={:e} tau_r={:e} recall={} precision={}",
                r.baseline_recall, r.baseline_precision,
                ro.motion_noise_scale, ro.tau_pred_t, ro.tau_pred_r, ro.recall, ro.precision,
                po.motion_noise_scale, po.tau_pred_t, po.tau_pred_r, po.recall, po.precision
            );
            Ok(())
        }
        Command::Fitcov { errors, bins, out } => {
            let f = cli::cmd_fitcov(&errors, bins, &out)?;
            println!("{}", f.note);
            Ok(())
        }
    }
}
