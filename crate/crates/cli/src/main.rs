use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use stpn_core::config::{parse_size, RunConfig};
use stpn_core::harness::{
    ablation_sweep, evaluate_checkpoint, gradcheck_suite, load_dataset, run_training, sweep_csv, SweepParam,
    TrainOptions, METRICS_HEADER,
};
use stpn_core::synthvid::{
    gen_dataset, motion_iou_category, write_dataset, DegradationSpec, SpeedCategory, MOTION_IOU_WINDOW,
};
use stpn_core::Error;

/// Spatio-temporal prompting on synthetic degraded video.
///
/// Logs go to stderr (set RUST_LOG to change the level); stdout carries
/// CSV. STPN_THREADS caps the worker count (default 1).
#[derive(Parser, Debug)]
#[command(name = "stpn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sprite-video dataset.
    GenData(GenData),
    /// Train a model and write a run directory.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Train and evaluate once per value of S, K or NP.
    Sweep(Sweep),
    /// Run the finite-difference gradient checks.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenData {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Number of clips.
    #[arg(long, default_value_t = 200)]
    clips: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "32x32", value_parser = size_arg)]
    size: (usize, usize),
    /// Number of sprite classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Motion blur length in pixels (1 disables blur).
    #[arg(long, default_value_t = 5)]
    blur_len: usize,
    /// Motion blur direction in radians.
    #[arg(long, default_value_t = 0.0)]
    blur_angle: f64,
    /// Occluder area as a fraction of the sprite box (0 disables occlusion).
    #[arg(long, default_value_t = 0.6)]
    occl_frac: f64,
    /// Probability that a frame is degraded.
    #[arg(long, default_value_t = 0.5)]
    degrade_prob: f64,
    /// Relative sprite scale jitter on degraded frames (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    deform_amp: f64,
}

#[derive(Args, Debug)]
struct Train {
    /// Config file (`key = value` lines or a flat JSON object).
    #[arg(long)]
    config: PathBuf,
    /// `key=value` applied after the file; repeatable, later wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file; every frame of every clip is scored.
    #[arg(long)]
    data: PathBuf,
    /// Config the checkpoint was trained with.
    #[arg(long)]
    config: PathBuf,
    /// `key=value` applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Base config file.
    #[arg(long)]
    config: PathBuf,
    /// Parameter to vary.
    #[arg(long, value_parser = ["S", "K", "NP"])]
    param: String,
    /// Comma-separated values, e.g. 1,3,7.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// `key=value` applied to the base config; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory receiving sweep.csv and config.snapshot.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Seed for weights and inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn size_arg(s: &str) -> Result<(usize, usize), String> {
    match parse_size(s) {
        Ok((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        Ok(_) => Err("sizes must be positive".into()),
        Err(e) => Err(e.to_string()),
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Data(format!("cannot read config {}: {io}", path.display())),
        other => other.into(),
    })?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let spec = DegradationSpec {
        blur_len: a.blur_len,
        blur_angle: a.blur_angle,
        occluder_fraction: a.occl_frac,
        probability: a.degrade_prob,
        deform_amplitude: a.deform_amp,
    };
    let clips = gen_dataset(a.seed, a.clips, a.frames, a.size.0, a.size.1, a.classes, &spec)?;
    write_dataset(&clips, &a.out)?;
    let mut speed = [0usize; 3];
    let mut degraded = 0;
    let mut frames = 0;
    for c in &clips {
        if c.len() >= 2 {
            let (cat, _) = motion_iou_category(&c.track, MOTION_IOU_WINDOW)?;
            speed[SpeedCategory::ALL.iter().position(|&s| s == cat).unwrap_or(0)] += 1;
        } else {
            speed[0] += 1;
        }
        degraded += c.degraded.iter().filter(|&&d| d).count();
        frames += c.len();
    }
    info!("wrote {} clips to {}", clips.len(), a.out.display());
    println!("clips,slow,medium,fast,frames,degraded_frames");
    println!(
        "{},{},{},{},{},{}",
        clips.len(),
        speed[0],
        speed[1],
        speed[2],
        frames,
        degraded
    );
    Ok(())
}

fn train(a: Train, opts: &TrainOptions) -> Result<(), Failure> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let outcome = run_training(&cfg, &a.out, opts)?;
    info!("run written to {}", a.out.display());
    match outcome.history.last() {
        Some(r) => {
            println!("{METRICS_HEADER}");
            println!("{}", r.csv_row());
        }
        None => info!("no steps run; checkpoint holds the initialization"),
    }
    Ok(())
}

fn eval(a: Eval, opts: &TrainOptions) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    cfg.data = Some(a.data.clone());
    let clips = load_dataset(&cfg)?;
    let rec = evaluate_checkpoint(&a.ckpt, &clips, &cfg, opts)?;
    let n = rec.counts;
    info!(
        "{} frames: {} degraded, {} clean, {} slow, {} medium, {} fast",
        n.total, n.degraded, n.clean, n.slow, n.medium, n.fast
    );
    println!("{METRICS_HEADER}");
    println!("{}", rec.csv_row());
    Ok(())
}

fn sweep(a: Sweep, opts: &TrainOptions) -> Result<(), Failure> {
    let param = SweepParam::parse(&a.param)?;
    let cfg = load_config(&a.config, &a.overrides)?;
    let clips = load_dataset(&cfg)?;
    let rows = ablation_sweep(&cfg, param, &a.values, &clips, opts)?;
    let table = sweep_csv(&rows);
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Data(e.to_string()))?;
    std::fs::write(a.out.join("config.snapshot"), cfg.snapshot()).map_err(|e| Failure::Data(e.to_string()))?;
    std::fs::write(a.out.join("sweep.csv"), &table).map_err(|e| Failure::Data(e.to_string()))?;
    print!("{table}");
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<(), Failure> {
    let suite = gradcheck_suite(a.seed)?;
    print!("{}", suite.to_csv());
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric("gradient check failed".into()))
    }
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
    let result = TrainOptions::from_env()
        .map_err(Failure::from)
        .and_then(|opts| match cli.command {
            Command::GenData(a) => gen_data(a),
            Command::Train(a) => train(a, &opts),
            Command::Eval(a) => eval(a, &opts),
            Command::Sweep(a) => sweep(a, &opts),
            Command::Gradcheck(a) => gradcheck(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            error!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            error!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            error!("{m}");
            ExitCode::from(3)
        }
    }
}
