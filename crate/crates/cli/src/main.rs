//! `selio` command-line tool: simulate datasets, run odometry, evaluate
//! trajectories and compare estimation modes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use selio::app::{cmd_ablate, cmd_evaluate, cmd_run, cmd_simulate, AppError};
use selio::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "selio",
    version,
    about = "Semi-elastic LiDAR-inertial odometry"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Random seed for all generated noise.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory to write the dataset into.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run odometry over a dataset.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Compare an estimated trajectory file with a ground-truth file.
    Evaluate {
        /// Estimated trajectory file.
        #[arg(long)]
        estimate: PathBuf,
        /// Ground-truth trajectory file.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Skip the rigid alignment before computing errors.
        #[arg(long)]
        no_align: bool,
    },
    /// Run every estimation mode on one dataset and tabulate the metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Print the effective configuration as a config file.
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EstimationArgs {
    /// traditional, elastic or semi-elastic.
    #[arg(long)]
    mode: Option<String>,
    /// uniform or imu.
    #[arg(long)]
    undistort: Option<String>,
    /// Dataset directory to read.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory to write results into.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    App(AppError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<AppError> for CliError {
    fn from(e: AppError) -> Self {
        CliError::App(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::App(e) => e.exit_code() as u8,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::App(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::App(e) => e.to_string(),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn apply_estimation(cfg: &mut RunConfig, args: &EstimationArgs) -> Result<(), CliError> {
    if let Some(m) = &args.mode {
        cfg.set("mode", m)?;
    }
    if let Some(u) = &args.undistort {
        cfg.set("undistort", u)?;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &args.output {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            config,
            seed,
            output,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            cfg.validate()?;
            let s = cmd_simulate(&cfg)?;
            println!(
                "wrote {} sweeps and {} IMU samples to {}",
                s.sweeps,
                s.imu_samples,
                s.directory.display()
            );
        }
        Command::Run { config, estimation } => {
            let mut cfg = load_config(&config)?;
            apply_estimation(&mut cfg, &estimation)?;
            info!(
                "running {} odometry on {}",
                cfg.pipeline.estimator.mode,
                cfg.dataset.display()
            );
            let s = cmd_run(&cfg)?;
            println!(
                "processed {} sweeps ({} fallbacks), results in {}",
                s.sweeps,
                s.fallbacks,
                cfg.output.display()
            );
            if let Some(m) = s.metrics {
                println!("{m}");
            }
        }
        Command::Evaluate {
            estimate,
            ground_truth,
            no_align,
        } => {
            println!("{}", cmd_evaluate(&estimate, &ground_truth, !no_align)?);
        }
        Command::Ablate { config, estimation } => {
            let mut cfg = load_config(&config)?;
            apply_estimation(&mut cfg, &estimation)?;
            for (mode, m) in cmd_ablate(&cfg)? {
                let smooth = m
                    .velocity_smoothness
                    .map_or("n/a".into(), |v| format!("{v:.3e}"));
                println!(
                    "{mode:<13} ATE {:.4} m  smoothness {smooth}  zigzag {:.4}",
                    m.ate_rmse, m.zigzag_score
                );
            }
        }
        Command::PrintConfig { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
