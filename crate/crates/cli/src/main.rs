use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclemap_cli::{
    cmd_ablate, cmd_evaluate, cmd_export, cmd_parameterize, parse_override, resolve_config,
    CliError, RunManifest, RunOptions, LOG_ENV,
};

/// Learned free-boundary UV parameterization of point clouds.
#[derive(Parser)]
#[command(name = "cyclemap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file of `key = value` settings.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sample this many training points from the input.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// conformal | isometric
    #[arg(long)]
    distortion: Option<String>,
    /// both | 3d-only | 2d-only
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one shape and write a run directory.
    Parameterize {
        /// OBJ, ASCII PLY or XYZ file.
        input: Option<PathBuf>,
        #[arg(short, long, default_value = "run")]
        out: PathBuf,
        /// Rerun the input, point count and config recorded in a manifest.
        #[arg(long, conflicts_with = "input")]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Compute metrics for a checkpoint on every vertex of an input.
    Evaluate {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(short, long, default_value = "metrics.json")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train all branch and distortion variants and tabulate them.
    Ablate {
        input: PathBuf,
        #[arg(short, long, default_value = "ablation")]
        out: PathBuf,
        /// Variants trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write uv.obj and uv.svg for every vertex of an input.
    Export {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(short, long, default_value = "export")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn overrides(t: &TrainArgs) -> Vec<(String, String)> {
    let mut o = t.config.overrides.clone();
    let flags = [
        ("steps", t.steps.map(|v| v.to_string())),
        ("seed", t.seed.map(|v| v.to_string())),
        ("distortion", t.distortion.clone()),
        ("branches", t.branches.clone()),
    ];
    o.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
    o
}

fn read_manifest(path: &PathBuf) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Parameterize {
            input,
            out,
            manifest,
            train,
        } => {
            let mut opts = match (manifest, input) {
                (Some(m), _) => RunOptions::from_manifest(&read_manifest(&m)?, out),
                (None, Some(input)) => RunOptions {
                    input,
                    config: resolve_config(train.config.config.as_deref(), &[])?,
                    points: None,
                    out_dir: out,
                },
                (None, None) => return Err(CliError::Input("no input file given".into())),
            };
            for (k, v) in overrides(&train) {
                opts.config.set(&k, &v)?;
            }
            opts.config.validate()?;
            opts.points = train.points.or(opts.points);
            let s = cmd_parameterize(&opts)?;
            println!("{}", opts.out_dir.display());
            if let Some(r) = s.final_report {
                log::info!("final total loss {:.6e}", r.total);
            }
        }
        Command::Evaluate {
            checkpoint,
            input,
            out,
            config,
        } => {
            let cfg = resolve_config(config.config.as_deref(), &config.overrides)?;
            let r = cmd_evaluate(&checkpoint, &input, &cfg, &out)?;
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        }
        Command::Ablate {
            input,
            out,
            jobs,
            train,
        } => {
            let opts = RunOptions {
                input,
                config: resolve_config(train.config.config.as_deref(), &overrides(&train))?,
                points: train.points,
                out_dir: out,
            };
            cmd_ablate(&opts, jobs)?;
            println!("{}", opts.out_dir.join(cyclemap_cli::ABLATION_FILE).display());
        }
        Command::Export {
            checkpoint,
            input,
            out,
            config,
        } => {
            let cfg = resolve_config(config.config.as_deref(), &config.overrides)?;
            cmd_export(&checkpoint, &input, &cfg, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
