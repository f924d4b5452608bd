use std::path::PathBuf;
use std::process::ExitCode;

use cig_cli::sweep::{cmd_sweep, parse_axis};
use cig_cli::{
    cmd_fuse, cmd_fuse_dataset, cmd_report, cmd_synth, cmd_train, load_config, runs_root, CliError, CliResult,
};
use cig_core::{Ablation, FusionMode};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cig", version, about = "Boundary-sample generation for imbalanced ordinal image classification")]
struct Cli {
    /// Config JSON (train, sweep) or synthetic spec JSON (synth)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config or spec
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; for train/sweep the runs root (default $CIG_RUNS_DIR, then ./runs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ordinal dataset in folder layout
    Synth {
        /// Spec JSON; may also be given with --config
        spec: Option<PathBuf>,
        /// Sample count when the spec does not carry one
        #[arg(long, default_value_t = 1000)]
        n_total: usize,
    },
    /// Train one model on the configured validation fold
    Train {
        /// Component preset: base, ig, ig_sf or full
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Run directory name under the runs root
        #[arg(long)]
        name: Option<String>,
        /// Folder dataset root, overriding the config
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rebuild the per-category report of a finished run
    Report {
        run_dir: PathBuf,
        /// Minority gap threshold in accuracy points
        #[arg(long)]
        gap: Option<f64>,
    },
    /// Generate fusion images from a checkpoint
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Main image (single-pair mode)
        #[arg(long, requires = "reference")]
        main: Option<PathBuf>,
        /// Reference image (single-pair mode)
        #[arg(long = "ref", requires = "main")]
        reference: Option<PathBuf>,
        /// Folder dataset to draw pairs from (batch mode)
        #[arg(long, conflicts_with = "main")]
        dataset: Option<PathBuf>,
        /// Number of pairs in batch mode
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        /// Fusion mode (sf or add); defaults to the checkpoint's
        #[arg(long)]
        mode: Option<FusionMode>,
    },
    /// Fold-averaged ACC/MAE over a grid of tau, lambda, alpha, beta
    Sweep {
        /// Axis as name=v1,v2 or name=start:stop:step; repeatable
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        /// Use only the first N folds of the split
        #[arg(long)]
        max_folds: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
}

fn require_out(cli: &Cli, what: &str) -> CliResult<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{what} needs --out")))
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth { spec, n_total } => {
            let spec = spec
                .clone()
                .or_else(|| cli.config.clone())
                .ok_or_else(|| CliError::Usage("synth needs a spec file".into()))?;
            let out = require_out(&cli, "synth")?;
            let hash = cmd_synth(&spec, &out, *n_total, cli.seed)?;
            println!("{hash}");
        }
        Command::Train { ablation, name, data } => {
            let mut cfg = load_config(cli.config.as_deref(), cli.seed, *ablation)?;
            if let Some(root) = data {
                cfg.data.root = Some(root.clone());
                cfg.data.synthetic = None;
            }
            let name = name.clone().unwrap_or_else(|| {
                let tag = ablation.map(|a| format!("{a:?}").to_lowercase()).unwrap_or("run".into());
                format!("{tag}-seed{}", cfg.train.seed)
            });
            let dir = cmd_train(&cfg, &name, &runs_root(cli.out.as_deref()))?;
            println!("{}", dir.display());
        }
        Command::Report { run_dir, gap } => {
            let report = cmd_report(run_dir, *gap, cli.out.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?
            );
        }
        Command::Fuse {
            checkpoint,
            main,
            reference,
            dataset,
            pairs,
            mode,
        } => {
            let out = require_out(&cli, "fuse")?;
            let json = match (main, reference, dataset) {
                (Some(m), Some(r), None) => serde_json::to_string_pretty(&cmd_fuse(checkpoint, m, r, &out, *mode)?),
                (None, None, Some(d)) => {
                    serde_json::to_string_pretty(&cmd_fuse_dataset(checkpoint, d, &out, *pairs, cli.seed, *mode)?)
                }
                _ => return Err(CliError::Usage("fuse needs either --main and --ref, or --dataset".into())),
            };
            println!("{}", json.map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Sweep {
            params,
            max_folds,
            name,
        } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed, None)?;
            let axes = params.iter().map(|p| parse_axis(p)).collect::<CliResult<Vec<_>>>()?;
            let name = name.clone().unwrap_or_else(|| {
                let tag: Vec<&str> = axes.iter().map(|a| a.param.name()).collect();
                format!("sweep-{}", tag.join("-"))
            });
            let dir = cmd_sweep(&cfg, &axes, *max_folds, &name, &runs_root(cli.out.as_deref()))?;
            println!("{}", dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
