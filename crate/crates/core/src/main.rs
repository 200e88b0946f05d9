use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use buot::cli::{exit_code, run_ablation, run_seeds, run_single, run_sweep};
use buot::config::BuotConfig;
use buot::sim::SweepAxis;
use buot::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "buot", about = "Bi-level unbalanced optimal transport for partial domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train once and write the report, weights, plans and manifest.
    Run(RunArgs),
    /// Run the ablation battery.
    Ablate(RunArgs),
    /// Sweep k_target, lambda or shift_scale.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        axis: String,
    },
    /// Parse and validate a config without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    Version,
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::ConfigParse(format!("bad seed {s:?}: {e}")))
        })
        .collect()
}

/// Loads the config and applies command-line overrides.
fn load(args: &RunArgs) -> Result<(BuotConfig, Option<Vec<u64>>, PathBuf)> {
    let mut cfg = BuotConfig::from_file(&args.config)?;
    let seeds = args.seeds.as_deref().map(parse_seeds).transpose()?;
    if let Some(s) = &seeds {
        cfg.experiment.seeds = s.clone();
    }
    if let Some(w) = args.workers {
        cfg.experiment.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output.directory.clone();
    Ok((cfg, seeds, out))
}

fn report(dir: &Path) {
    println!("wrote {}", dir.join("manifest.json").display());
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, seeds, out) = load(&args)?;
            match seeds {
                Some(seeds) => {
                    run_seeds(&cfg, &seeds, &out)?;
                    for s in seeds {
                        report(&out.join(format!("seed_{s}")));
                    }
                }
                None => {
                    let m = run_single(&cfg, &out)?;
                    println!("acc_t {}", m.summary["acc_t"]);
                    report(&out);
                }
            }
        }
        Command::Ablate(args) => {
            let (cfg, _, out) = load(&args)?;
            run_ablation(&cfg, &out)?;
            report(&out);
        }
        Command::Sweep { args, axis } => {
            let axis = SweepAxis::parse(&axis)
                .ok_or_else(|| Error::ConfigParse(format!("unknown sweep axis {axis:?}; expected k_target, lambda or shift_scale")))?;
            let (cfg, _, out) = load(&args)?;
            run_sweep(&cfg, axis, &out)?;
            report(&out);
        }
        Command::ValidateConfig { config } => {
            BuotConfig::from_file(&config)?;
            println!("{}: ok", config.display());
        }
        Command::Version => println!("buot {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BUOT_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
