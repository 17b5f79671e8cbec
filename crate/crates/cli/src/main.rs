use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use wiss_core::experiment::{
    self, default_output_dir, ExperimentConfig, ExperimentError, MetricOptions,
};
use wiss_core::phantom::PhantomSpec;

#[derive(Debug, Parser)]
#[command(name = "wiss", version, about = "Weakly supervised vertebral body segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthetic phantom data.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Runs the full pipeline and writes a run directory.
    Run(RunArgs),
    /// Scores a run directory against its ground truth.
    Eval {
        /// Run directory written by `wiss run`.
        #[arg(long)]
        run: PathBuf,
        /// Config whose `metrics` section selects the scoring options.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<run>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the ablation grid and writes the comparison table.
    Ablate(RunArgs),
    /// Re-executes a manifest and checks that every output is bit-identical.
    Replay {
        #[arg(long = "replay", value_name = "MANIFEST")]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum PhantomCmd {
    /// Writes phantoms from a spec file holding one spec or a list of specs.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    One(PhantomSpec),
    Many(Vec<PhantomSpec>),
}

fn load_specs(path: &Path) -> Result<Vec<PhantomSpec>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let parsed: SpecFile = serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Config(vec![format!("{}: {e}", path.display())]))?;
    Ok(match parsed {
        SpecFile::One(s) => vec![s],
        SpecFile::Many(v) => v,
    })
}

fn prepare(args: &RunArgs, name: &str) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| default_output_dir(name));
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Cmd::Phantom {
            action: PhantomCmd::Gen { spec, out },
        } => {
            let specs = load_specs(&spec)?;
            let out = out.unwrap_or_else(|| default_output_dir("phantoms"));
            let m = experiment::phantom_gen(&specs, &out)?;
            println!("wrote {} phantom(s) to {}", m.train_volumes.len(), out.display());
        }
        Cmd::Run(args) => {
            let (cfg, out) = prepare(&args, "run")?;
            let m = experiment::run(&cfg, &out)?;
            if let Some(log) = &m.run {
                for w in &log.warnings {
                    eprintln!("warning: {w}");
                }
            }
            println!("wrote run to {} ({} checkpoints)", out.display(), m.checkpoints.len());
        }
        Cmd::Eval { run, config, out } => {
            let opts = match config {
                Some(p) => ExperimentConfig::load(&p)?.metrics,
                None => MetricOptions::default(),
            };
            let out = out.unwrap_or_else(|| run.join("reports"));
            let m = experiment::eval(&run, &out, opts)?;
            if let Some(s) = &m.summary {
                println!("{}", serde_json::to_string_pretty(s).expect("json value"));
            }
        }
        Cmd::Ablate(args) => {
            let (cfg, out) = prepare(&args, "ablate")?;
            let (_, ab) = experiment::ablate(&cfg, &out)?;
            print!("{}", ab.table());
            println!("wrote ablation to {}", out.display());
        }
        Cmd::Replay { manifest, out } => {
            let out = out.unwrap_or_else(|| default_output_dir("replay"));
            let r = experiment::replay(&manifest, &out)?;
            if !r.identical {
                let report = serde_json::json!({"error": "replay_mismatch", "details": r.mismatches});
                eprintln!("{report}");
                return Ok(ExitCode::from(3));
            }
            println!("replay identical ({:?}) in {}", r.command, out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.report());
            match e {
                ExperimentError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
