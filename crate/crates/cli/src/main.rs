use std::path::{Path, PathBuf};
use std::process::ExitCode;

use circlenet::app::{self, DetectionSource};
use circlenet::config::RunConfig;
use circlenet::Error;
use clap::{Parser, Subcommand};

/// Reciprocating feature-pyramid pedestrian detector.
#[derive(Parser)]
#[command(name = "circlenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (key=value lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, or a detection file, against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        /// Annotation-format file of detections to score instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Print the architecture report and dataflow graph.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(common: &Common) -> Result<Option<RunConfig>, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Some(RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    if let Some(seed) = common.seed {
        cfg.get_or_insert_with(RunConfig::default).seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("CIRCLENET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("CIRCLENET_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?.unwrap_or_default();
            let m = app::generate(&cfg, &out)?;
            println!("wrote {} images to {} (config hash {})", m.count, out.display(), m.config_hash);
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?.unwrap_or_default();
            let total = cfg.train.steps;
            let every = (total / 20).max(1);
            let summary = app::train_run(&cfg, &data, &out, |s| {
                if s.step % every == 0 || s.step + 1 == total {
                    eprintln!("step {}/{total} loss {:.4}", s.step + 1, s.loss.total);
                }
            })?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", summary.checkpoint.display());
        }
        Command::Eval { common, data, out, checkpoint, detections } => {
            let cfg = load_config(&common)?;
            let source = match (&checkpoint, &detections) {
                (_, Some(d)) => DetectionSource::File(d),
                (Some(c), None) => DetectionSource::Checkpoint(c),
                (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --detections".into())),
            };
            let report = app::eval_run(cfg.as_ref(), source, &data, &out)?;
            print!("{}", report.summary());
            println!("wrote {}", Path::new(&out).join(app::REPORT_FILE).display());
        }
        Command::Inspect { common } => {
            let cfg = load_config(&common)?.unwrap_or_default();
            print!("{}", app::inspect(&cfg)?);
        }
    }
    Ok(())
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
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
