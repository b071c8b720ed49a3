use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use verdrift::pipeline::{PipelineConfig, PipelineError, Workspace};
use verdrift::report::{aggregate_runs, render_drift};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "verdrift", version, about = "Firmware version drift detection from traffic fingerprints")]
struct Cli {
    /// JSON pipeline configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for pairing and model initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of independent runs (R1..Rk).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Directory holding `<device>-dayNN.pcap` captures and `lab.json`.
    /// Defaults to `<out>/captures`.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Output directory for every derived artifact.
    #[arg(long, global = true, default_value = "verdrift-out")]
    out: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic lab's captures into the data root.
    Synth,
    /// Parse captures into per-window flow statistics.
    Extract,
    /// Render flow statistics as fingerprint images.
    Imagize,
    /// Build train, validation and test pairs.
    Pair(RunArg),
    /// Train the twin network.
    Train(RunArg),
    /// Score all pairs and print the accuracy tables.
    Eval(RunArg),
    /// Per device-day change verdicts.
    Detect(RunArg),
    /// Aggregate runs into report.txt and report.json.
    Report,
    /// Every stage in order.
    All,
}

#[derive(clap::Args, Debug)]
struct RunArg {
    /// Only this run (1-based); all runs when absent.
    #[arg(long)]
    run: Option<usize>,
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = cli.runs {
        cfg.runs = runs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runs(ws: &Workspace, arg: &RunArg) -> Result<Vec<usize>, PipelineError> {
    match arg.run {
        Some(r) if r == 0 || r > ws.config.runs => Err(PipelineError::Config(format!(
            "--run {r} is outside 1..={}",
            ws.config.runs
        ))),
        Some(r) => Ok(vec![r]),
        None => Ok((1..=ws.config.runs).collect()),
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = config(cli)?;
    let data_root = cli.data_root.clone().unwrap_or_else(|| cli.out.join("captures"));
    let ws = Workspace::new(cfg, data_root, cli.out.clone());
    match &cli.command {
        Command::Synth => {
            let files = ws.synth()?;
            println!("wrote {} files to {}", files.len(), ws.data_root.display());
        }
        Command::Extract => {
            let files = ws.extract()?;
            println!("wrote {} statistics files", files.len() - 1);
        }
        Command::Imagize => {
            let files = ws.imagize()?;
            println!("wrote {} images", files.len() - 1);
        }
        Command::Pair(arg) => {
            for run in runs(&ws, arg)? {
                ws.pair(run)?;
                println!("run {run}: pairs written to {}", ws.run_dir(run).display());
            }
        }
        Command::Train(arg) => {
            for run in runs(&ws, arg)? {
                let path = ws.train(run)?;
                println!("run {run}: model written to {}", path.display());
            }
        }
        Command::Eval(arg) => {
            for run in runs(&ws, arg)? {
                let o = ws.eval(run)?;
                println!(
                    "run {run}: training accuracy {:.4}, validation accuracy {:.4}",
                    o.training.accuracy_all, o.validation.accuracy_all
                );
                print!("{}", aggregate_runs("Stable versions", std::slice::from_ref(&o.stable)).render());
                if let Some(c) = &o.change {
                    print!("{}", aggregate_runs("Version changes", std::slice::from_ref(c)).render());
                }
            }
        }
        Command::Detect(arg) => {
            for run in runs(&ws, arg)? {
                print!("{}", render_drift(&ws.detect(run)?, run));
            }
        }
        Command::Report => print!("{}", ws.report()?.render()),
        Command::All => print!("{}", ws.run_all()?.render()),
    }
    Ok(())
}

fn exit_code(err: &PipelineError) -> u8 {
    match err {
        PipelineError::MissingArtifact(_) => EXIT_MISSING,
        PipelineError::Config(_) => EXIT_USAGE,
        e if e.is_divergence() => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
