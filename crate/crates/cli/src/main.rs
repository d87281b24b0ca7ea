use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlove::harness::{
    report, ExperimentConfig, ReportFormat, RunManifest, Runner, StageKind, SweepAxis,
};
use dlove::Error;

#[derive(Parser)]
#[command(
    name = "dlove",
    version,
    about = "Watermark-overwriting attack experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scale factor for sizes, counts and epochs; overrides the config.
    #[arg(long)]
    scale: Option<f64>,
    /// Suppress per-stage progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every target pipeline.
    TrainTarget(Common),
    /// Train the surrogate(s) the mode needs.
    TrainSurrogate(Common),
    /// Harvest watermarked pairs from each target.
    Harvest(Common),
    /// Fine-tune surrogate decoders on harvested pairs.
    Finetune(Common),
    /// Attack every target and write per-image results.
    Attack(Common),
    /// Score trained models on their test splits.
    Evaluate(Common),
    /// Repeat the run over one axis and pick the optimum.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// finetune-epochs, finetune-pairs or epsilon; defaults to [sweep].
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; defaults to [sweep].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run everything and render the report.
    Report {
        #[command(flatten)]
        common: Common,
        /// csv, text or json; all three when omitted.
        #[arg(long)]
        format: Option<String>,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn setup(c: &Common) -> Result<(Runner, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.scale {
        cfg.scale = s;
    }
    let out =
        c.out.clone().or_else(|| cfg.out.clone()).ok_or_else(|| {
            Failure::Config("no output directory: pass --out or set `out`".into())
        })?;
    let runner = Runner::new(&cfg, &out).map_err(|e| Failure::Config(e.to_string()))?;
    Ok((runner.verbose(!c.quiet), out))
}

fn stage(c: &Common, until: StageKind) -> Result<(), Failure> {
    let (mut r, out) = setup(c)?;
    let m = r.run(until)?;
    println!(
        "{} finished: {} stage(s), manifest at {}",
        until.label(),
        m.stages.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainTarget(c) => stage(&c, StageKind::TrainTarget),
        Command::TrainSurrogate(c) => stage(&c, StageKind::TrainSurrogate),
        Command::Harvest(c) => stage(&c, StageKind::Harvest),
        Command::Finetune(c) => stage(&c, StageKind::Finetune),
        Command::Attack(c) => stage(&c, StageKind::Attack),
        Command::Evaluate(c) => {
            let (mut r, out) = setup(&c)?;
            for e in r.evaluate()? {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<24} {:<20} bit_acc {:>8} psnr {:>9} heldout {:>8}",
                    e.model,
                    e.role,
                    f(e.bit_accuracy),
                    f(e.psnr),
                    f(e.heldout_accuracy)
                );
            }
            println!(
                "evaluation written to {}",
                out.join("evaluation.json").display()
            );
            Ok(())
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let (mut r, out) = setup(&common)?;
            let from_cfg = r.config().sweep.clone();
            let axis = match axis {
                Some(a) => SweepAxis::parse(&a)?,
                None => from_cfg
                    .as_ref()
                    .map(|s| s.axis)
                    .ok_or_else(|| Failure::Config("no sweep axis".into()))?,
            };
            let values = match values {
                Some(v) => v,
                None => from_cfg
                    .map(|s| s.values)
                    .ok_or_else(|| Failure::Config("no sweep values".into()))?,
            };
            let m = r.sweep(axis, &values)?;
            if let Some(s) = &m.sweep {
                for (t, v) in &s.optimum {
                    println!("optimum {t}: {v}");
                }
            }
            println!("sweep report at {}", out.join("sweep.csv").display());
            Ok(())
        }
        Command::Report { common, format } => {
            let format = format.map(|f| ReportFormat::parse(&f)).transpose()?;
            let (mut r, out) = setup(&common)?;
            r.run(StageKind::Attack)?;
            let m = RunManifest::load(&out)?;
            let formats = format.map_or(ReportFormat::ALL.to_vec(), |f| vec![f]);
            for f in formats {
                println!("{}", report(&m, f, &out)?.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
