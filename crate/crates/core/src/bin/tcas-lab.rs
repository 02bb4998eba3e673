use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcas_lab::experiment::{run, ExperimentKind, RunConfig};
use tcas_lab::LabError;

#[derive(Parser)]
#[command(name = "tcas-lab", version, about = "Temporal cross-modal attention experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correlate per-sample discriminability with grounding consistency.
    Correlate(Common),
    /// Sweep attention intervention intensity.
    Intervene(Common),
    /// Train with and without the sharpening loss and compare.
    TrainCompare(Common),
    /// One-at-a-time sensitivity sweeps of the sharpening settings.
    Ablate(Common),
    /// Re-emit the tables and plots of an existing report.
    Report(Common),
    /// Write the synthetic train and eval splits as JSON lines.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(kind: ExperimentKind, args: Common) -> Result<PathBuf, LabError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    let result = run(kind, &cfg)?;
    result.write(&out)?;
    for c in &result.report.checks {
        println!("check {} {} {}", c.name, if c.passed { "pass" } else { "fail" }, c.detail);
    }
    for c in &result.report.correlations {
        match (c.r, c.p_value) {
            (Some(r), Some(p)) => println!("pearson {} {} r={r:.4} p={p:.3e} n={}", c.x, c.y, c.n),
            _ => println!(
                "pearson {} {} omitted: {}",
                c.x,
                c.y,
                c.omitted.as_deref().unwrap_or("undefined")
            ),
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Correlate(a) => (ExperimentKind::Correlate, a),
        Command::Intervene(a) => (ExperimentKind::Intervene, a),
        Command::TrainCompare(a) => (ExperimentKind::TrainCompare, a),
        Command::Ablate(a) => (ExperimentKind::Ablate, a),
        Command::Report(a) => (ExperimentKind::Report, a),
        Command::GenData(a) => (ExperimentKind::GenData, a),
    };
    match execute(kind, args) {
        Ok(out) => {
            println!("ok {} {}", kind.name(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
