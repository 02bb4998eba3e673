//! Per-sample discriminability against grounding consistency, written to a
//! report directory.
//!
//! cargo run --example correlation_study [-- out_dir]

use std::path::PathBuf;

use tcas_lab::experiment::{run, ExperimentKind, RunConfig};

fn main() -> tcas_lab::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = 300;
    let out = run(ExperimentKind::Correlate, &cfg)?;
    for c in &out.report.correlations {
        match (c.r, c.p_value) {
            (Some(r), Some(p)) => println!("{} ~ {}: r = {r:.3}, p = {p:.2e}, n = {}", c.x, c.y, c.n),
            _ => println!("{} ~ {}: {}", c.x, c.y, c.omitted.as_deref().unwrap_or("undefined")),
        }
    }
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tcas-lab-correlate"));
    out.write(&dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}
