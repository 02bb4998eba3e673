//! Trains a small model briefly, ranks its heads by cross-modal score on one
//! grounding query and dumps the time-aggregated attention of the top heads.
//!
//! cargo run --example attention_heads [-- out.csv]

use std::io::Write;

use tcas_lab::attn::{attention_pattern_dump, cross_modal_scores, select_top_heads};
use tcas_lab::experiment::{write_atomic, RunConfig};
use tcas_lab::model::{init_model, train, TrainSchedule};
use tcas_lab::synth::{generate_dataset, Variant};
use tcas_lab::tcas::TcasConfig;

fn main() -> tcas_lab::Result<()> {
    let cfg = RunConfig::default();
    let spec = cfg.synth_spec();
    let vocab = spec.vocab();
    let data = generate_dataset(&spec)?;
    let mut state = init_model(&cfg.model_config(cfg.seed))?;
    let schedule = TrainSchedule { steps: 300, ..cfg.schedule.clone() };
    train(&mut state, &data.train, &vocab, &TcasConfig { w_ae: 0.0, ..cfg.tcas }, &schedule, 1)?;

    let sample = &data.eval[0];
    let d = state.decode_grounding(sample, &vocab, Variant::Original)?;
    println!(
        "gold bins {}..={}, predicted {}..={}",
        sample.original.start_bin, sample.original.end_bin, d.start_bin, d.end_bin
    );
    let table = cross_modal_scores(&d.capture, &d.layout)?;
    let top = select_top_heads(&table, 4)?;
    for h in &top {
        println!("{h}  cross-modal {:.3}", table.get(*h).unwrap_or(0.0));
    }

    let mut csv = Vec::new();
    attention_pattern_dump(&d.capture, &d.layout, &top, &mut csv)?;
    match std::env::args().nth(1) {
        Some(path) => write_atomic(std::path::Path::new(&path), &csv)?,
        None => std::io::stdout().write_all(&csv).expect("stdout"),
    }
    Ok(())
}
