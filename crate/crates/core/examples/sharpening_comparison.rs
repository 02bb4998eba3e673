//! Trains a next-token baseline and a sharpening arm from the same seed and
//! compares discriminability, consistency and recall.

use tcas_lab::experiment::{compare_arms, ArmSpec, RunConfig};
use tcas_lab::synth::generate_dataset;
use tcas_lab::tcas::TcasConfig;

fn main() -> tcas_lab::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = 500;
    let spec = cfg.synth_spec();
    let data = generate_dataset(&spec)?;
    let vocab = spec.vocab();
    let base = ArmSpec { name: "baseline".into(), seed: 1, tcas: TcasConfig { w_ae: 0.0, ..cfg.tcas } };
    let treat = ArmSpec { name: "tcas".into(), seed: 1, tcas: cfg.tcas };
    let cmp = compare_arms(&cfg, &data, &vocab, &base, &treat)?;

    for (name, ev) in [("baseline", &cmp.baseline), ("tcas", &cmp.treatment)] {
        println!(
            "{name:9} s_disc {:.3}  c_rg {:.3}  c_sg {:.3}  R@0.5 {:.1}  mIoU {:.3}",
            ev.s_disc_mean, ev.mean_c_rg, ev.mean_c_sg, ev.original.r_at_05, ev.original.miou
        );
    }
    let last = cmp.treatment_trace.last().expect("trained");
    println!("final sharpening loss {:.4}, active hinges {:.2}", last.tcas_loss, last.active_hinge_fraction);
    println!(
        "s_disc higher: {}, consistency not lower: {}, recall within a point: {}",
        cmp.s_disc_higher(),
        cmp.consistency_not_lower(),
        cmp.recall_within_one_point()
    );
    Ok(())
}
