//! Experiment drivers: correlation study, intervention sweep, training
//! comparison, hyperparameter ablation, report regeneration and dataset
//! export. Each driver is a pure function of its [`RunConfig`] apart from
//! the wall-clock field of the report.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub use config::{
    derive_seed, streams, AblationSection, AnalysisSection, CompareSection, ExperimentKind, InterventionSection,
    ModelSection, ReportSection, RunConfig,
};
pub use report::{
    emit_report, histogram_tsv, scatter_tsv, table_csv, write_atomic, ArmSamples, Cell, Check, CorrelationEntry,
    Histogram, RunReport, Scatter, Table, TrainingTrace, SCHEMA_VERSION,
};

use crate::attn::{cross_modal_scores, HeadId};
use crate::error::{LabError, Result};
use crate::model::{
    evaluate_with, init_model, load_checkpoint, save_checkpoint, train, DiscHeads, EvalBundle, EvalOptions,
    ModelState, TrainStepReport,
};
use crate::synth::{generate_dataset, write_jsonl, Dataset, GroundingSample, Variant, Vocab};
use crate::tcas::TcasConfig;

const HIST_BINS: usize = 20;

/// A finished experiment: its report plus any artifacts worth persisting.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Model trained by the run, if it trained exactly one.
    pub model: Option<ModelState>,
    pub dataset: Option<Dataset>,
}

impl RunOutput {
    fn report_only(report: RunReport) -> Self {
        RunOutput {
            report,
            model: None,
            dataset: None,
        }
    }

    /// Writes the report files plus `model.ckpt`, `train.jsonl` and
    /// `eval.jsonl` when present.
    pub fn write(&self, dir: &Path) -> Result<()> {
        emit_report(&self.report, dir)?;
        if let Some(m) = &self.model {
            save_checkpoint(m, &dir.join("model.ckpt"))?;
        }
        if let Some(d) = &self.dataset {
            for (name, split) in [("train.jsonl", &d.train), ("eval.jsonl", &d.eval)] {
                let mut buf = Vec::new();
                write_jsonl(split, &mut buf)?;
                write_atomic(&dir.join(name), &buf)?;
            }
        }
        Ok(())
    }
}

/// Runs the experiment `kind` described by `cfg`.
pub fn run(kind: ExperimentKind, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate(kind)?;
    let started = Instant::now();
    let mut out = match kind {
        ExperimentKind::Correlate => run_correlation_study(cfg)?,
        ExperimentKind::Intervene => run_intervention_sweep(cfg)?,
        ExperimentKind::TrainCompare => RunOutput::report_only(run_training_comparison(cfg)?),
        ExperimentKind::Ablate => RunOutput::report_only(run_ablation(cfg)?),
        ExperimentKind::Report => return Ok(RunOutput::report_only(regenerate_report(cfg)?)),
        ExperimentKind::GenData => generate_data(cfg)?,
    };
    out.report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

fn new_report(kind: ExperimentKind, cfg: &RunConfig) -> RunReport {
    let mut r = RunReport::new(kind.name(), cfg.clone());
    r.derived_seeds
        .push((format!("{}.{}", cfg.seed, streams::DATA), derive_seed(cfg.seed, streams::DATA)));
    r
}

fn dataset(cfg: &RunConfig) -> Result<(Dataset, Vocab)> {
    let spec = cfg.synth_spec();
    Ok((generate_dataset(&spec)?, spec.vocab()))
}

/// A training arm: initialization and data-order seeds plus the loss mix.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub seed: u64,
    pub tcas: TcasConfig,
}

struct TrainedArm {
    state: ModelState,
    trace: Vec<TrainStepReport>,
}

fn train_arm(cfg: &RunConfig, arm: &ArmSpec, data: &Dataset, vocab: &Vocab) -> Result<TrainedArm> {
    let mut state = init_model(&cfg.model_config(arm.seed))?;
    let trace = train(
        &mut state,
        &data.train,
        vocab,
        &arm.tcas,
        &cfg.schedule,
        derive_seed(arm.seed, streams::SHUFFLE),
    )?;
    Ok(TrainedArm { state, trace })
}

fn analysis_tcas(cfg: &RunConfig) -> TcasConfig {
    if cfg.analysis.train_with_tcas {
        cfg.tcas
    } else {
        TcasConfig { w_ae: 0.0, ..cfg.tcas }
    }
}

/// The model a study analyses: the configured checkpoint, or a freshly
/// trained one.
fn analysed_model(cfg: &RunConfig, data: &Dataset, vocab: &Vocab, report: &mut RunReport) -> Result<(ModelState, bool)> {
    if let Some(path) = &cfg.checkpoint {
        let state = load_checkpoint(path)?;
        let c = state.config();
        if c.vocab_size != vocab.size() || c.max_bins != cfg.synth.num_bins {
            return Err(LabError::Config(format!(
                "checkpoint expects vocab {} / {} bins, data has {} / {}",
                c.vocab_size,
                c.max_bins,
                vocab.size(),
                cfg.synth.num_bins
            )));
        }
        return Ok((state, false));
    }
    let arm = ArmSpec {
        name: "model".into(),
        seed: cfg.seed,
        tcas: analysis_tcas(cfg),
    };
    let trained = train_arm(cfg, &arm, data, vocab)?;
    report.training.push(TrainingTrace {
        arm: arm.name,
        steps: trained.trace,
    });
    Ok((trained.state, true))
}

fn grounding_rows(table: &mut Table, lead: &[Cell], ev: &EvalBundle, s_disc: [f64; 3]) {
    for (i, (name, m)) in [
        ("original", &ev.original),
        ("rephrased", &ev.rephrased),
        ("shifted", &ev.shifted),
    ]
    .into_iter()
    .enumerate()
    {
        let mut row = lead.to_vec();
        row.extend([s_disc[i].into(), m.r_at_05.into(), m.r_at_07.into(), m.miou.into(), name.into()]);
        table.push(row);
    }
}

fn s_disc_triple(ev: &EvalBundle) -> [f64; 3] {
    [ev.s_disc_mean, ev.s_disc_rephrased_mean, ev.s_disc_shifted_mean]
}

/// Per-sample discriminability against consistency on the eval split.
pub fn run_correlation_study(cfg: &RunConfig) -> Result<RunOutput> {
    let mut report = new_report(ExperimentKind::Correlate, cfg);
    let (data, vocab) = dataset(cfg)?;
    let (state, trained) = analysed_model(cfg, &data, &vocab, &mut report)?;
    let ev = evaluate_with(&state, &data.eval, &vocab, &EvalOptions::top_t(cfg.analysis.top_t))?;
    correlation_report(&mut report, &ev)?;
    Ok(RunOutput {
        report,
        model: trained.then_some(state),
        dataset: None,
    })
}

/// Fills the correlation, scatter and histogram sections from an
/// evaluation bundle.
pub fn correlation_report(report: &mut RunReport, ev: &EvalBundle) -> Result<()> {
    let recs = &ev.records;
    let col = |f: fn(&crate::model::SampleRecord) -> f64| recs.iter().map(f).collect::<Vec<f64>>();
    let s_disc = col(|r| r.s_disc);
    let c_rg = col(|r| r.scores.c_rg);
    let c_sg = col(|r| r.scores.c_sg);
    report.correlations.push(CorrelationEntry::compute("s_disc", "c_rg", &s_disc, &c_rg)?);
    report.correlations.push(CorrelationEntry::compute("s_disc", "c_sg", &s_disc, &c_sg)?);
    let (kl, eoj): (Vec<f64>, Vec<f64>) = recs
        .iter()
        .filter_map(|r| Some((r.kl_disc?, r.eoj_consistency?)))
        .unzip();
    if !kl.is_empty() {
        report.correlations.push(CorrelationEntry::compute("kl_disc", "eoj_consistency", &kl, &eoj)?);
    }

    let mut summary = Table::new("summary", &["metric", "value"]);
    for (k, v) in [
        ("r_at_05", ev.original.r_at_05),
        ("r_at_07", ev.original.r_at_07),
        ("miou", ev.original.miou),
        ("mean_c_rg", ev.mean_c_rg),
        ("mean_c_sg", ev.mean_c_sg),
        ("s_disc_mean", ev.s_disc_mean),
    ] {
        summary.push(vec![k.into(), v.into()]);
    }
    if let Some(e) = ev.eoj_consistency {
        summary.push(vec!["eoj_consistency".into(), e.into()]);
    }
    summary.push(vec!["excluded_rows".into(), ev.excluded_rows.into()]);
    summary.push(vec!["swapped_decodes".into(), ev.swapped_decodes.into()]);
    summary.push(vec!["non_bin_tokens".into(), ev.non_bin_tokens.into()]);
    report.tables.push(summary);

    report.scatters.push(Scatter {
        name: "s_disc_consistency".into(),
        columns: ["index", "s_disc", "c_rg", "c_sg"].map(String::from).to_vec(),
        rows: recs
            .iter()
            .map(|r| vec![r.index as f64, r.s_disc, r.scores.c_rg, r.scores.c_sg])
            .collect(),
    });
    // violin analog: discriminability split by consistency outcome
    for (name, metric) in [("c_rg", &c_rg), ("c_sg", &c_sg)] {
        let (hi, lo): (Vec<(f64, f64)>, Vec<(f64, f64)>) =
            s_disc.iter().copied().zip(metric.iter().copied()).partition(|(_, c)| *c >= 0.5);
        let first = |v: Vec<(f64, f64)>| v.into_iter().map(|(s, _)| s).collect::<Vec<_>>();
        report.histograms.push(Histogram::build(
            &format!("s_disc_{name}_consistent"),
            &first(hi),
            0.0,
            1.0,
            HIST_BINS,
        ));
        report.histograms.push(Histogram::build(
            &format!("s_disc_{name}_inconsistent"),
            &first(lo),
            0.0,
            1.0,
            HIST_BINS,
        ));
    }
    report.samples.push(ArmSamples {
        arm: "model".into(),
        records: ev.records.clone(),
    });
    Ok(())
}

/// The `t` heads with the highest cross-modal score averaged over the
/// original-query captures of `samples`.
pub fn top_heads_by_mean_score(
    state: &ModelState,
    samples: &[GroundingSample],
    vocab: &Vocab,
    t: usize,
) -> Result<Vec<HeadId>> {
    if samples.is_empty() {
        return Err(LabError::Empty("head ranking samples"));
    }
    let mut sums: BTreeMap<HeadId, f64> = BTreeMap::new();
    for s in samples {
        let d = state.decode_grounding(s, vocab, Variant::Original)?;
        for (h, v) in cross_modal_scores(&d.capture, &d.layout)?.scores {
            *sums.entry(h).or_default() += v;
        }
    }
    let n = samples.len() as f64;
    let table = crate::attn::HeadScoreTable {
        scores: sums.into_iter().map(|(h, v)| (h, v / n)).collect(),
    };
    crate::attn::select_top_heads(&table, t)
}

/// Grounding and discriminability across intervention intensities.
pub fn run_intervention_sweep(cfg: &RunConfig) -> Result<RunOutput> {
    let mut report = new_report(ExperimentKind::Intervene, cfg);
    let (data, vocab) = dataset(cfg)?;
    let (state, trained) = analysed_model(cfg, &data, &vocab, &mut report)?;
    let heads = match &cfg.intervention.heads {
        Some(h) => h.clone(),
        None => top_heads_by_mean_score(&state, &data.eval, &vocab, cfg.intervention.top_t)?,
    };
    let mut heads_table = Table::new("intervened_heads", &["layer", "head"]);
    for h in &heads {
        heads_table.push(vec![h.layer.into(), h.head.into()]);
    }

    let mut sweep = Table::new("sweep", &["alpha", "s_disc", "r_at_05", "r_at_07", "miou", "subset"]);
    let mut per_alpha = Vec::new();
    for &alpha in &cfg.intervention.alphas {
        let opts = EvalOptions {
            disc_heads: DiscHeads::Fixed(heads.clone()),
            intervention: Some((alpha, heads.clone())),
            include_eoj: false,
        };
        let ev = evaluate_with(&state, &data.eval, &vocab, &opts)?;
        grounding_rows(&mut sweep, &[alpha.into()], &ev, s_disc_triple(&ev));
        per_alpha.push((alpha, ev));
    }

    let mut sorted: Vec<&(f64, EvalBundle)> = per_alpha.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (i, name) in ["original", "rephrased", "shifted"].into_iter().enumerate() {
        let series: Vec<f64> = sorted.iter().map(|(_, ev)| s_disc_triple(ev)[i]).collect();
        let ok = series.windows(2).all(|w| w[1] >= w[0]);
        report.checks.push(Check {
            name: format!("s_disc_nondecreasing_{name}"),
            passed: ok,
            detail: format!("{series:?}"),
        });
    }
    if let Some((_, ev)) = sorted.iter().find(|(a, _)| *a == 1.0) {
        let v = s_disc_triple(ev);
        report.checks.push(Check {
            name: "s_disc_full_replacement".into(),
            passed: v.iter().all(|&x| x == 1.0),
            detail: format!("{v:?}"),
        });
    }
    if let Some((_, base)) = sorted.iter().find(|(a, _)| *a == 0.0) {
        for (alpha, ev) in sorted.iter().filter(|(a, _)| *a > 0.0 && *a <= 0.4) {
            report.checks.push(Check {
                name: format!("mild_alpha_{alpha}_no_degradation"),
                passed: ev.original.miou >= base.original.miou - 0.02,
                detail: format!("miou {} vs {} at alpha 0", ev.original.miou, base.original.miou),
            });
        }
    }
    report.tables.push(heads_table);
    report.tables.push(sweep);
    Ok(RunOutput {
        report,
        model: trained.then_some(state),
        dataset: None,
    })
}

/// Outcome of one baseline-versus-treatment replicate.
#[derive(Debug, Clone)]
pub struct ArmComparison {
    pub seed: u64,
    pub baseline: EvalBundle,
    pub treatment: EvalBundle,
    pub baseline_trace: Vec<TrainStepReport>,
    pub treatment_trace: Vec<TrainStepReport>,
}

impl ArmComparison {
    pub fn s_disc_higher(&self) -> bool {
        self.treatment.s_disc_mean > self.baseline.s_disc_mean
    }

    pub fn consistency_not_lower(&self) -> bool {
        self.treatment.mean_c_rg >= self.baseline.mean_c_rg && self.treatment.mean_c_sg >= self.baseline.mean_c_sg
    }

    pub fn recall_within_one_point(&self) -> bool {
        self.treatment.original.r_at_05 >= self.baseline.original.r_at_05 - 1.0
    }

    pub fn all_claims(&self) -> bool {
        self.s_disc_higher() && self.consistency_not_lower() && self.recall_within_one_point()
    }
}

/// Trains both arms on the same data in the same order from the same
/// initialization. Arms with different seeds are rejected.
pub fn compare_arms(
    cfg: &RunConfig,
    data: &Dataset,
    vocab: &Vocab,
    baseline: &ArmSpec,
    treatment: &ArmSpec,
) -> Result<ArmComparison> {
    if baseline.seed != treatment.seed {
        return Err(LabError::Config(format!(
            "arms must share a seed (baseline {}, treatment {})",
            baseline.seed, treatment.seed
        )));
    }
    let opts = EvalOptions::top_t(cfg.analysis.top_t);
    let b = train_arm(cfg, baseline, data, vocab)?;
    let t = train_arm(cfg, treatment, data, vocab)?;
    Ok(ArmComparison {
        seed: baseline.seed,
        baseline: evaluate_with(&b.state, &data.eval, vocab, &opts)?,
        treatment: evaluate_with(&t.state, &data.eval, vocab, &opts)?,
        baseline_trace: b.trace,
        treatment_trace: t.trace,
    })
}

fn rel(x: f64, base: f64) -> String {
    if base == 0.0 {
        "n/a".into()
    } else {
        format!("{:.1}", 100.0 * x / base)
    }
}

/// Next-token training against next-token plus sharpening, one replicate
/// per configured seed.
pub fn run_training_comparison(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = new_report(ExperimentKind::TrainCompare, cfg);
    let (data, vocab) = dataset(cfg)?;
    let mut claims = Table::new(
        "claims",
        &[
            "seed",
            "s_disc_baseline",
            "s_disc_tcas",
            "c_rg_baseline",
            "c_rg_tcas",
            "c_sg_baseline",
            "c_sg_tcas",
            "r_at_05_baseline",
            "r_at_05_tcas",
            "passed",
        ],
    );
    let mut grounding = Table::new(
        "grounding",
        &["seed", "arm", "subset", "r_at_05", "r_at_07", "miou", "rel_r_at_05", "rel_miou"],
    );
    let mut consistency = Table::new(
        "consistency",
        &["seed", "arm", "mean_c_rg", "mean_c_sg", "eoj_consistency", "s_disc_mean"],
    );
    let mut hist_vals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut passes = 0;
    for &seed in &cfg.compare.seeds {
        let base = ArmSpec {
            name: format!("baseline_seed{seed}"),
            seed,
            tcas: TcasConfig { w_ae: 0.0, ..cfg.tcas },
        };
        let treat = ArmSpec {
            name: format!("tcas_seed{seed}"),
            seed,
            tcas: cfg.tcas,
        };
        report
            .derived_seeds
            .push((format!("{seed}.{}", streams::INIT), derive_seed(seed, streams::INIT)));
        report
            .derived_seeds
            .push((format!("{seed}.{}", streams::SHUFFLE), derive_seed(seed, streams::SHUFFLE)));
        let cmp = compare_arms(cfg, &data, &vocab, &base, &treat)?;
        passes += cmp.all_claims() as usize;
        claims.push(vec![
            seed.into(),
            cmp.baseline.s_disc_mean.into(),
            cmp.treatment.s_disc_mean.into(),
            cmp.baseline.mean_c_rg.into(),
            cmp.treatment.mean_c_rg.into(),
            cmp.baseline.mean_c_sg.into(),
            cmp.treatment.mean_c_sg.into(),
            cmp.baseline.original.r_at_05.into(),
            cmp.treatment.original.r_at_05.into(),
            cmp.all_claims().into(),
        ]);
        for (arm, ev) in [("baseline", &cmp.baseline), ("tcas", &cmp.treatment)] {
            for (subset, m) in [("original", ev.original), ("rephrased", ev.rephrased), ("shifted", ev.shifted)] {
                grounding.push(vec![
                    seed.into(),
                    arm.into(),
                    subset.into(),
                    m.r_at_05.into(),
                    m.r_at_07.into(),
                    m.miou.into(),
                    rel(m.r_at_05, ev.original.r_at_05).into(),
                    rel(m.miou, ev.original.miou).into(),
                ]);
            }
            consistency.push(vec![
                seed.into(),
                arm.into(),
                ev.mean_c_rg.into(),
                ev.mean_c_sg.into(),
                ev.eoj_consistency.map_or(Cell::Text("n/a".into()), Cell::Num),
                ev.s_disc_mean.into(),
            ]);
            hist_vals
                .entry(arm)
                .or_default()
                .extend(ev.records.iter().map(|r| r.s_disc));
        }
        report.samples.push(ArmSamples {
            arm: base.name.clone(),
            records: cmp.baseline.records,
        });
        report.samples.push(ArmSamples {
            arm: treat.name.clone(),
            records: cmp.treatment.records,
        });
        report.training.push(TrainingTrace {
            arm: base.name,
            steps: cmp.baseline_trace,
        });
        report.training.push(TrainingTrace {
            arm: treat.name,
            steps: cmp.treatment_trace,
        });
    }
    for (arm, vals) in hist_vals {
        report
            .histograms
            .push(Histogram::build(&format!("s_disc_{arm}"), &vals, 0.0, 1.0, HIST_BINS));
    }
    let n = cfg.compare.seeds.len();
    report.checks.push(Check {
        name: "tcas_claims_majority".into(),
        passed: 2 * passes > n,
        detail: format!("{passes} of {n} replicates satisfy every claim"),
    });
    report.tables.extend([claims, grounding, consistency]);
    Ok(report)
}

/// One-at-a-time sweeps of `t`, `m`, `thr` and `w_ae` around the
/// configured sharpening settings; one table per parameter.
pub fn run_ablation(cfg: &RunConfig) -> Result<RunReport> {
    let mut report = new_report(ExperimentKind::Ablate, cfg);
    let (data, vocab) = dataset(cfg)?;
    let opts = EvalOptions::top_t(cfg.analysis.top_t);
    let ab = &cfg.ablation;
    let grids: [(&str, Vec<TcasConfig>, Vec<Cell>); 4] = [
        (
            "t",
            ab.t.iter().map(|&t| TcasConfig { t, ..cfg.tcas }).collect(),
            ab.t.iter().map(|&t| t.into()).collect(),
        ),
        (
            "m",
            ab.m.iter().map(|&m| TcasConfig { m, ..cfg.tcas }).collect(),
            ab.m.iter().map(|&m| m.into()).collect(),
        ),
        (
            "thr",
            ab.thr.iter().map(|&thr| TcasConfig { thr, ..cfg.tcas }).collect(),
            ab.thr.iter().map(|&v| v.into()).collect(),
        ),
        (
            "w_ae",
            ab.w_ae.iter().map(|&w_ae| TcasConfig { w_ae, ..cfg.tcas }).collect(),
            ab.w_ae.iter().map(|&v| v.into()).collect(),
        ),
    ];
    for (param, configs, values) in grids {
        if configs.is_empty() {
            continue;
        }
        let mut table = Table::new(
            &format!("ablation_{param}"),
            &[param, "s_disc", "r_at_05", "r_at_07", "miou", "mean_c_rg", "mean_c_sg", "final_tcas_loss"],
        );
        for (tc, value) in configs.into_iter().zip(values) {
            tc.validate()?;
            let arm = ArmSpec {
                name: format!("{param}={}", value_label(&value)),
                seed: cfg.seed,
                tcas: tc,
            };
            let trained = train_arm(cfg, &arm, &data, &vocab)?;
            let ev = evaluate_with(&trained.state, &data.eval, &vocab, &opts)?;
            let last = trained.trace.last().map_or(0.0, |r| r.tcas_loss);
            table.push(vec![
                value,
                ev.s_disc_mean.into(),
                ev.original.r_at_05.into(),
                ev.original.r_at_07.into(),
                ev.original.miou.into(),
                ev.mean_c_rg.into(),
                ev.mean_c_sg.into(),
                last.into(),
            ]);
            report.training.push(TrainingTrace {
                arm: arm.name,
                steps: trained.trace,
            });
        }
        report.tables.push(table);
    }
    Ok(report)
}

fn value_label(c: &Cell) -> String {
    match c {
        Cell::Int(i) => i.to_string(),
        Cell::Num(x) => x.to_string(),
        Cell::Text(s) => s.clone(),
    }
}

/// Loads the report named by `report.input` so it can be re-emitted.
pub fn regenerate_report(cfg: &RunConfig) -> Result<RunReport> {
    let path = cfg
        .report
        .input
        .as_ref()
        .ok_or_else(|| LabError::Config("report.input is required".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    RunReport::from_json(&text)
}

/// Generates the train and eval splits.
pub fn generate_data(cfg: &RunConfig) -> Result<RunOutput> {
    let mut report = new_report(ExperimentKind::GenData, cfg);
    let (data, _) = dataset(cfg)?;
    let mut t = Table::new("splits", &["split", "count", "first_index", "last_index", "two_event_samples"]);
    for (name, split) in [("train", &data.train), ("eval", &data.eval)] {
        t.push(vec![
            name.into(),
            split.len().into(),
            split.first().map_or(0, |s| s.index).into(),
            split.last().map_or(0, |s| s.index).into(),
            split.iter().filter(|s| s.eoj.is_some()).count().into(),
        ]);
    }
    report.tables.push(t);
    Ok(RunOutput {
        report,
        model: None,
        dataset: Some(data),
    })
}
