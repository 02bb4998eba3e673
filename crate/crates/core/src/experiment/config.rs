use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::HeadId;
use crate::error::{LabError, Result};
use crate::model::{OptimizerKind, ToyModelConfig, TrainSchedule};
use crate::synth::SynthSpec;
use crate::tcas::TcasConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Correlate,
    Intervene,
    TrainCompare,
    Ablate,
    Report,
    GenData,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Correlate => "correlate",
            ExperimentKind::Intervene => "intervene",
            ExperimentKind::TrainCompare => "train_compare",
            ExperimentKind::Ablate => "ablate",
            ExperimentKind::Report => "report",
            ExperimentKind::GenData => "gen_data",
        }
    }
}

/// Architecture knobs; vocabulary size and bin count follow the synthetic
/// spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads_per_layer: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub optimizer: OptimizerKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 4,
            heads_per_layer: 8,
            model_dim: 32,
            mlp_dim: 64,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Heads per sample entering the discriminability average.
    pub top_t: usize,
    /// Train the analysed model with the sharpening loss as configured
    /// instead of next-token prediction alone.
    pub train_with_tcas: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            top_t: 8,
            train_with_tcas: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionSection {
    pub alphas: Vec<f64>,
    /// Number of heads intervened when `heads` is not given: the top heads
    /// by mean cross-modal score over the eval split.
    pub top_t: usize,
    pub heads: Option<Vec<HeadId>>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        InterventionSection {
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            top_t: 8,
            heads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// One replicate per seed; both arms of a replicate share it.
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub t: Vec<usize>,
    pub m: Vec<f64>,
    pub thr: Vec<f64>,
    pub w_ae: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            t: vec![8, 16, 32],
            m: vec![0.1, 0.2, 0.3],
            thr: vec![0.05, 0.1, 0.2],
            w_ae: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Existing `report.json` to re-emit.
    pub input: Option<PathBuf>,
}

/// Everything an experiment depends on. Parsed from TOML; every field has
/// a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Load this model instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    pub synth: SynthSpec,
    pub tcas: TcasConfig,
    pub schedule: TrainSchedule,
    pub analysis: AnalysisSection,
    pub intervention: InterventionSection,
    pub compare: CompareSection,
    pub ablation: AblationSection,
    pub report: ReportSection,
}


/// Named random streams derived from one seed.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
}

/// A seed for the named stream `name` of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a of the name picks the ChaCha stream
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng.next_u64()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// The synthetic spec with its seed drawn from the data stream.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: derive_seed(self.seed, streams::DATA),
            ..self.synth.clone()
        }
    }

    pub fn model_config(&self, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            layers: self.model.layers,
            heads_per_layer: self.model.heads_per_layer,
            model_dim: self.model.model_dim,
            mlp_dim: self.model.mlp_dim,
            vocab_size: self.synth.vocab().size(),
            max_bins: self.synth.num_bins,
            seed: derive_seed(seed, streams::INIT),
            optimizer: self.model.optimizer,
        }
    }

    /// Checks every section that `kind` uses.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(LabError::Config(format!(
                    "config is for `{}` but `{}` was requested",
                    k.name(),
                    kind.name()
                )));
            }
        }
        match kind {
            ExperimentKind::Report => {
                if self.report.input.is_none() {
                    return Err(LabError::Config("report.input is required".into()));
                }
                return Ok(());
            }
            ExperimentKind::GenData => return self.synth_spec().validate(),
            _ => {}
        }
        self.synth_spec().validate()?;
        let model = self.model_config(self.seed);
        model.validate()?;
        self.schedule.validate()?;
        self.tcas.validate()?;
        let heads = model.num_heads();
        let needs_tcas = match kind {
            ExperimentKind::TrainCompare | ExperimentKind::Ablate => true,
            _ => self.analysis.train_with_tcas,
        };
        if needs_tcas && self.tcas.t > heads {
            return Err(LabError::Config(format!(
                "tcas.t = {} exceeds the model's {heads} heads",
                self.tcas.t
            )));
        }
        if self.analysis.top_t == 0 || self.analysis.top_t > heads {
            return Err(LabError::Config(format!(
                "analysis.top_t = {} must be in 1..={heads}",
                self.analysis.top_t
            )));
        }
        match kind {
            ExperimentKind::Intervene => {
                let iv = &self.intervention;
                if iv.alphas.is_empty() {
                    return Err(LabError::Config("intervention.alphas is empty".into()));
                }
                if let Some(a) = iv.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return Err(LabError::Config(format!("alpha {a} outside [0, 1]")));
                }
                match &iv.heads {
                    Some(h) if h.is_empty() => {
                        return Err(LabError::Config("intervention.heads is empty".into()))
                    }
                    Some(h) => {
                        if let Some(bad) = h.iter().find(|h| h.layer >= model.layers || h.head >= model.heads_per_layer) {
                            return Err(LabError::UnknownHead(*bad));
                        }
                    }
                    None if iv.top_t == 0 || iv.top_t > heads => {
                        return Err(LabError::Config(format!(
                            "intervention.top_t = {} must be in 1..={heads}",
                            iv.top_t
                        )))
                    }
                    None => {}
                }
            }
            ExperimentKind::TrainCompare => {
                if self.compare.seeds.is_empty() {
                    return Err(LabError::Config("compare.seeds is empty".into()));
                }
            }
            ExperimentKind::Ablate => {
                let ab = &self.ablation;
                if ab.t.is_empty() && ab.m.is_empty() && ab.thr.is_empty() && ab.w_ae.is_empty() {
                    return Err(LabError::Config("ablation grid is empty".into()));
                }
                if let Some(t) = ab.t.iter().find(|&&t| t == 0 || t > heads) {
                    return Err(LabError::Config(format!("ablation t = {t} must be in 1..={heads}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
