use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::attn::TokenLayout;
use crate::error::{LabError, Result};
use crate::synth::{GroundingSample, Variant, Vocab};
use crate::tcas::{tcas_loss, tcas_loss_and_grad, TcasConfig};

/// A teacher-forced training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub tokens: Vec<usize>,
    pub layout: TokenLayout,
    /// `(position, expected next token)` pairs scored by next-token loss.
    pub targets: Vec<(usize, usize)>,
}

impl TrainItem {
    /// `[video | query | start]`, predicting `start` then `end`.
    pub fn grounding(sample: &GroundingSample, vocab: &Vocab, variant: Variant) -> Result<Self> {
        let span = sample.query_span(variant);
        let prompt = sample.grounding_prompt(vocab, variant, &[vocab.bin(span.start_bin)])?;
        let n = prompt.tokens.len();
        Ok(TrainItem {
            tokens: prompt.tokens,
            layout: prompt.layout,
            targets: vec![(n - 2, vocab.bin(span.start_bin)), (n - 1, vocab.bin(span.end_bin))],
        })
    }

    /// `[video | relation desc_a desc_b]`, predicting yes/no.
    pub fn eoj(sample: &GroundingSample, vocab: &Vocab, question: usize) -> Result<Self> {
        let qs = sample
            .eoj
            .as_ref()
            .ok_or(LabError::Empty("event-order question set"))?;
        let q = qs.get(question).ok_or_else(|| {
            LabError::InvalidArgument(format!("question {question} of {}", qs.len()))
        })?;
        let prompt = sample.eoj_prompt(vocab, q)?;
        let n = prompt.tokens.len();
        let answer = if q.answer { vocab.yes() } else { vocab.no() };
        Ok(TrainItem {
            tokens: prompt.tokens,
            layout: prompt.layout,
            targets: vec![(n - 1, answer)],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub ntp_loss: f64,
    pub tcas_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub valid_tokens: usize,
    pub active_hinge_fraction: f64,
}

/// Batch losses: mean next-token cross-entropy over all targets and mean
/// sharpening loss over items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub ntp: f64,
    pub tcas: f64,
    pub total: f64,
    pub valid_tokens: usize,
    pub active_hinges: usize,
}

fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    (logits[target] - max - z.ln(), probs)
}

fn check_batch(batch: &[TrainItem]) -> Result<usize> {
    if batch.is_empty() {
        return Err(LabError::Empty("training batch"));
    }
    let targets: usize = batch.iter().map(|b| b.targets.len()).sum();
    if targets == 0 {
        return Err(LabError::Empty("training targets"));
    }
    Ok(targets)
}

impl ModelState {
    /// `ntp + w_ae * tcas` on a batch, without gradients.
    pub fn batch_loss(&self, batch: &[TrainItem], tcas: &TcasConfig) -> Result<BatchLoss> {
        let total_targets = check_batch(batch)?;
        let vsz = self.cfg.vocab_size;
        let mut ntp = 0.0;
        let mut tc = 0.0;
        let mut valid = 0;
        let mut active = 0;
        for item in batch {
            item.layout.check_width(item.tokens.len())?;
            let (out, _) = self.run(&item.tokens, None, false)?;
            for &(pos, tok) in &item.targets {
                ntp -= log_softmax_at(out.logits_at(pos, vsz), tok).0;
            }
            let (l, diag) = tcas_loss(&out.capture, &item.layout, tcas)?;
            tc += l;
            valid += diag.total_valid();
            active += diag.active_hinges;
        }
        let ntp = ntp / total_targets as f64;
        let tc = tc / batch.len() as f64;
        Ok(BatchLoss {
            ntp,
            tcas: tc,
            total: ntp + tcas.w_ae * tc,
            valid_tokens: valid,
            active_hinges: active,
        })
    }

    /// Batch loss and its gradient with respect to every parameter. Head
    /// selection, valid tokens and the hinge partition are held fixed. With
    /// `w_ae = 0` no sharpening gradient is formed at all.
    pub fn batch_loss_and_grad(&self, batch: &[TrainItem], tcas: &TcasConfig) -> Result<(BatchLoss, Vec<f64>)> {
        let total_targets = check_batch(batch)?;
        let vsz = self.cfg.vocab_size;
        let mut grads = vec![0.0; self.params.len()];
        let mut ntp = 0.0;
        let mut tc = 0.0;
        let mut valid = 0;
        let mut active = 0;
        for item in batch {
            item.layout.check_width(item.tokens.len())?;
            let (out, cache) = self.run(&item.tokens, None, true)?;
            let cache = cache.expect("cache requested");
            let n = item.tokens.len();
            let mut d_logits = vec![0.0; n * vsz];
            for &(pos, tok) in &item.targets {
                let (lp, probs) = log_softmax_at(out.logits_at(pos, vsz), tok);
                ntp -= lp;
                let row = &mut d_logits[pos * vsz..(pos + 1) * vsz];
                for (g, p) in row.iter_mut().zip(&probs) {
                    *g += p / total_targets as f64;
                }
                row[tok] -= 1.0 / total_targets as f64;
            }
            let d_attn = if tcas.w_ae > 0.0 {
                let (l, diag, mut g) = tcas_loss_and_grad(&out.capture, &item.layout, tcas)?;
                tc += l;
                valid += diag.total_valid();
                active += diag.active_hinges;
                g.scale(tcas.w_ae / batch.len() as f64);
                Some(g)
            } else {
                let (l, diag) = tcas_loss(&out.capture, &item.layout, tcas)?;
                tc += l;
                valid += diag.total_valid();
                active += diag.active_hinges;
                None
            };
            self.backward(&cache, &d_logits, d_attn.as_ref(), &mut grads);
        }
        let ntp = ntp / total_targets as f64;
        let tc = tc / batch.len() as f64;
        Ok((
            BatchLoss {
                ntp,
                tcas: tc,
                total: ntp + tcas.w_ae * tc,
                valid_tokens: valid,
                active_hinges: active,
            },
            grads,
        ))
    }
}

/// One first-order update on `ntp + w_ae * tcas`. On a non-finite loss or
/// gradient the state is left untouched and an error is returned.
pub fn train_step(
    state: &mut ModelState,
    batch: &[TrainItem],
    tcas: &TcasConfig,
    lr: f64,
) -> Result<TrainStepReport> {
    tcas.validate()?;
    let (loss, grads) = state.batch_loss_and_grad(batch, tcas)?;
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !loss.total.is_finite() || !grad_norm.is_finite() {
        return Err(LabError::NonFiniteLoss {
            ntp: loss.ntp,
            tcas: loss.tcas,
        });
    }
    state.apply_update(&grads, lr);
    Ok(TrainStepReport {
        step: state.step,
        ntp_loss: loss.ntp,
        tcas_loss: loss.tcas,
        total_loss: loss.total,
        grad_norm,
        valid_tokens: loss.valid_tokens,
        active_hinge_fraction: if loss.valid_tokens == 0 {
            0.0
        } else {
            loss.active_hinges as f64 / loss.valid_tokens as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of batch items drawn as event-order questions.
    pub eoj_fraction: f64,
    /// Grounding variants drawn for training items.
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            eoj_fraction: 0.25,
            variants: all_variants(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LabError::Config("schedule needs a positive batch_size".into()));
        }
        if self.variants.is_empty() {
            return Err(LabError::Config("schedule needs at least one training variant".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.eoj_fraction) {
            return Err(LabError::Config(format!("eoj_fraction {}", self.eoj_fraction)));
        }
        Ok(())
    }
}

/// Draws one batch. The draw sequence depends only on `rng`, so arms that
/// share a data seed see the same items in the same order.
pub(crate) fn draw_batch(
    rng: &mut ChaCha8Rng,
    data: &[GroundingSample],
    vocab: &Vocab,
    batch_size: usize,
    eoj_fraction: f64,
    variants: &[Variant],
) -> Result<Vec<TrainItem>> {
    (0..batch_size)
        .map(|_| {
            let sample = &data[rng.gen_range(0..data.len())];
            let eoj = rng.gen::<f64>() < eoj_fraction;
            match (&sample.eoj, eoj) {
                (Some(qs), true) => {
                    let q = rng.gen_range(0..qs.len());
                    TrainItem::eoj(sample, vocab, q)
                }
                _ => {
                    let v = variants[rng.gen_range(0..variants.len())];
                    TrainItem::grounding(sample, vocab, v)
                }
            }
        })
        .collect()
}

/// Runs `schedule.steps` updates with batches drawn from `data` by a
/// generator seeded with `data_seed`.
pub fn train(
    state: &mut ModelState,
    data: &[GroundingSample],
    vocab: &Vocab,
    tcas: &TcasConfig,
    schedule: &TrainSchedule,
    data_seed: u64,
) -> Result<Vec<TrainStepReport>> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(LabError::Empty("training data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut reports = Vec::with_capacity(schedule.steps);
    for _ in 0..schedule.steps {
        let batch = draw_batch(
            &mut rng,
            data,
            vocab,
            schedule.batch_size,
            schedule.eoj_fraction,
            &schedule.variants,
        )?;
        reports.push(train_step(state, &batch, tcas, schedule.lr)?);
    }
    Ok(reports)
}
