use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AttentionOverride, ForwardOutput, ModelState};
use crate::attn::{cross_modal_scores, select_top_heads, AttentionCapture, HeadId, TokenLayout};
use crate::error::{LabError, Result};
use crate::intervention::{build_target, InterventionConfig};
use crate::metrics::{
    batch, discriminability_avg, discriminability_ratio, eoj_consistency, kl_discriminability, mean, Interval,
    ConsistencyScores,
};
use crate::synth::{EojQuestion, GroundingSample, Prompt, Variant, Vocab};

/// A decoded grounding answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub start_bin: usize,
    pub end_bin: usize,
    pub interval: Interval,
    /// The model emitted the end before the start.
    pub swapped: bool,
    /// How many of the two answer tokens were not bin tokens.
    pub non_bin_tokens: usize,
    /// Capture of the final decoding step, `[video | query | start]`.
    pub capture: AttentionCapture,
    pub layout: TokenLayout,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    fn forward_prompt(&self, prompt: &Prompt, intervention: Option<(f64, &[HeadId])>, event: usize, span: crate::attn::EventSpan) -> Result<ForwardOutput> {
        match intervention {
            None => self.forward(&prompt.tokens, &prompt.layout),
            Some((alpha, heads)) => {
                let cfg = InterventionConfig::new(alpha, heads.to_vec())?;
                let queries = prompt.layout.event_tokens(event);
                let target = build_target(&prompt.layout, &span, &queries)?;
                self.forward_with_override(&prompt.tokens, &prompt.layout, AttentionOverride { cfg: &cfg, target: &target })
            }
        }
    }

    /// Greedy decode of `[start, end]` bin tokens. A non-bin token is
    /// replaced by the highest-scoring bin token and counted in
    /// `non_bin_tokens`.
    pub fn decode_grounding(&self, sample: &GroundingSample, vocab: &Vocab, variant: Variant) -> Result<Decoded> {
        self.decode_grounding_with(sample, vocab, variant, None)
    }

    /// Like [`ModelState::decode_grounding`], optionally mixing the event
    /// rows of `heads` toward the ground-truth span at intensity `alpha` on
    /// every decoding step.
    pub fn decode_grounding_with(
        &self,
        sample: &GroundingSample,
        vocab: &Vocab,
        variant: Variant,
        intervention: Option<(f64, &[HeadId])>,
    ) -> Result<Decoded> {
        let vsz = self.cfg.vocab_size;
        let span = sample.query_span(variant);
        let mut answer = Vec::with_capacity(2);
        let mut non_bin = 0;
        let mut last = None;
        for _ in 0..2 {
            let prompt = sample.grounding_prompt(vocab, variant, &answer)?;
            let out = self.forward_prompt(&prompt, intervention, span.event, span)?;
            let logits = out.logits_at(prompt.tokens.len() - 1, vsz);
            let mut tok = argmax(logits);
            if !vocab.is_bin(tok) {
                non_bin += 1;
                tok = argmax(&logits[..vocab.num_bins]);
            }
            answer.push(tok);
            last = Some((out, prompt.layout));
        }
        let (out, layout) = last.expect("two decoding steps");
        let (a, b) = (answer[0], answer[1]);
        let (start_bin, end_bin) = (a.min(b), a.max(b));
        Ok(Decoded {
            start_bin,
            end_bin,
            interval: Interval::from_bins(start_bin, end_bin),
            swapped: a > b,
            non_bin_tokens: non_bin,
            capture: out.capture,
            layout,
        })
    }

    /// Answers one event-order question: `true` when "yes" outscores "no".
    pub fn answer_eoj(&self, sample: &GroundingSample, vocab: &Vocab, q: &EojQuestion) -> Result<(bool, AttentionCapture, TokenLayout)> {
        let prompt = sample.eoj_prompt(vocab, q)?;
        let out = self.forward(&prompt.tokens, &prompt.layout)?;
        let logits = out.logits_at(prompt.tokens.len() - 1, self.cfg.vocab_size);
        Ok((logits[vocab.yes()] > logits[vocab.no()], out.capture, prompt.layout))
    }
}

/// Which heads the discriminability averages run over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscHeads {
    /// The top-`t` cross-modal heads of each sample's own capture.
    TopT(usize),
    Fixed(Vec<HeadId>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub disc_heads: DiscHeads,
    /// `(alpha, heads)` intervention applied to every grounding decode.
    pub intervention: Option<(f64, Vec<HeadId>)>,
    pub include_eoj: bool,
}

impl EvalOptions {
    pub fn top_t(t: usize) -> Self {
        EvalOptions {
            disc_heads: DiscHeads::TopT(t),
            intervention: None,
            include_eoj: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub r_at_05: f64,
    pub r_at_07: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub pred_original: (usize, usize),
    pub pred_rephrased: (usize, usize),
    pub pred_shifted: (usize, usize),
    pub scores: ConsistencyScores,
    /// Discriminability on the original query.
    pub s_disc: f64,
    pub s_disc_rephrased: f64,
    pub s_disc_shifted: f64,
    pub eoj_consistency: Option<f64>,
    pub kl_disc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub original: GroundingMetrics,
    pub rephrased: GroundingMetrics,
    pub shifted: GroundingMetrics,
    pub mean_c_rg: f64,
    pub mean_c_sg: f64,
    pub eoj_consistency: Option<f64>,
    pub s_disc_mean: f64,
    pub s_disc_rephrased_mean: f64,
    pub s_disc_shifted_mean: f64,
    pub kl_disc_mean: Option<f64>,
    /// Event rows, over all three variants, dropped from discriminability
    /// for lack of visual mass.
    pub excluded_rows: usize,
    pub swapped_decodes: usize,
    pub non_bin_tokens: usize,
    pub records: Vec<SampleRecord>,
}

fn heads_for(capture: &AttentionCapture, layout: &TokenLayout, which: &DiscHeads) -> Result<Vec<HeadId>> {
    match which {
        DiscHeads::TopT(t) => select_top_heads(&cross_modal_scores(capture, layout)?, *t),
        DiscHeads::Fixed(h) => {
            if h.is_empty() {
                return Err(LabError::Empty("discriminability head set"));
            }
            Ok(h.clone())
        }
    }
}

fn grounding_metrics(ious: &[f64]) -> Result<GroundingMetrics> {
    let r = batch::recalls(ious, &[0.5, 0.7])?;
    Ok(GroundingMetrics {
        r_at_05: r[0],
        r_at_07: r[1],
        miou: mean(ious).ok_or(LabError::Empty("IoU list"))?,
    })
}

/// Evaluation with per-sample top-`t` discriminability heads.
pub fn evaluate(state: &ModelState, data: &[GroundingSample], vocab: &Vocab, t: usize) -> Result<EvalBundle> {
    evaluate_with(state, data, vocab, &EvalOptions::top_t(t))
}

/// Decodes every variant of every sample and reduces the metric suite.
pub fn evaluate_with(
    state: &ModelState,
    data: &[GroundingSample],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalBundle> {
    if data.is_empty() {
        return Err(LabError::Empty("evaluation data"));
    }
    let iv = opts.intervention.as_ref().map(|(a, h)| (*a, h.as_slice()));
    let mut records = Vec::with_capacity(data.len());
    let mut excluded = 0;
    let mut swapped = 0;
    let mut non_bin = 0;
    let mut golds: BTreeMap<Variant, Vec<Interval>> = BTreeMap::new();
    let mut preds: BTreeMap<Variant, Vec<Interval>> = BTreeMap::new();
    for sample in data {
        let mut decoded = Vec::with_capacity(3);
        for v in Variant::ALL {
            let d = state.decode_grounding_with(sample, vocab, v, iv)?;
            let span = sample.query_span(v);
            golds.entry(v).or_default().push(Interval::from_bins(span.start_bin, span.end_bin));
            preds.entry(v).or_default().push(d.interval);
            swapped += d.swapped as usize;
            non_bin += d.non_bin_tokens;
            decoded.push(d);
        }
        let ious: Vec<f64> = Variant::ALL
            .iter()
            .zip(&decoded)
            .map(|(&v, d)| {
                let span = sample.query_span(v);
                crate::metrics::iou(d.interval, Interval::from_bins(span.start_bin, span.end_bin))
            })
            .collect();
        let scores = ConsistencyScores::from_ious(ious[0], ious[1], ious[2]);

        let mut disc = [0.0; 3];
        for (i, (&v, d)) in Variant::ALL.iter().zip(&decoded).enumerate() {
            let span = sample.query_span(v);
            let heads = heads_for(&d.capture, &d.layout, &opts.disc_heads)?;
            let mut per_head = BTreeMap::new();
            for &h in &heads {
                let r = discriminability_ratio(d.capture.get(h)?, &d.layout, &span)?;
                excluded += r.excluded_rows;
                per_head.insert(h, r.value);
            }
            disc[i] = discriminability_avg(&per_head, &heads)?;
        }

        let (eoj, kl) = match (&sample.eoj, opts.include_eoj) {
            (Some(qs), true) => {
                let mut f1 = Vec::with_capacity(qs.len());
                let mut kl = None;
                for (i, q) in qs.iter().enumerate() {
                    let (ans, cap, layout) = state.answer_eoj(sample, vocab, q)?;
                    f1.push(if ans == q.answer { 1.0 } else { 0.0 });
                    if i == 0 {
                        let hs = heads_for(&cap, &layout, &opts.disc_heads)?;
                        let mut per = BTreeMap::new();
                        for &h in &hs {
                            per.insert(h, kl_discriminability(cap.get(h)?, &layout, q.first, q.second)?);
                        }
                        kl = Some(discriminability_avg(&per, &hs)?);
                    }
                }
                (Some(eoj_consistency(&f1)?), kl)
            }
            _ => (None, None),
        };

        let pair = |d: &Decoded| (d.start_bin, d.end_bin);
        records.push(SampleRecord {
            index: sample.index,
            pred_original: pair(&decoded[0]),
            pred_rephrased: pair(&decoded[1]),
            pred_shifted: pair(&decoded[2]),
            scores,
            s_disc: disc[0],
            s_disc_rephrased: disc[1],
            s_disc_shifted: disc[2],
            eoj_consistency: eoj,
            kl_disc: kl,
        });
    }

    let column_ious = |v: Variant| -> Result<Vec<f64>> {
        let p = &preds[&v];
        let g = &golds[&v];
        let col = |xs: &[Interval], f: fn(&Interval) -> f64| xs.iter().map(f).collect::<Vec<_>>();
        batch::ious(
            &col(p, |i| i.start),
            &col(p, |i| i.end),
            &col(g, |i| i.start),
            &col(g, |i| i.end),
        )
    };
    let col = |f: fn(&SampleRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let c_rg: Vec<f64> = records.iter().map(|r| r.scores.c_rg).collect();
    let c_sg: Vec<f64> = records.iter().map(|r| r.scores.c_sg).collect();
    let s_disc: Vec<f64> = records.iter().map(|r| r.s_disc).collect();
    let eoj: Vec<f64> = records.iter().filter_map(|r| r.eoj_consistency).collect();
    let kl: Vec<f64> = records.iter().filter_map(|r| r.kl_disc).collect();
    Ok(EvalBundle {
        original: grounding_metrics(&column_ious(Variant::Original)?)?,
        rephrased: grounding_metrics(&column_ious(Variant::Rephrased)?)?,
        shifted: grounding_metrics(&column_ious(Variant::Shifted)?)?,
        mean_c_rg: mean(&c_rg).unwrap_or(0.0),
        mean_c_sg: mean(&c_sg).unwrap_or(0.0),
        eoj_consistency: mean(&eoj),
        s_disc_mean: mean(&s_disc).unwrap_or(0.0),
        s_disc_rephrased_mean: mean(&col(|r| r.s_disc_rephrased)).unwrap_or(0.0),
        s_disc_shifted_mean: mean(&col(|r| r.s_disc_shifted)).unwrap_or(0.0),
        kl_disc_mean: mean(&kl),
        excluded_rows: excluded,
        swapped_decodes: swapped,
        non_bin_tokens: non_bin,
        records,
    })
}
