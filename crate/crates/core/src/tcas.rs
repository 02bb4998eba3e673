//! Temporally conditioned attention sharpening.
//!
//! For the `t` heads with the highest cross-modal score, every text query
//! whose time-aggregated visual attention peaks above `thr` is pushed to
//! separate its above-mean bins from its below-mean bins by a margin `m`:
//!
//! ```text
//! L_q = max(m + max(N_q) - min(P_q), 0)
//! L   = sum_h sum_q L_q / sum_h |valid_h|
//! ```
//!
//! Head selection, the valid-token set and the P/N partition are piecewise
//! constant in the attention weights, so the gradient only flows through the
//! two bins that realize `max(N_q)` and `min(P_q)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attn::{aggregate_by_timestamp, cross_modal_scores, select_top_heads, AttentionCapture, HeadId, TokenLayout};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcasConfig {
    /// Number of top cross-modal heads to sharpen.
    pub t: usize,
    /// Hinge margin.
    pub m: f64,
    /// Valid-token threshold on the peak aggregated bin.
    pub thr: f64,
    /// Weight of the sharpening loss next to next-token prediction.
    pub w_ae: f64,
}

impl Default for TcasConfig {
    fn default() -> Self {
        TcasConfig {
            t: 32,
            m: 0.2,
            thr: 0.1,
            w_ae: 0.5,
        }
    }
}

impl TcasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(LabError::Config("tcas.t must be positive".into()));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(LabError::Config(format!("tcas.m = {} must be > 0", self.m)));
        }
        if !(self.thr > 0.0 && self.thr < 1.0) {
            return Err(LabError::Config(format!("tcas.thr = {} must be in (0, 1)", self.thr)));
        }
        if !(self.w_ae >= 0.0 && self.w_ae.is_finite()) {
            return Err(LabError::Config(format!("tcas.w_ae = {} must be >= 0", self.w_ae)));
        }
        Ok(())
    }
}

/// Indices (into `agg_rows`) of rows whose peak strictly exceeds `thr`.
pub fn valid_tokens(agg_rows: &[Vec<f64>], thr: f64) -> Vec<usize> {
    agg_rows
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) > thr)
        .map(|(i, _)| i)
        .collect()
}

/// Bins strictly above and strictly below the row mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PosNeg {
    pub mean: f64,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl PosNeg {
    pub fn pos_values(&self, row: &[f64]) -> Vec<f64> {
        self.pos.iter().map(|&b| row[b]).collect()
    }

    pub fn neg_values(&self, row: &[f64]) -> Vec<f64> {
        self.neg.iter().map(|&b| row[b]).collect()
    }
}

pub fn split_pos_neg(row: &[f64]) -> PosNeg {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let pos = (0..row.len()).filter(|&b| row[b] > mean).collect();
    let neg = (0..row.len()).filter(|&b| row[b] < mean).collect();
    PosNeg { mean, pos, neg }
}

/// `max(m + max(neg) - min(pos), 0)`, or 0 when either side is empty.
pub fn token_loss(pos: &[f64], neg: &[f64], m: f64) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.0;
    }
    let max_neg = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_pos = pos.iter().copied().fold(f64::INFINITY, f64::min);
    (m + max_neg - min_pos).max(0.0)
}

/// Lowest bin index among the largest values of `bins`.
fn argmax_bin(row: &[f64], bins: &[usize]) -> usize {
    let mut best = bins[0];
    for &b in &bins[1..] {
        if row[b] > row[best] {
            best = b;
        }
    }
    best
}

fn argmin_bin(row: &[f64], bins: &[usize]) -> usize {
    let mut best = bins[0];
    for &b in &bins[1..] {
        if row[b] < row[best] {
            best = b;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLossRecord {
    pub head: HeadId,
    pub query: usize,
    pub loss: f64,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TcasDiagnostics {
    pub selected_heads: Vec<HeadId>,
    /// `|valid_h|` for each selected head.
    pub valid_counts: BTreeMap<HeadId, usize>,
    pub token_losses: Vec<TokenLossRecord>,
    /// Valid tokens whose hinge is strictly positive.
    pub active_hinges: usize,
    /// Valid tokens skipped because P or N was empty.
    pub skipped_tokens: usize,
}

impl TcasDiagnostics {
    pub fn total_valid(&self) -> usize {
        self.valid_counts.values().sum()
    }

    pub fn active_fraction(&self) -> f64 {
        let n = self.total_valid();
        if n == 0 {
            0.0
        } else {
            self.active_hinges as f64 / n as f64
        }
    }
}

/// Sparse gradient of a scalar with respect to attention weights: one dense
/// `seq_len × seq_len` block per head that receives gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionGradient {
    pub seq_len: usize,
    pub per_head: BTreeMap<HeadId, Vec<f64>>,
}

impl AttentionGradient {
    pub fn get(&self, head: HeadId, q: usize, k: usize) -> f64 {
        self.per_head
            .get(&head)
            .map_or(0.0, |g| g[q * self.seq_len + k])
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.per_head.values_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// One hinge term of the loss, with enough bookkeeping to differentiate it.
struct Term {
    head: HeadId,
    query: usize,
    loss: f64,
    max_neg_bin: Option<usize>,
    min_pos_bin: Option<usize>,
    split: PosNeg,
}

struct Evaluation {
    loss: f64,
    normalizer: usize,
    terms: Vec<Term>,
    diag: TcasDiagnostics,
}

fn evaluate(capture: &AttentionCapture, layout: &TokenLayout, cfg: &TcasConfig) -> Result<Evaluation> {
    cfg.validate()?;
    if capture.num_heads() == 0 {
        return Err(LabError::Empty("attention capture"));
    }
    if cfg.t > capture.num_heads() {
        return Err(LabError::InvalidArgument(format!(
            "t = {} exceeds the {} captured heads",
            cfg.t,
            capture.num_heads()
        )));
    }
    if layout.num_bins() < 2 {
        return Err(LabError::InvalidArgument("sharpening needs at least two time bins".into()));
    }
    let table = cross_modal_scores(capture, layout)?;
    let heads = select_top_heads(&table, cfg.t)?;
    let text = layout.text_positions();

    let mut diag = TcasDiagnostics {
        selected_heads: heads.clone(),
        ..Default::default()
    };
    let mut terms = Vec::new();
    let mut sum = 0.0;
    for &h in &heads {
        let rec = capture.get(h)?;
        let agg = text
            .iter()
            .map(|&q| aggregate_by_timestamp(rec.row(q), layout))
            .collect::<Result<Vec<_>>>()?;
        let valid = valid_tokens(&agg, cfg.thr);
        diag.valid_counts.insert(h, valid.len());
        for i in valid {
            let row = &agg[i];
            let split = split_pos_neg(row);
            let loss = token_loss(&split.pos_values(row), &split.neg_values(row), cfg.m);
            let skipped = split.pos.is_empty() || split.neg.is_empty();
            if skipped {
                diag.skipped_tokens += 1;
            } else if loss > 0.0 {
                diag.active_hinges += 1;
            }
            let (max_neg_bin, min_pos_bin) = if skipped || loss <= 0.0 {
                (None, None)
            } else {
                (Some(argmax_bin(row, &split.neg)), Some(argmin_bin(row, &split.pos)))
            };
            diag.token_losses.push(TokenLossRecord {
                head: h,
                query: text[i],
                loss,
                pos: split.pos.len(),
                neg: split.neg.len(),
            });
            terms.push(Term {
                head: h,
                query: text[i],
                loss,
                max_neg_bin,
                min_pos_bin,
                split,
            });
            sum += loss;
        }
    }
    let normalizer = diag.total_valid();
    let loss = if normalizer == 0 {
        0.0
    } else {
        sum / normalizer as f64
    };
    Ok(Evaluation {
        loss,
        normalizer,
        terms,
        diag,
    })
}

/// Sharpening loss of one capture, with diagnostics.
pub fn tcas_loss(capture: &AttentionCapture, layout: &TokenLayout, cfg: &TcasConfig) -> Result<(f64, TcasDiagnostics)> {
    let ev = evaluate(capture, layout, cfg)?;
    Ok((ev.loss, ev.diag))
}

/// Loss, diagnostics and the gradient of the loss with respect to every
/// attention weight. Head selection is held fixed.
pub fn tcas_loss_and_grad(
    capture: &AttentionCapture,
    layout: &TokenLayout,
    cfg: &TcasConfig,
) -> Result<(f64, TcasDiagnostics, AttentionGradient)> {
    let ev = evaluate(capture, layout, cfg)?;
    let n = capture.seq_len();
    let mut grad = AttentionGradient {
        seq_len: n,
        per_head: BTreeMap::new(),
    };
    if ev.normalizer > 0 {
        let unit = 1.0 / ev.normalizer as f64;
        // bin -> visual keys in that bin
        let mut keys_of_bin = vec![Vec::new(); layout.num_bins()];
        for k in 0..layout.len() {
            if let Some(b) = layout.time_bin(k) {
                keys_of_bin[b].push(k);
            }
        }
        for term in &ev.terms {
            let (Some(nb), Some(pb)) = (term.max_neg_bin, term.min_pos_bin) else {
                continue;
            };
            debug_assert!(term.loss > 0.0);
            let g = grad.per_head.entry(term.head).or_insert_with(|| vec![0.0; n * n]);
            for &k in &keys_of_bin[nb] {
                g[term.query * n + k] += unit;
            }
            for &k in &keys_of_bin[pb] {
                g[term.query * n + k] -= unit;
            }
        }
    }
    Ok((ev.loss, ev.diag, grad))
}

/// The discrete choices behind one loss evaluation: selected heads and, for
/// each valid token, its bin partition and the active hinge's extreme bins.
/// The loss is smooth wherever this stays the same.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcasStructure {
    pub selected_heads: Vec<HeadId>,
    pub tokens: Vec<(HeadId, usize, Vec<usize>, Vec<usize>, Option<usize>, Option<usize>)>,
}

pub fn tcas_structure(capture: &AttentionCapture, layout: &TokenLayout, cfg: &TcasConfig) -> Result<TcasStructure> {
    let ev = evaluate(capture, layout, cfg)?;
    Ok(TcasStructure {
        selected_heads: ev.diag.selected_heads,
        tokens: ev
            .terms
            .into_iter()
            .map(|t| (t.head, t.query, t.split.pos, t.split.neg, t.max_neg_bin, t.min_pos_bin))
            .collect(),
    })
}

pub fn tcas_grad(capture: &AttentionCapture, layout: &TokenLayout, cfg: &TcasConfig) -> Result<AttentionGradient> {
    tcas_loss_and_grad(capture, layout, cfg).map(|(_, _, g)| g)
}
