//! Attention captures, token layouts and cross-modal head scoring.
//!
//! A capture holds one row-stochastic `seq_len × seq_len` matrix per
//! `(layer, head)`. Query `q` may only attend to keys `0..=q`; every entry
//! past that causal prefix is exactly zero.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance for row sums of a captured attention row.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Post-softmax attention weights of a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    head: HeadId,
    seq_len: usize,
    weights: Vec<f64>,
}

impl AttentionRecord {
    /// Builds a record from row-major weights and checks the causal
    /// row-stochasticity invariant.
    pub fn new(head: HeadId, seq_len: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != seq_len * seq_len {
            return Err(LabError::DimensionMismatch(format!(
                "{} weights for a {seq_len}x{seq_len} record",
                weights.len()
            )));
        }
        let rec = AttentionRecord {
            head,
            seq_len,
            weights,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Builds a record from rows. Each row must have `seq_len` entries.
    pub fn from_rows(head: HeadId, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut weights = Vec::with_capacity(n * n);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LabError::DimensionMismatch(format!(
                    "row {q} has {} entries, expected {n}",
                    row.len()
                )));
            }
            weights.extend_from_slice(row);
        }
        Self::new(head, n, weights)
    }

    /// Skips validation. Used by the model, whose softmax rows are
    /// normalized by construction (and checked in tests).
    pub(crate) fn from_raw(head: HeadId, seq_len: usize, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), seq_len * seq_len);
        AttentionRecord {
            head,
            seq_len,
            weights,
        }
    }

    pub fn head(&self) -> HeadId {
        self.head
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.weights[q * self.seq_len..(q + 1) * self.seq_len]
    }

    pub(crate) fn row_mut(&mut self, q: usize) -> &mut [f64] {
        &mut self.weights[q * self.seq_len..(q + 1) * self.seq_len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, q: usize, k: usize) -> f64 {
        self.weights[q * self.seq_len + k]
    }

    /// Checks nonnegativity, zeros past the causal prefix and unit row sums.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.seq_len {
            let row = self.row(q);
            let mut sum = 0.0;
            for (k, &w) in row.iter().enumerate() {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(self.violation(q, format!("entry {k} = {w}")));
                }
                if k > q && w != 0.0 {
                    return Err(self.violation(q, format!("nonzero entry {k} past causal prefix")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(self.violation(q, format!("row sums to {sum}")));
            }
        }
        Ok(())
    }

    fn violation(&self, query: usize, detail: String) -> LabError {
        LabError::NotStochastic {
            head: self.head,
            query,
            detail,
        }
    }
}

/// Every head's attention from one forward pass, ordered by `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    layers: usize,
    heads_per_layer: usize,
    records: Vec<AttentionRecord>,
}

impl AttentionCapture {
    pub fn new(layers: usize, heads_per_layer: usize, records: Vec<AttentionRecord>) -> Result<Self> {
        if records.len() != layers * heads_per_layer {
            return Err(LabError::DimensionMismatch(format!(
                "{} records for {layers} layers x {heads_per_layer} heads",
                records.len()
            )));
        }
        let seq_len = records.first().map_or(0, |r| r.seq_len);
        for (i, rec) in records.iter().enumerate() {
            let expected = HeadId::new(i / heads_per_layer, i % heads_per_layer);
            if rec.head != expected {
                return Err(LabError::InvalidArgument(format!(
                    "record {i} is {} but {expected} was expected",
                    rec.head
                )));
            }
            if rec.seq_len != seq_len {
                return Err(LabError::DimensionMismatch(format!(
                    "{} has length {}, capture length is {seq_len}",
                    rec.head, rec.seq_len
                )));
            }
        }
        Ok(AttentionCapture {
            layers,
            heads_per_layer,
            records,
        })
    }

    /// A capture holding a single head, `L0H0`.
    pub fn single(record: AttentionRecord) -> Result<Self> {
        Self::new(1, 1, vec![record])
    }

    pub(crate) fn from_parts_unchecked(
        layers: usize,
        heads_per_layer: usize,
        records: Vec<AttentionRecord>,
    ) -> Self {
        AttentionCapture {
            layers,
            heads_per_layer,
            records,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads_per_layer(&self) -> usize {
        self.heads_per_layer
    }

    pub fn num_heads(&self) -> usize {
        self.records.len()
    }

    pub fn seq_len(&self) -> usize {
        self.records.first().map_or(0, |r| r.seq_len)
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.layers && head.head < self.heads_per_layer
    }

    pub fn get(&self, head: HeadId) -> Result<&AttentionRecord> {
        if !self.contains(head) {
            return Err(LabError::UnknownHead(head));
        }
        Ok(&self.records[head.layer * self.heads_per_layer + head.head])
    }

    pub(crate) fn get_mut(&mut self, head: HeadId) -> Result<&mut AttentionRecord> {
        if !self.contains(head) {
            return Err(LabError::UnknownHead(head));
        }
        Ok(&mut self.records[head.layer * self.heads_per_layer + head.head])
    }

    pub fn validate(&self) -> Result<()> {
        self.records.iter().try_for_each(AttentionRecord::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Visual,
    Text,
    Other,
}

/// Per-position role map of a token sequence.
///
/// Visual positions carry a time bin; text positions may belong to an event
/// description. Positions tagged [`Role::Other`] are excluded from every score.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    roles: Vec<Role>,
    time_bin: Vec<Option<usize>>,
    event_of: Vec<Option<usize>>,
    num_bins: usize,
}

impl TokenLayout {
    pub fn new(
        roles: Vec<Role>,
        time_bin: Vec<Option<usize>>,
        event_of: Vec<Option<usize>>,
        num_bins: usize,
    ) -> Result<Self> {
        let n = roles.len();
        if time_bin.len() != n || event_of.len() != n {
            return Err(LabError::DimensionMismatch(format!(
                "layout vectors have lengths {n}, {}, {}",
                time_bin.len(),
                event_of.len()
            )));
        }
        for (i, role) in roles.iter().enumerate() {
            match (role, time_bin[i]) {
                (Role::Visual, Some(b)) if b < num_bins => {}
                (Role::Visual, Some(b)) => {
                    return Err(LabError::InvalidArgument(format!(
                        "position {i}: time bin {b} >= {num_bins}"
                    )))
                }
                (Role::Visual, None) => {
                    return Err(LabError::InvalidArgument(format!(
                        "visual position {i} has no time bin"
                    )))
                }
                (_, Some(_)) => {
                    return Err(LabError::InvalidArgument(format!(
                        "non-visual position {i} has a time bin"
                    )))
                }
                (_, None) => {}
            }
            if event_of[i].is_some() && *role != Role::Text {
                return Err(LabError::InvalidArgument(format!(
                    "non-text position {i} is tagged with an event"
                )));
            }
        }
        Ok(TokenLayout {
            roles,
            time_bin,
            event_of,
            num_bins,
        })
    }

    /// `num_visual` visual tokens with bins `0..num_visual`, followed by
    /// text tokens tagged with the given events.
    pub fn video_then_text(num_visual: usize, text_events: &[Option<usize>]) -> Result<Self> {
        let n = num_visual + text_events.len();
        let mut roles = vec![Role::Visual; num_visual];
        roles.resize(n, Role::Text);
        let mut time_bin: Vec<Option<usize>> = (0..num_visual).map(Some).collect();
        time_bin.resize(n, None);
        let mut event_of = vec![None; num_visual];
        event_of.extend_from_slice(text_events);
        Self::new(roles, time_bin, event_of, num_visual)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn role(&self, pos: usize) -> Role {
        self.roles[pos]
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn time_bin(&self, pos: usize) -> Option<usize> {
        self.time_bin[pos]
    }

    pub fn event_of(&self, pos: usize) -> Option<usize> {
        self.event_of[pos]
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.positions_with(Role::Visual)
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.positions_with(Role::Text)
    }

    fn positions_with(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Text positions describing `event`.
    pub fn event_tokens(&self, event: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.event_of[i] == Some(event))
            .collect()
    }

    /// Visual positions whose bin lies in `span`.
    pub fn gt_visual(&self, span: &EventSpan) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| matches!(self.time_bin[i], Some(b) if span.contains_bin(b)))
            .collect()
    }

    pub(crate) fn check_width(&self, width: usize) -> Result<()> {
        if width != self.len() {
            return Err(LabError::DimensionMismatch(format!(
                "attention width {width} vs layout length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Ground-truth bin range of an event, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub event: usize,
    pub start_bin: usize,
    pub end_bin: usize,
}

impl EventSpan {
    pub fn new(event: usize, start_bin: usize, end_bin: usize) -> Result<Self> {
        if start_bin > end_bin {
            return Err(LabError::InvalidArgument(format!(
                "span start {start_bin} > end {end_bin}"
            )));
        }
        Ok(EventSpan {
            event,
            start_bin,
            end_bin,
        })
    }

    pub fn contains_bin(&self, bin: usize) -> bool {
        (self.start_bin..=self.end_bin).contains(&bin)
    }

    pub fn len(&self) -> usize {
        self.end_bin - self.start_bin + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks the span against a layout: in range and covering at least one
    /// visual token.
    pub fn check(&self, layout: &TokenLayout) -> Result<()> {
        if self.end_bin >= layout.num_bins() {
            return Err(LabError::InvalidArgument(format!(
                "span end {} >= {} bins",
                self.end_bin,
                layout.num_bins()
            )));
        }
        if layout.gt_visual(self).is_empty() {
            return Err(LabError::Empty("ground-truth visual token set"));
        }
        Ok(())
    }
}

/// Cross-modal score of every head in a capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub scores: BTreeMap<HeadId, f64>,
}

impl HeadScoreTable {
    pub fn get(&self, head: HeadId) -> Option<f64> {
        self.scores.get(&head).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mean total visual mass of text-query rows, per head.
pub fn cross_modal_scores(capture: &AttentionCapture, layout: &TokenLayout) -> Result<HeadScoreTable> {
    layout.check_width(capture.seq_len())?;
    let text = layout.text_positions();
    let visual = layout.visual_positions();
    if text.is_empty() {
        return Err(LabError::Empty("text token set"));
    }
    if visual.is_empty() {
        return Err(LabError::Empty("visual token set"));
    }
    let scores = capture
        .records()
        .iter()
        .map(|rec| {
            let total: f64 = text
                .iter()
                .map(|&q| visual.iter().map(|&k| rec.get(q, k)).sum::<f64>())
                .sum();
            (rec.head(), total / text.len() as f64)
        })
        .collect();
    Ok(HeadScoreTable { scores })
}

/// The `t` highest-scoring heads, descending; ties go to the smaller
/// `(layer, head)`.
pub fn select_top_heads(table: &HeadScoreTable, t: usize) -> Result<Vec<HeadId>> {
    if t == 0 || t > table.len() {
        return Err(LabError::InvalidArgument(format!(
            "cannot select {t} of {} heads",
            table.len()
        )));
    }
    let mut ranked: Vec<(HeadId, f64)> = table.scores.iter().map(|(&h, &s)| (h, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(t).map(|(h, _)| h).collect())
}

/// Sums a row's visual entries per time bin.
pub fn aggregate_by_timestamp(row: &[f64], layout: &TokenLayout) -> Result<Vec<f64>> {
    layout.check_width(row.len())?;
    let mut out = vec![0.0; layout.num_bins()];
    for (k, &w) in row.iter().enumerate() {
        if let Some(b) = layout.time_bin(k) {
            out[b] += w;
        }
    }
    Ok(out)
}

/// Header of the pattern-dump CSV.
pub const PATTERN_DUMP_HEADER: &str = "layer,head,query_index,time_bin,weight";

/// Writes the time-aggregated attention of each requested head's text
/// queries as CSV, sorted by `(layer, head, query_index, time_bin)`.
pub fn attention_pattern_dump<W: Write>(
    capture: &AttentionCapture,
    layout: &TokenLayout,
    heads: &[HeadId],
    sink: &mut W,
) -> Result<()> {
    layout.check_width(capture.seq_len())?;
    let mut heads = heads.to_vec();
    heads.sort();
    heads.dedup();
    let records = heads
        .iter()
        .map(|&h| capture.get(h))
        .collect::<Result<Vec<_>>>()?;

    let mut out = String::new();
    out.push_str(PATTERN_DUMP_HEADER);
    out.push('\n');
    let text = layout.text_positions();
    for rec in records {
        for &q in &text {
            let agg = aggregate_by_timestamp(rec.row(q), layout)?;
            for (b, w) in agg.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    rec.head().layer,
                    rec.head().head,
                    q,
                    b,
                    format_sig(*w, 9)
                ));
            }
        }
    }
    sink.write_all(out.as_bytes())
        .map_err(|e| LabError::io("<pattern sink>", e))
}

/// Fixed-point rendering with `digits` significant digits.
pub fn format_sig(value: f64, digits: usize) -> String {
    if value == 0.0 || !value.is_finite() {
        return if value == 0.0 {
            "0".to_string()
        } else {
            value.to_string()
        };
    }
    let magnitude = value.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{value:.decimals$}")
}
