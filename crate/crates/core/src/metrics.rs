//! Scalar measures: grounding accuracy, consistency, temporal
//! discriminability (ratio and symmetric-KL forms) and correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attn::{AttentionRecord, EventSpan, HeadId, TokenLayout};
use crate::error::{LabError, Result};

/// Additive floor applied to averaged event distributions before KL.
pub const KL_SMOOTHING: f64 = 1e-9;

/// A closed time interval. Bin spans `[s, e]` (inclusive bins) map to the
/// continuous interval `[s, e + 1]`, see [`Interval::from_bins`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start >= 0.0 && end >= start && end.is_finite()) {
            return Err(LabError::InvalidArgument(format!(
                "invalid interval [{start}, {end}]"
            )));
        }
        Ok(Interval { start, end })
    }

    /// Continuous extent covered by the inclusive bin range `[start, end]`.
    pub fn from_bins(start_bin: usize, end_bin: usize) -> Self {
        Interval {
            start: start_bin as f64,
            end: (end_bin + 1) as f64,
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

pub fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Percentage of IoUs strictly above `threshold`.
pub fn recall_at(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(LabError::Empty("IoU list"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "recall threshold {threshold} outside (0, 1)"
        )));
    }
    let hits = ious.iter().filter(|&&x| x > threshold).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    mean(ious).ok_or(LabError::Empty("IoU list"))
}

pub fn consistency_product(i_ori: f64, i_variant: f64) -> f64 {
    i_ori * i_variant
}

/// Grounding IoUs for the three query variants and the derived
/// consistency products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub i_ori: f64,
    pub i_rg: f64,
    pub i_sg: f64,
    pub c_rg: f64,
    pub c_sg: f64,
}

impl ConsistencyScores {
    pub fn from_ious(i_ori: f64, i_rg: f64, i_sg: f64) -> Self {
        ConsistencyScores {
            i_ori,
            i_rg,
            i_sg,
            c_rg: consistency_product(i_ori, i_rg),
            c_sg: consistency_product(i_ori, i_sg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityRatio {
    pub value: f64,
    /// Event rows that contributed to `value`.
    pub used_rows: usize,
    /// Event rows dropped because they put no mass on visual tokens.
    pub excluded_rows: usize,
}

/// Mean, over the event's text rows, of the share of visual attention that
/// lands inside the ground-truth span.
pub fn discriminability_ratio(
    attn: &AttentionRecord,
    layout: &TokenLayout,
    span: &EventSpan,
) -> Result<DiscriminabilityRatio> {
    layout.check_width(attn.seq_len())?;
    span.check(layout)?;
    let queries = layout.event_tokens(span.event);
    if queries.is_empty() {
        return Err(LabError::Empty("event text token set"));
    }
    let visual = layout.visual_positions();
    if visual.is_empty() {
        return Err(LabError::Empty("visual token set"));
    }
    let gt = layout.gt_visual(span);

    let mut total = 0.0;
    let mut used = 0;
    for &q in &queries {
        let row = attn.row(q);
        let v_mass: f64 = visual.iter().map(|&k| row[k]).sum();
        if v_mass <= 0.0 {
            continue;
        }
        let gt_mass: f64 = gt.iter().map(|&k| row[k]).sum();
        total += gt_mass / v_mass;
        used += 1;
    }
    if used == 0 {
        return Err(LabError::Undefined(
            "every event row has zero visual mass".into(),
        ));
    }
    Ok(DiscriminabilityRatio {
        value: total / used as f64,
        used_rows: used,
        excluded_rows: queries.len() - used,
    })
}

/// Arithmetic mean of per-head scores over `heads`.
pub fn discriminability_avg(per_head: &BTreeMap<HeadId, f64>, heads: &[HeadId]) -> Result<f64> {
    if heads.is_empty() {
        return Err(LabError::Empty("head set"));
    }
    let mut sum = 0.0;
    for h in heads {
        sum += per_head.get(h).ok_or(LabError::UnknownHead(*h))?;
    }
    Ok(sum / heads.len() as f64)
}

/// Per-head scores together with their average over the selected heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilitySummary {
    pub per_head: BTreeMap<HeadId, f64>,
    pub average: f64,
}

/// Averaged visual attention distribution of an event's text rows: rows
/// are summed first and the sum is normalized once, then smoothed.
pub fn event_distribution(attn: &AttentionRecord, layout: &TokenLayout, event: usize) -> Result<Vec<f64>> {
    layout.check_width(attn.seq_len())?;
    let queries = layout.event_tokens(event);
    if queries.is_empty() {
        return Err(LabError::Empty("event text token set"));
    }
    let visual = layout.visual_positions();
    if visual.is_empty() {
        return Err(LabError::Empty("visual token set"));
    }
    let mut dist = vec![0.0; visual.len()];
    for &q in &queries {
        let row = attn.row(q);
        for (d, &k) in dist.iter_mut().zip(&visual) {
            *d += row[k];
        }
    }
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return Err(LabError::Undefined(format!(
            "event {event} has zero visual mass"
        )));
    }
    for d in dist.iter_mut() {
        *d /= total;
    }
    Ok(smooth(&dist))
}

/// Adds [`KL_SMOOTHING`] to every entry and renormalizes.
pub fn smooth(p: &[f64]) -> Vec<f64> {
    let z: f64 = p.iter().map(|x| x + KL_SMOOTHING).sum();
    p.iter().map(|x| (x + KL_SMOOTHING) / z).collect()
}

/// `KL(p || q) + KL(q || p)` for strictly positive distributions.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::DimensionMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if !(a > 0.0 && b > 0.0) {
            return Err(LabError::InvalidArgument(
                "symmetric KL needs strictly positive distributions".into(),
            ));
        }
        kl += a * (a / b).ln() + b * (b / a).ln();
    }
    Ok(kl.max(0.0))
}

/// Symmetric KL between the averaged visual attention of two events.
pub fn kl_discriminability(
    attn: &AttentionRecord,
    layout: &TokenLayout,
    e1: usize,
    e2: usize,
) -> Result<f64> {
    let p1 = event_distribution(attn, layout, e1)?;
    let p2 = event_distribution(attn, layout, e2)?;
    symmetric_kl(&p1, &p2)
}

/// Mean per-question F1. Answers are single labels, so each F1 is 0 or 1.
pub fn eoj_consistency(per_question_f1: &[f64]) -> Result<f64> {
    if per_question_f1.is_empty() {
        return Err(LabError::Empty("EOJ question list"));
    }
    if per_question_f1.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(LabError::InvalidArgument("F1 outside [0, 1]".into()));
    }
    Ok(mean(per_question_f1).unwrap_or(0.0))
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(LabError::DimensionMismatch(format!(
            "series of length {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(LabError::InvalidArgument(
            "pearson needs at least two points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(LabError::Undefined("pearson of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson coefficient with its two-sided p-value under the null of zero
/// correlation (Student t with `n - 2` degrees of freedom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson_test(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    let r = pearson(xs, ys)?;
    let n = xs.len();
    let p_value = if n < 3 || r.abs() >= 1.0 {
        if r.abs() >= 1.0 {
            0.0
        } else {
            1.0
        }
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| LabError::Undefined(format!("t distribution: {e}")))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { r, p_value, n })
}

pub(crate) fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Column-oriented versions of the per-sample metrics, evaluated over a
/// whole evaluation set at once.
pub mod batch {
    use super::*;

    /// Element-wise IoU over parallel start/end columns.
    pub fn ious(pred_start: &[f64], pred_end: &[f64], gold_start: &[f64], gold_end: &[f64]) -> Result<Vec<f64>> {
        let n = pred_start.len();
        if pred_end.len() != n || gold_start.len() != n || gold_end.len() != n {
            return Err(LabError::DimensionMismatch("IoU columns".into()));
        }
        let inter: Vec<f64> = (0..n)
            .map(|i| (pred_end[i].min(gold_end[i]) - pred_start[i].max(gold_start[i])).max(0.0))
            .collect();
        let union: Vec<f64> = (0..n)
            .map(|i| (pred_end[i] - pred_start[i]) + (gold_end[i] - gold_start[i]) - inter[i])
            .collect();
        Ok((0..n)
            .map(|i| {
                if union[i] > 0.0 {
                    inter[i] / union[i]
                } else if pred_start[i] == gold_start[i] && pred_end[i] == gold_end[i] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn consistency_products(i_ori: &[f64], i_variant: &[f64]) -> Result<Vec<f64>> {
        if i_ori.len() != i_variant.len() {
            return Err(LabError::DimensionMismatch("consistency columns".into()));
        }
        Ok(i_ori.iter().zip(i_variant).map(|(a, b)| a * b).collect())
    }

    /// Recall for several thresholds in one pass over the IoUs.
    pub fn recalls(ious: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
        if ious.is_empty() {
            return Err(LabError::Empty("IoU list"));
        }
        let mut hits = vec![0usize; thresholds.len()];
        for &x in ious {
            for (h, &t) in hits.iter_mut().zip(thresholds) {
                if x > t {
                    *h += 1;
                }
            }
        }
        Ok(hits
            .into_iter()
            .map(|h| 100.0 * h as f64 / ious.len() as f64)
            .collect())
    }

    /// Discriminability ratio of many records that share a layout and span.
    /// Gathers the visual sub-matrix of the event rows once, then reduces
    /// rows with the same summation order as the scalar path.
    pub fn discriminability_ratios(
        records: &[&AttentionRecord],
        layout: &TokenLayout,
        span: &EventSpan,
    ) -> Result<Vec<DiscriminabilityRatio>> {
        span.check(layout)?;
        let queries = layout.event_tokens(span.event);
        if queries.is_empty() {
            return Err(LabError::Empty("event text token set"));
        }
        let visual = layout.visual_positions();
        let gt_mask: Vec<bool> = visual
            .iter()
            .map(|&k| matches!(layout.time_bin(k), Some(b) if span.contains_bin(b)))
            .collect();
        records
            .iter()
            .map(|rec| {
                layout.check_width(rec.seq_len())?;
                // rows × visual keys
                let sub: Vec<Vec<f64>> = queries
                    .iter()
                    .map(|&q| visual.iter().map(|&k| rec.get(q, k)).collect())
                    .collect();
                let v_mass: Vec<f64> = sub.iter().map(|r| r.iter().sum()).collect();
                let gt_mass: Vec<f64> = sub
                    .iter()
                    .map(|r| r.iter().zip(&gt_mask).filter(|(_, &m)| m).map(|(w, _)| w).sum())
                    .collect();
                let ratios: Vec<f64> = v_mass
                    .iter()
                    .zip(&gt_mass)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, g)| g / v)
                    .collect();
                if ratios.is_empty() {
                    return Err(LabError::Undefined(
                        "every event row has zero visual mass".into(),
                    ));
                }
                let total = ratios.iter().fold(0.0, |acc, r| acc + r);
                Ok(DiscriminabilityRatio {
                    value: total / ratios.len() as f64,
                    used_rows: ratios.len(),
                    excluded_rows: queries.len() - ratios.len(),
                })
            })
            .collect()
    }

    /// Mean of each row of a per-sample F1 matrix.
    pub fn eoj_consistencies(f1: &[Vec<f64>]) -> Result<Vec<f64>> {
        f1.iter().map(|row| eoj_consistency(row)).collect()
    }
}
