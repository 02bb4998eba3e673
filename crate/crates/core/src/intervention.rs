//! Causal intervention on attention: selected heads have their event-query
//! rows mixed toward a ground-truth-aligned distribution,
//! `A' = (1 - alpha) A + alpha G`, and the model is run again.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attn::{AttentionCapture, EventSpan, HeadId, TokenLayout, ROW_SUM_TOL};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Uniform over the visual tokens inside the ground-truth span.
    #[default]
    UniformOverGt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub heads: Vec<HeadId>,
    #[serde(default)]
    pub target_kind: TargetKind,
}

impl InterventionConfig {
    pub fn new(alpha: f64, heads: Vec<HeadId>) -> Result<Self> {
        let cfg = InterventionConfig {
            alpha,
            heads,
            target_kind: TargetKind::UniformOverGt,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(LabError::Empty("intervention head list"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LabError::InvalidArgument(format!(
                "alpha = {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Replacement rows for the intervened queries. Queries without a row are
/// left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub width: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

/// For each query, a row uniform over the visual tokens of `span`.
pub fn build_target(layout: &TokenLayout, span: &EventSpan, queries: &[usize]) -> Result<TargetDistribution> {
    if queries.is_empty() {
        return Err(LabError::Empty("intervened query set"));
    }
    let gt = layout.gt_visual(span);
    if gt.is_empty() {
        return Err(LabError::Empty("ground-truth visual token set"));
    }
    let mut row = vec![0.0; layout.len()];
    let w = 1.0 / gt.len() as f64;
    for &k in &gt {
        row[k] = w;
    }
    let mut rows = BTreeMap::new();
    for &q in queries {
        if q >= layout.len() {
            return Err(LabError::DimensionMismatch(format!(
                "query {q} outside a layout of length {}",
                layout.len()
            )));
        }
        rows.insert(q, row.clone());
    }
    Ok(TargetDistribution {
        width: layout.len(),
        rows,
    })
}

/// `row <- (1 - alpha) row + alpha target`, in place.
pub fn mix_row(row: &mut [f64], target: &[f64], alpha: f64) {
    let keep = 1.0 - alpha;
    for (a, &g) in row.iter_mut().zip(target) {
        *a = keep * *a + alpha * g;
    }
}

pub(crate) fn check_target(target: &TargetDistribution, seq_len: usize) -> Result<()> {
    if target.width != seq_len {
        return Err(LabError::DimensionMismatch(format!(
            "target width {} vs capture length {seq_len}",
            target.width
        )));
    }
    for (&q, row) in &target.rows {
        if q >= seq_len || row.len() != seq_len {
            return Err(LabError::DimensionMismatch(format!(
                "target row {q} does not fit a capture of length {seq_len}"
            )));
        }
        if row[q + 1..].iter().any(|&w| w != 0.0) {
            return Err(LabError::InvalidArgument(format!(
                "target row {q} puts mass past the causal prefix"
            )));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(LabError::InvalidArgument(format!(
                "target row {q} is not a distribution"
            )));
        }
    }
    Ok(())
}

/// Mixes the targeted rows of every head in `cfg.heads`. All other rows and
/// heads are copied unchanged.
pub fn apply_intervention(
    capture: &AttentionCapture,
    cfg: &InterventionConfig,
    target: &TargetDistribution,
) -> Result<AttentionCapture> {
    cfg.validate()?;
    check_target(target, capture.seq_len())?;
    let mut out = capture.clone();
    for &h in &cfg.heads {
        let rec = out.get_mut(h)?;
        for (&q, g) in &target.rows {
            mix_row(rec.row_mut(q), g, cfg.alpha);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::AttentionRecord;

    #[test]
    fn target_examples() {
        // 5 keys, all visual, ground truth covers k3 and k4 (bins 2, 3).
        let layout = TokenLayout::video_then_text(5, &[]).unwrap();
        let t = build_target(&layout, &EventSpan::new(0, 2, 3).unwrap(), &[4]).unwrap();
        assert_eq!(t.rows[&4], vec![0.0, 0.0, 0.5, 0.5, 0.0]);

        let layout = TokenLayout::video_then_text(4, &[Some(0)]).unwrap();
        let t = build_target(&layout, &EventSpan::new(0, 0, 3).unwrap(), &[4]).unwrap();
        assert_eq!(t.rows[&4], vec![0.25, 0.25, 0.25, 0.25, 0.0]);

        let t = build_target(&layout, &EventSpan::new(0, 1, 1).unwrap(), &[4]).unwrap();
        assert_eq!(t.rows[&4], vec![0.0, 1.0, 0.0, 0.0, 0.0]);

        assert!(build_target(&layout, &EventSpan::new(0, 5, 6).unwrap(), &[4]).is_err());
        assert!(build_target(&layout, &EventSpan::new(0, 1, 1).unwrap(), &[]).is_err());
    }

    #[test]
    fn mixing_arithmetic() {
        let mut row = vec![0.1, 0.2, 0.3, 0.4];
        mix_row(&mut row, &[0.0, 0.0, 0.5, 0.5], 0.5);
        let expected = [0.05, 0.10, 0.40, 0.45];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn fixture() -> (AttentionCapture, TokenLayout, TargetDistribution) {
        let layout = TokenLayout::video_then_text(3, &[Some(0)]).unwrap();
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.2, 0.3, 0.5, 0.0],
            vec![0.1, 0.2, 0.3, 0.4],
        ];
        let recs = (0..2)
            .map(|h| AttentionRecord::from_rows(HeadId::new(0, h), &rows).unwrap())
            .collect();
        let cap = AttentionCapture::new(1, 2, recs).unwrap();
        let target = build_target(&layout, &EventSpan::new(0, 1, 2).unwrap(), &[3]).unwrap();
        (cap, layout, target)
    }

    #[test]
    fn zero_and_full_intensity() {
        let (cap, _, target) = fixture();
        let h = HeadId::new(0, 1);
        let out = apply_intervention(&cap, &InterventionConfig::new(0.0, vec![h]).unwrap(), &target).unwrap();
        assert_eq!(out, cap);
        let out = apply_intervention(&cap, &InterventionConfig::new(1.0, vec![h]).unwrap(), &target).unwrap();
        assert_eq!(out.get(h).unwrap().row(3), target.rows[&3].as_slice());
        // the other head is untouched
        assert_eq!(out.get(HeadId::new(0, 0)).unwrap(), cap.get(HeadId::new(0, 0)).unwrap());
        out.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let (cap, _, target) = fixture();
        assert!(InterventionConfig::new(0.5, vec![]).is_err());
        assert!(InterventionConfig::new(1.5, vec![HeadId::new(0, 0)]).is_err());
        let cfg = InterventionConfig::new(0.5, vec![HeadId::new(2, 0)]).unwrap();
        assert!(matches!(
            apply_intervention(&cap, &cfg, &target),
            Err(LabError::UnknownHead(_))
        ));
        let narrow = TargetDistribution {
            width: 3,
            rows: target.rows.clone(),
        };
        let cfg = InterventionConfig::new(0.5, vec![HeadId::new(0, 0)]).unwrap();
        assert!(apply_intervention(&cap, &cfg, &narrow).is_err());
        // mass past the causal prefix of query 1
        let mut acausal = target.clone();
        acausal.rows = [(1, vec![0.0, 0.0, 1.0, 0.0])].into();
        assert!(apply_intervention(&cap, &cfg, &acausal).is_err());
    }
}
