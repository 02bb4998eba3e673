mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcas_lab::attn::{
    aggregate_by_timestamp, cross_modal_scores, select_top_heads, AttentionCapture, AttentionRecord, EventSpan, HeadId,
    TokenLayout,
};
use tcas_lab::intervention::{apply_intervention, build_target, InterventionConfig};
use tcas_lab::metrics::{
    consistency_product, discriminability_ratio, iou, kl_discriminability, pearson, symmetric_kl, Interval,
};
use tcas_lab::tcas::{tcas_loss, TcasConfig};

use common::{random_capture, random_rows, simple_layout};

fn interval() -> impl Strategy<Value = Interval> {
    (0.0..50.0f64, 0.0..20.0f64).prop_map(|(s, len)| Interval::new(s, s + len).unwrap())
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n).prop_filter_map("zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

/// Applies `perm` (visual position -> visual position) to the columns of
/// the text rows. Visual rows stay as they are so causality holds.
fn permute_text_columns(rec: &AttentionRecord, layout: &TokenLayout, perm: &[usize]) -> AttentionRecord {
    let n = rec.seq_len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|q| {
            let row = rec.row(q).to_vec();
            if layout.time_bin(q).is_some() {
                return row;
            }
            let mut out = row.clone();
            for (k, &to) in perm.iter().enumerate() {
                out[to] = row[k];
            }
            out
        })
        .collect();
    AttentionRecord::from_rows(rec.head(), &rows).unwrap()
}

fn permute_capture(cap: &AttentionCapture, layout: &TokenLayout, perm: &[usize]) -> AttentionCapture {
    let records = cap
        .records()
        .iter()
        .map(|r| permute_text_columns(r, layout, perm))
        .collect();
    AttentionCapture::new(cap.layers(), cap.heads_per_layer(), records).unwrap()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = iou(a, b);
        prop_assert_eq!(x, iou(b, a));
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn consistency_product_is_below_both_factors(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let c = consistency_product(a, b);
        prop_assert!(c <= a.min(b));
        prop_assert!(c >= 0.0);
    }

    #[test]
    fn pearson_is_affine_invariant(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..40),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread(&xs) > 0.1 && spread(&ys) > 0.1);
        let r = pearson(&xs, &ys).unwrap();
        let xt: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let yt: Vec<f64> = ys.iter().map(|y| scale * y - shift).collect();
        prop_assert!((pearson(&xt, &ys).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&xs, &yt).unwrap() - r).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative(p in distribution(6), q in distribution(6)) {
        let a = symmetric_kl(&p, &q).unwrap();
        prop_assert_eq!(a, symmetric_kl(&q, &p).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert!(symmetric_kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn discriminability_ignores_membership_preserving_permutations(
        seed in any::<u64>(),
        start in 0usize..8,
        len in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = simple_layout(10, 4);
        let span = EventSpan::new(0, start, (start + len - 1).min(9)).unwrap();
        let rec = AttentionRecord::from_rows(HeadId::new(0, 0), &random_rows(&mut rng, 14, 1.0)).unwrap();
        let mut inside: Vec<usize> = (span.start_bin..=span.end_bin).collect();
        let mut outside: Vec<usize> = (0..10).filter(|b| !span.contains_bin(*b)).collect();
        let (a, b) = (inside.clone(), outside.clone());
        inside.shuffle(&mut rng);
        outside.shuffle(&mut rng);
        let mut perm: Vec<usize> = (0..10).collect();
        for (from, to) in a.iter().zip(&inside).chain(b.iter().zip(&outside)) {
            perm[*from] = *to;
        }
        let moved = permute_text_columns(&rec, &layout, &perm);
        let x = discriminability_ratio(&rec, &layout, &span).unwrap();
        let y = discriminability_ratio(&moved, &layout, &span).unwrap();
        prop_assert!((x.value - y.value).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x.value));
    }

    #[test]
    fn kl_discriminability_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::video_then_text(8, &[None, Some(0), Some(0), Some(1), Some(1)]).unwrap();
        let rec = AttentionRecord::from_rows(HeadId::new(0, 0), &random_rows(&mut rng, 13, 2.0)).unwrap();
        let a = kl_discriminability(&rec, &layout, 0, 1).unwrap();
        let b = kl_discriminability(&rec, &layout, 1, 0).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(kl_discriminability(&rec, &layout, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_conserves_visual_mass(seed in any::<u64>(), bins in 2usize..10, per_bin in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = bins * per_bin;
        let n = nv + 3;
        let mut roles = vec![tcas_lab::attn::Role::Visual; nv];
        roles.resize(n, tcas_lab::attn::Role::Text);
        let mut time_bin: Vec<Option<usize>> = (0..nv).map(|k| Some(k % bins)).collect();
        time_bin.resize(n, None);
        let layout = TokenLayout::new(roles, time_bin, vec![None; n], bins).unwrap();
        let rows = random_rows(&mut rng, n, 1.5);
        for row in &rows[nv..] {
            let agg = aggregate_by_timestamp(row, &layout).unwrap();
            let direct: f64 = row[..nv].iter().sum();
            prop_assert_eq!(agg.len(), bins);
            prop_assert!((agg.iter().sum::<f64>() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_modal_scores_are_bounded_and_selection_is_stable(seed in any::<u64>(), t in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = simple_layout(6, 4);
        let cap = random_capture(&mut rng, 2, 3, 10, 1.0);
        let table = cross_modal_scores(&cap, &layout).unwrap();
        prop_assert_eq!(table.len(), 6);
        prop_assert!(table.scores.values().all(|s| (0.0..=1.0 + 1e-12).contains(s)));
        let a = select_top_heads(&table, t).unwrap();
        prop_assert_eq!(&a, &select_top_heads(&table.clone(), t).unwrap());
        for w in a.windows(2) {
            prop_assert!(table.get(w[0]).unwrap() >= table.get(w[1]).unwrap());
        }
    }

    #[test]
    fn sharpening_loss_ignores_bin_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = simple_layout(12, 8);
        let cap = random_capture(&mut rng, 1, 5, 20, 3.0);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let moved = permute_capture(&cap, &layout, &perm);
        let cfg = TcasConfig { t: 3, ..TcasConfig::default() };
        let (a, da) = tcas_loss(&cap, &layout, &cfg).unwrap();
        let (b, db) = tcas_loss(&moved, &layout, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        prop_assert_eq!(da.total_valid(), db.total_valid());
    }

    #[test]
    fn sharpening_loss_grows_with_margin(seed in any::<u64>(), m1 in 0.01..1.0f64, dm in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = simple_layout(12, 8);
        let cap = random_capture(&mut rng, 1, 5, 20, 3.0);
        let at = |m: f64| tcas_loss(&cap, &layout, &TcasConfig { t: 3, m, ..TcasConfig::default() }).unwrap().0;
        let (lo, hi) = (at(m1), at(m1 + dm));
        prop_assert!(lo >= 0.0);
        prop_assert!(hi >= lo, "m {} -> {}, m {} -> {}", m1, lo, m1 + dm, hi);
    }

    #[test]
    fn intervention_touches_only_selected_heads_and_rows(seed in any::<u64>(), alpha in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = simple_layout(8, 4);
        let cap = random_capture(&mut rng, 2, 2, 12, 1.0);
        let span = EventSpan::new(0, 2, 4).unwrap();
        let queries = layout.event_tokens(0);
        let target = build_target(&layout, &span, &queries).unwrap();
        let heads = vec![HeadId::new(1, 0)];
        let out = apply_intervention(&cap, &InterventionConfig::new(alpha, heads.clone()).unwrap(), &target).unwrap();
        out.validate().unwrap();
        for rec in cap.records() {
            let new = out.get(rec.head()).unwrap();
            for q in 0..12 {
                if !heads.contains(&rec.head()) || !queries.contains(&q) {
                    prop_assert_eq!(rec.row(q), new.row(q));
                }
            }
        }
    }
}
