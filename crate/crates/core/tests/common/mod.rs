#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tcas_lab::attn::{AttentionCapture, AttentionRecord, HeadId, TokenLayout};

/// Random causal row-stochastic matrix, rows normalized over `0..=q`.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, peak: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|q| {
            let mut row = vec![0.0; n];
            for w in row.iter_mut().take(q + 1) {
                let u: f64 = rng.gen_range(0.01..1.0);
                *w = u.powf(peak);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
            row
        })
        .collect()
}

pub fn random_capture(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize, peak: f64) -> AttentionCapture {
    let records = (0..layers)
        .flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h)))
        .map(|h| AttentionRecord::from_rows(h, &random_rows(rng, n, peak)).unwrap())
        .collect();
    AttentionCapture::new(layers, heads, records).unwrap()
}

/// `bins` visual tokens followed by `text` tokens; the first text token is
/// untagged, the rest belong to event 0.
pub fn simple_layout(bins: usize, text: usize) -> TokenLayout {
    let mut events = vec![None];
    events.extend(std::iter::repeat_n(Some(0), text - 1));
    TokenLayout::video_then_text(bins, &events).unwrap()
}

use rand::SeedableRng;
use tcas_lab::metrics::{
    batch, consistency_product, discriminability_ratio, eoj_consistency, iou, recall_at, Interval,
};
use tcas_lab::synth::{generate_sample, GroundingSample, Relation, SynthSpec, Variant, Vocab};

/// Compares every column-oriented metric with its per-sample counterpart
/// on `n` random samples. Returns the number of values compared.
pub fn batch_matches_scalar(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SynthSpec::default();
    let vocab = spec.vocab();
    let mut compared = 0;
    let same = |what: &str, i: usize, a: f64, b: f64| {
        if a.to_bits() == b.to_bits() {
            Ok(())
        } else {
            Err(format!("{what} differs at sample {i}: {a:e} vs {b:e}"))
        }
    };

    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut i_var = Vec::new();
    let mut f1 = Vec::new();
    for i in 0..n {
        let s = generate_sample(&spec, i).map_err(|e| e.to_string())?;
        let a = rng.gen_range(0..spec.num_bins);
        let b = rng.gen_range(a..spec.num_bins);
        cols[0].push(a as f64);
        cols[1].push((b + 1) as f64);
        cols[2].push(s.original.start_bin as f64);
        cols[3].push((s.original.end_bin + 1) as f64);
        i_var.push(rng.gen_range(0.0..=1.0));
        f1.push((0..8).map(|_| f64::from(rng.gen_range(0..2u8))).collect::<Vec<f64>>());

        // one capture per sample, every head compared
        let prompt = s.grounding_prompt(&vocab, Variant::Original, &[]).map_err(|e| e.to_string())?;
        let cap = random_capture(&mut rng, 2, 3, prompt.layout.len(), 2.0);
        let span = s.query_span(Variant::Original);
        let recs: Vec<&AttentionRecord> = cap.records().iter().collect();
        let fast = batch::discriminability_ratios(&recs, &prompt.layout, &span).map_err(|e| e.to_string())?;
        for (rec, f) in recs.iter().zip(&fast) {
            let slow = discriminability_ratio(rec, &prompt.layout, &span).map_err(|e| e.to_string())?;
            same("discriminability", i, slow.value, f.value)?;
            if (slow.used_rows, slow.excluded_rows) != (f.used_rows, f.excluded_rows) {
                return Err(format!("row counts differ at sample {i}"));
            }
            compared += 1;
        }
    }

    let ious = batch::ious(&cols[0], &cols[1], &cols[2], &cols[3]).map_err(|e| e.to_string())?;
    for i in 0..n {
        let p = Interval::new(cols[0][i], cols[1][i]).map_err(|e| e.to_string())?;
        let g = Interval::new(cols[2][i], cols[3][i]).map_err(|e| e.to_string())?;
        same("iou", i, iou(p, g), ious[i])?;
    }
    let prods = batch::consistency_products(&ious, &i_var).map_err(|e| e.to_string())?;
    for i in 0..n {
        same("consistency", i, consistency_product(ious[i], i_var[i]), prods[i])?;
    }
    let thresholds = [0.3, 0.5, 0.7];
    let recalls = batch::recalls(&ious, &thresholds).map_err(|e| e.to_string())?;
    for (t, r) in thresholds.iter().zip(&recalls) {
        same("recall", 0, recall_at(&ious, *t).map_err(|e| e.to_string())?, *r)?;
    }
    let eoj = batch::eoj_consistencies(&f1).map_err(|e| e.to_string())?;
    for i in 0..n {
        same("eoj", i, eoj_consistency(&f1[i]).map_err(|e| e.to_string())?, eoj[i])?;
    }
    Ok(compared + 3 * n + thresholds.len() + n)
}

/// Class named by a descriptor pair, found by trying every class/template.
fn class_of(vocab: &Vocab, desc: &[usize]) -> Option<usize> {
    (1..=vocab.num_classes)
        .find(|&c| (0..vocab.num_templates).any(|t| vocab.descriptor(c, t)[..] == desc[..]))
}

/// Bins of `video` showing visual class `class`, as an inclusive range, if
/// they form one contiguous run.
fn scan(vocab: &Vocab, video_tokens: &[usize], class: usize) -> Option<(usize, usize)> {
    let hits: Vec<usize> = (0..video_tokens.len())
        .filter(|&b| video_tokens[b] == vocab.visual(class))
        .collect();
    let (&a, &b) = (hits.first()?, hits.last()?);
    (b - a + 1 == hits.len()).then_some((a, b))
}

/// Re-derives every gold span and event-order answer of a sample from its
/// tokens alone.
pub fn oracle_check(vocab: &Vocab, s: &GroundingSample) -> Result<(), String> {
    let tokens = |v: &[usize]| v.iter().map(|&c| vocab.visual(c)).collect::<Vec<usize>>();
    let video = tokens(&s.video);
    let shifted = tokens(&s.shifted.video);
    let check = |name: &str, vid: &[usize], query: &[usize], gold: (usize, usize)| {
        let class = class_of(vocab, &query[1..]).ok_or(format!("{name}: unknown descriptor"))?;
        match scan(vocab, vid, class) {
            Some(span) if span == gold => Ok(()),
            other => Err(format!("sample {} {name}: oracle {other:?}, gold {gold:?}", s.index)),
        }
    };
    check("original", &video, &s.original.tokens, (s.original.start_bin, s.original.end_bin))?;
    check("rephrased", &video, &s.rephrased.tokens, (s.rephrased.start_bin, s.rephrased.end_bin))?;
    check("shifted", &shifted, &s.shifted.tokens, (s.shifted.start_bin, s.shifted.end_bin))?;
    for q in s.eoj.iter().flatten() {
        let a = class_of(vocab, &q.tokens[1..3]).ok_or("eoj: unknown descriptor")?;
        let b = class_of(vocab, &q.tokens[3..5]).ok_or("eoj: unknown descriptor")?;
        let (sa, sb) = (scan(vocab, &video, a).ok_or("eoj: event missing")?, scan(vocab, &video, b).ok_or("eoj: event missing")?);
        let want = match q.relation {
            Relation::Before => sa.1 < sb.0,
            Relation::After => sa.0 > sb.1,
        };
        if want != q.answer {
            return Err(format!("sample {} eoj {:?}: oracle {want}", s.index, q.relation));
        }
    }
    Ok(())
}

use tcas_lab::model::{init_model, ModelState, OptimizerKind, ToyModelConfig, TrainItem};
use tcas_lab::tcas::{tcas_loss, tcas_loss_and_grad, tcas_structure, TcasConfig, TcasStructure};

pub const EPS: f64 = 1e-5;

/// Small model with a mixed batch. `scale` multiplies the initial weights;
/// larger values give peakier attention and so more valid tokens.
pub fn grad_setup(seed: u64, scale: f64) -> (ModelState, Vec<TrainItem>) {
    let spec = SynthSpec {
        num_bins: 6,
        max_event_len: 2,
        min_event_len: 1,
        seed,
        ..SynthSpec::default()
    };
    let vocab = spec.vocab();
    let cfg = ToyModelConfig {
        layers: 2,
        heads_per_layer: 2,
        model_dim: 8,
        mlp_dim: 12,
        vocab_size: vocab.size(),
        max_bins: spec.num_bins,
        seed,
        optimizer: OptimizerKind::Adam,
    };
    let mut state = init_model(&cfg).unwrap();
    state.params_mut().iter_mut().for_each(|p| *p *= scale);
    let s0 = generate_sample(&spec, 0).unwrap();
    let s1 = generate_sample(&spec, 1).unwrap();
    let batch = vec![
        TrainItem::grounding(&s0, &vocab, Variant::Original).unwrap(),
        TrainItem::grounding(&s1, &vocab, Variant::Shifted).unwrap(),
        TrainItem::eoj(&s0, &vocab, 3).unwrap(),
    ];
    (state, batch)
}

fn structures(state: &ModelState, batch: &[TrainItem], cfg: &TcasConfig) -> Vec<TcasStructure> {
    batch
        .iter()
        .map(|item| {
            let out = state.forward(&item.tokens, &item.layout).unwrap();
            tcas_structure(&out.capture, &item.layout, cfg).unwrap()
        })
        .collect()
}

pub struct FdResult {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Checked coordinates with a nonzero analytic gradient.
    pub nonzero: usize,
}

/// Five-point central differences of the total loss against the analytic
/// gradient at `coords` (all parameters when `None`). Coordinates whose
/// perturbation changes a head choice, bin partition or extreme bin are
/// skipped.
pub fn model_fd(state: &ModelState, batch: &[TrainItem], cfg: &TcasConfig, coords: Option<&[usize]>) -> FdResult {
    let (_, grad) = state.batch_loss_and_grad(batch, cfg).unwrap();
    let base = structures(state, batch, cfg);
    let all: Vec<usize> = (0..state.num_params()).collect();
    let mut r = FdResult { worst: 0.0, checked: 0, skipped: 0, nonzero: 0 };
    for &i in coords.unwrap_or(&all) {
        let moved: Vec<ModelState> = [-2.0, -1.0, 1.0, 2.0]
            .iter()
            .map(|k| {
                let mut s = state.clone();
                s.params_mut()[i] += k * EPS;
                s
            })
            .collect();
        if cfg.w_ae > 0.0 && moved.iter().any(|s| structures(s, batch, cfg) != base) {
            r.skipped += 1;
            continue;
        }
        let f: Vec<f64> = moved.iter().map(|s| s.batch_loss(batch, cfg).unwrap().total).collect();
        let fd = (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * EPS);
        let a = grad[i];
        r.worst = r.worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-5));
        r.checked += 1;
        r.nonzero += usize::from(a != 0.0);
    }
    r
}

/// Random 5-head capture over 12 bins and 8 text queries, checked against
/// central differences of the sharpening loss. Each probe moves `EPS` of
/// mass from the row's largest text entry to a visual key, which keeps the
/// row a distribution; text keys carry no gradient, so the directional
/// difference isolates one visual entry.
pub fn attention_fd(seed: u64) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = simple_layout(12, 8);
    let n = layout.len();
    let cap = random_capture(&mut rng, 1, 5, n, 3.0);
    let cfg = TcasConfig { t: 3, ..TcasConfig::default() };
    let (_, _, grad) = tcas_loss_and_grad(&cap, &layout, &cfg).unwrap();
    let base = tcas_structure(&cap, &layout, &cfg).unwrap();
    let mut r = FdResult { worst: 0.0, checked: 0, skipped: 0, nonzero: 0 };
    let donor = |rec: &AttentionRecord, q: usize| (12..=q).max_by(|&a, &b| rec.get(q, a).total_cmp(&rec.get(q, b))).unwrap();
    let nudged = |head: HeadId, q: usize, k: usize, d: f64| {
        let records = cap
            .records()
            .iter()
            .map(|rec| {
                let mut rows: Vec<Vec<f64>> = (0..n).map(|i| rec.row(i).to_vec()).collect();
                if rec.head() == head {
                    let j = donor(rec, q);
                    rows[q][k] += d;
                    rows[q][j] -= d;
                }
                AttentionRecord::from_rows(rec.head(), &rows).unwrap()
            })
            .collect();
        AttentionCapture::new(1, 5, records).unwrap()
    };
    for rec in cap.records() {
        for q in 12..n {
            for k in 0..12 {
                // the minus probe would leave the simplex
                if rec.get(q, k).min(rec.get(q, donor(rec, q))) < 2.0 * EPS {
                    r.skipped += 1;
                    continue;
                }
                let (p, m) = (nudged(rec.head(), q, k, EPS), nudged(rec.head(), q, k, -EPS));
                if tcas_structure(&p, &layout, &cfg).unwrap() != base || tcas_structure(&m, &layout, &cfg).unwrap() != base {
                    r.skipped += 1;
                    continue;
                }
                let fd = (tcas_loss(&p, &layout, &cfg).unwrap().0 - tcas_loss(&m, &layout, &cfg).unwrap().0) / (2.0 * EPS);
                let a = grad.get(rec.head(), q, k) - grad.get(rec.head(), q, donor(rec, q));
                r.worst = r.worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                r.checked += 1;
                r.nonzero += usize::from(a != 0.0);
            }
        }
    }
    r
}
