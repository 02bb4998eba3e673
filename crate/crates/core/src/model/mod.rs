//! Miniature decoder-only transformer over timestamped visual tokens and
//! text queries.
//!
//! Pre-norm blocks (RMSNorm, causal multi-head attention, GELU MLP) with
//! learned token and position embeddings and an untied output projection.
//! Everything runs in `f64` with hand-written backpropagation, so the
//! attention weights captured on the forward pass are exactly the ones the
//! gradient flows through.

mod checkpoint;
mod eval;
mod ops;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionCapture, AttentionRecord, HeadId, TokenLayout};
use crate::error::{LabError, Result};
use crate::intervention::{check_target, mix_row, InterventionConfig, TargetDistribution};
use crate::synth::{SynthSpec, MAX_TEXT_TOKENS};
use crate::tcas::AttentionGradient;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use eval::{
    evaluate, evaluate_with, Decoded, DiscHeads, EvalBundle, EvalOptions, GroundingMetrics, SampleRecord,
};
pub use train::{train, train_step, TrainItem, TrainSchedule, TrainStepReport};

const RMS_EPS: f64 = 1e-6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads_per_layer: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_bins: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        let spec = SynthSpec::default();
        ToyModelConfig {
            layers: 4,
            heads_per_layer: 4,
            model_dim: 64,
            mlp_dim: 128,
            vocab_size: spec.vocab().size(),
            max_bins: spec.num_bins,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads_per_layer", self.heads_per_layer),
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_bins", self.max_bins),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::Config(format!("model.{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads_per_layer) {
            return Err(LabError::Config(format!(
                "model_dim {} is not divisible by heads_per_layer {}",
                self.model_dim, self.heads_per_layer
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads_per_layer
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_bins + MAX_TEXT_TOKENS
    }

    pub fn num_heads(&self) -> usize {
        self.layers * self.heads_per_layer
    }

    pub fn heads(&self) -> Vec<HeadId> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads_per_layer).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct ParamLayout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf: usize,
    w_out: usize,
    total: usize,
}

/// What an offset points at, for initialization.
#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

impl ParamLayout {
    fn new(cfg: &ToyModelConfig) -> (Self, Vec<(usize, usize, Init)>) {
        let d = cfg.model_dim;
        let f = cfg.mlp_dim;
        let mut blocks = Vec::new();
        let mut at = 0;
        let mut take = |len: usize, init: Init| {
            let off = at;
            blocks.push((off, len, init));
            at += len;
            off
        };
        let tok_emb = take(cfg.vocab_size * d, Init::Uniform);
        let pos_emb = take(cfg.max_seq_len() * d, Init::Uniform);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerOffsets {
                ln1: take(d, Init::Ones),
                wq: take(d * d, Init::Uniform),
                wk: take(d * d, Init::Uniform),
                wv: take(d * d, Init::Uniform),
                wo: take(d * d, Init::Uniform),
                ln2: take(d, Init::Ones),
                w1: take(d * f, Init::Uniform),
                b1: take(f, Init::Zeros),
                w2: take(f * d, Init::Uniform),
                b2: take(d, Init::Zeros),
            });
        }
        let lnf = take(d, Init::Ones);
        let w_out = take(d * cfg.vocab_size, Init::Uniform);
        let total = at;
        (
            ParamLayout {
                tok_emb,
                pos_emb,
                layers,
                lnf,
                w_out,
                total,
            },
            blocks,
        )
    }
}

/// Trainable parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    cfg: ToyModelConfig,
    offsets: ParamLayout,
    params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

/// Deterministic initialization: matrices and embeddings uniform in
/// `[-1/sqrt(d), 1/sqrt(d)]`, norm gains 1, biases 0.
pub fn init_model(cfg: &ToyModelConfig) -> Result<ModelState> {
    cfg.validate()?;
    let (offsets, blocks) = ParamLayout::new(cfg);
    let mut params = vec![0.0; offsets.total];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.model_dim as f64).sqrt();
    for (off, len, init) in blocks {
        let slot = &mut params[off..off + len];
        match init {
            Init::Uniform => slot.iter_mut().for_each(|p| *p = rng.gen_range(-scale..scale)),
            Init::Ones => slot.fill(1.0),
            Init::Zeros => {}
        }
    }
    let n = params.len();
    Ok(ModelState {
        cfg: cfg.clone(),
        offsets,
        params,
        adam_m: vec![0.0; n],
        adam_v: vec![0.0; n],
        step: 0,
    })
}

/// Logits and attention of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Row-major `seq_len × vocab_size`.
    pub logits: Vec<f64>,
    pub capture: AttentionCapture,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize, vocab_size: usize) -> &[f64] {
        &self.logits[pos * vocab_size..(pos + 1) * vocab_size]
    }
}

/// Post-softmax override applied to selected heads during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOverride<'a> {
    pub cfg: &'a InterventionConfig,
    pub target: &'a TargetDistribution,
}

struct LayerCache {
    x_in: Vec<f64>,
    h1: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `n × n`.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    x1: Vec<f64>,
    h2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hf: Vec<f64>,
    rf: Vec<f64>,
}

impl ModelState {
    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Mutable parameter access, for perturbation-based checks.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Causal forward pass returning logits and every head's attention.
    pub fn forward(&self, tokens: &[usize], layout: &TokenLayout) -> Result<ForwardOutput> {
        layout.check_width(tokens.len())?;
        self.run(tokens, None, false).map(|(out, _)| out)
    }

    /// Forward pass in which the heads of `ov.cfg` consume mixed attention
    /// rows. The returned capture holds the mixed rows.
    pub fn forward_with_override(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        ov: AttentionOverride<'_>,
    ) -> Result<ForwardOutput> {
        layout.check_width(tokens.len())?;
        ov.cfg.validate()?;
        check_target(ov.target, tokens.len())?;
        for h in &ov.cfg.heads {
            if h.layer >= self.cfg.layers || h.head >= self.cfg.heads_per_layer {
                return Err(LabError::UnknownHead(*h));
            }
        }
        self.run(tokens, Some(ov), false).map(|(out, _)| out)
    }

    pub(crate) fn run(
        &self,
        tokens: &[usize],
        ov: Option<AttentionOverride<'_>>,
        keep_cache: bool,
    ) -> Result<(ForwardOutput, Option<ForwardCache>)> {
        let cfg = &self.cfg;
        let n = tokens.len();
        if n == 0 {
            return Err(LabError::Empty("token sequence"));
        }
        if n > cfg.max_seq_len() {
            return Err(LabError::InvalidArgument(format!(
                "sequence of length {n} exceeds the maximum {}",
                cfg.max_seq_len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(LabError::InvalidArgument(format!(
                "token {t} outside a vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.model_dim;
        let f = cfg.mlp_dim;
        let nh = cfg.heads_per_layer;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let o = &self.offsets;

        let mut x = vec![0.0; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.slice(o.tok_emb + t * d, d);
            let pe = self.slice(o.pos_emb + i * d, d);
            for c in 0..d {
                x[i * d + c] = te[c] + pe[c];
            }
        }

        let mut records = Vec::with_capacity(cfg.num_heads());
        let mut caches = Vec::new();
        for (l, lo) in o.layers.iter().enumerate() {
            let (h1, r1) = ops::rmsnorm(&x, self.slice(lo.ln1, d), n, d);
            let q = ops::matmul(&h1, self.slice(lo.wq, d * d), n, d, d);
            let k = ops::matmul(&h1, self.slice(lo.wk, d * d), n, d, d);
            let v = ops::matmul(&h1, self.slice(lo.wv, d * d), n, d, d);
            let mut ctx = vec![0.0; n * d];
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let head = HeadId::new(l, h);
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let mut s = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            s += q[i * d + c] * k[j * d + c];
                        }
                        row[j] = s * scale;
                        max = max.max(row[j]);
                    }
                    let mut z = 0.0;
                    for w in row.iter_mut().take(i + 1) {
                        *w = (*w - max).exp();
                        z += *w;
                    }
                    for w in row.iter_mut().take(i + 1) {
                        *w /= z;
                    }
                }
                if let Some(ov) = ov {
                    if ov.cfg.heads.contains(&head) {
                        for (&qi, g) in &ov.target.rows {
                            mix_row(&mut p[qi * n..(qi + 1) * n], g, ov.cfg.alpha);
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..=i {
                        let w = p[i * n + j];
                        for c in h * dh..(h + 1) * dh {
                            ctx[i * d + c] += w * v[j * d + c];
                        }
                    }
                }
                records.push(AttentionRecord::from_raw(head, n, p.clone()));
                probs.push(p);
            }
            let ao = ops::matmul(&ctx, self.slice(lo.wo, d * d), n, d, d);
            let mut x1 = x.clone();
            ops::add_assign(&mut x1, &ao);
            let (h2, r2) = ops::rmsnorm(&x1, self.slice(lo.ln2, d), n, d);
            let mut u = ops::matmul(&h2, self.slice(lo.w1, d * f), n, d, f);
            ops::add_bias(&mut u, self.slice(lo.b1, f), n, f);
            let a: Vec<f64> = u.iter().map(|&z| ops::gelu(z)).collect();
            let mut mo = ops::matmul(&a, self.slice(lo.w2, f * d), n, f, d);
            ops::add_bias(&mut mo, self.slice(lo.b2, d), n, d);
            let mut x2 = x1.clone();
            ops::add_assign(&mut x2, &mo);
            if keep_cache {
                caches.push(LayerCache {
                    x_in: x,
                    h1,
                    r1,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    x1,
                    h2,
                    r2,
                    u,
                    a,
                });
            }
            x = x2;
        }
        let (hf, rf) = ops::rmsnorm(&x, self.slice(o.lnf, d), n, d);
        let logits = ops::matmul(&hf, self.slice(o.w_out, d * cfg.vocab_size), n, d, cfg.vocab_size);
        let capture = AttentionCapture::from_parts_unchecked(cfg.layers, nh, records);
        let cache = keep_cache.then(|| ForwardCache {
            tokens: tokens.to_vec(),
            layers: caches,
            x_final: x,
            hf,
            rf,
        });
        Ok((ForwardOutput { logits, capture }, cache))
    }

    /// Backpropagates `d_logits` (and an optional direct gradient on the
    /// attention weights) through a cached forward pass, accumulating into
    /// `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        d_attn: Option<&AttentionGradient>,
        grads: &mut [f64],
    ) {
        let cfg = &self.cfg;
        let n = cache.tokens.len();
        let d = cfg.model_dim;
        let f = cfg.mlp_dim;
        let vsz = cfg.vocab_size;
        let nh = cfg.heads_per_layer;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let o = &self.offsets;

        ops::matmul_at_b_acc(&cache.hf, d_logits, n, d, vsz, &mut grads[o.w_out..o.w_out + d * vsz]);
        let d_hf = ops::matmul_a_bt(d_logits, self.slice(o.w_out, d * vsz), n, vsz, d);
        let mut dx = vec![0.0; n * d];
        ops::rmsnorm_backward(
            &cache.x_final,
            self.slice(o.lnf, d),
            &cache.rf,
            &d_hf,
            n,
            d,
            &mut dx,
            &mut grads[o.lnf..o.lnf + d],
        );

        for (l, lo) in o.layers.iter().enumerate().rev() {
            let c = &cache.layers[l];
            // x2 = x1 + mlp(norm(x1))
            let d_mo = &dx;
            ops::col_sum_acc(d_mo, n, d, &mut grads[lo.b2..lo.b2 + d]);
            ops::matmul_at_b_acc(&c.a, d_mo, n, f, d, &mut grads[lo.w2..lo.w2 + f * d]);
            let d_a = ops::matmul_a_bt(d_mo, self.slice(lo.w2, f * d), n, d, f);
            let d_u: Vec<f64> = d_a.iter().zip(&c.u).map(|(g, &z)| g * ops::gelu_grad(z)).collect();
            ops::col_sum_acc(&d_u, n, f, &mut grads[lo.b1..lo.b1 + f]);
            ops::matmul_at_b_acc(&c.h2, &d_u, n, d, f, &mut grads[lo.w1..lo.w1 + d * f]);
            let d_h2 = ops::matmul_a_bt(&d_u, self.slice(lo.w1, d * f), n, f, d);
            let mut d_x1 = dx.clone();
            ops::rmsnorm_backward(
                &c.x1,
                self.slice(lo.ln2, d),
                &c.r2,
                &d_h2,
                n,
                d,
                &mut d_x1,
                &mut grads[lo.ln2..lo.ln2 + d],
            );

            // x1 = x_in + attn(norm(x_in))
            ops::matmul_at_b_acc(&c.ctx, &d_x1, n, d, d, &mut grads[lo.wo..lo.wo + d * d]);
            let d_ctx = ops::matmul_a_bt(&d_x1, self.slice(lo.wo, d * d), n, d, d);
            let mut d_q = vec![0.0; n * d];
            let mut d_k = vec![0.0; n * d];
            let mut d_v = vec![0.0; n * d];
            for h in 0..nh {
                let p = &c.probs[h];
                let extra = d_attn.and_then(|g| g.per_head.get(&HeadId::new(l, h)));
                let cols = h * dh..(h + 1) * dh;
                let mut d_p = vec![0.0; n];
                for i in 0..n {
                    for j in 0..=i {
                        let mut s = 0.0;
                        for col in cols.clone() {
                            s += d_ctx[i * d + col] * c.v[j * d + col];
                        }
                        if let Some(e) = extra {
                            s += e[i * n + j];
                        }
                        d_p[j] = s;
                        let w = p[i * n + j];
                        for col in cols.clone() {
                            d_v[j * d + col] += w * d_ctx[i * d + col];
                        }
                    }
                    let dot: f64 = (0..=i).map(|j| p[i * n + j] * d_p[j]).sum();
                    for j in 0..=i {
                        let ds = p[i * n + j] * (d_p[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for col in cols.clone() {
                            d_q[i * d + col] += ds * c.k[j * d + col];
                            d_k[j * d + col] += ds * c.q[i * d + col];
                        }
                    }
                }
            }
            ops::matmul_at_b_acc(&c.h1, &d_q, n, d, d, &mut grads[lo.wq..lo.wq + d * d]);
            ops::matmul_at_b_acc(&c.h1, &d_k, n, d, d, &mut grads[lo.wk..lo.wk + d * d]);
            ops::matmul_at_b_acc(&c.h1, &d_v, n, d, d, &mut grads[lo.wv..lo.wv + d * d]);
            let mut d_h1 = ops::matmul_a_bt(&d_q, self.slice(lo.wq, d * d), n, d, d);
            ops::add_assign(&mut d_h1, &ops::matmul_a_bt(&d_k, self.slice(lo.wk, d * d), n, d, d));
            ops::add_assign(&mut d_h1, &ops::matmul_a_bt(&d_v, self.slice(lo.wv, d * d), n, d, d));
            let mut d_in = d_x1.clone();
            ops::rmsnorm_backward(
                &c.x_in,
                self.slice(lo.ln1, d),
                &c.r1,
                &d_h1,
                n,
                d,
                &mut d_in,
                &mut grads[lo.ln1..lo.ln1 + d],
            );
            dx = d_in;
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            for c in 0..d {
                grads[o.tok_emb + t * d + c] += dx[i * d + c];
                grads[o.pos_emb + i * d + c] += dx[i * d + c];
            }
        }
    }

    /// One optimizer update with gradient `grads` at learning rate `lr`.
    pub(crate) fn apply_update(&mut self, grads: &[f64], lr: f64) {
        self.step += 1;
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in self.params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..self.params.len() {
                    let g = grads[i];
                    self.adam_m[i] = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
                    self.adam_v[i] = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.adam_m[i] / bc1;
                    let v_hat = self.adam_v[i] / bc2;
                    self.params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::ROW_SUM_TOL;
    use crate::synth::{generate_sample, Variant};

    fn small_cfg() -> ToyModelConfig {
        let spec = SynthSpec::default();
        ToyModelConfig {
            layers: 2,
            heads_per_layer: 2,
            model_dim: 16,
            mlp_dim: 32,
            vocab_size: spec.vocab().size(),
            max_bins: spec.num_bins,
            seed: 3,
            optimizer: OptimizerKind::Adam,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = ToyModelConfig { seed: 4, ..cfg };
        assert_ne!(init_model(&small_cfg()).unwrap().params, init_model(&other).unwrap().params);
    }

    #[test]
    fn init_rejects_bad_dims() {
        let cfg = ToyModelConfig {
            model_dim: 18,
            heads_per_layer: 4,
            ..small_cfg()
        };
        assert!(matches!(init_model(&cfg), Err(LabError::Config(_))));
        let cfg = ToyModelConfig {
            layers: 0,
            ..small_cfg()
        };
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn init_scale() {
        let cfg = small_cfg();
        let m = init_model(&cfg).unwrap();
        let bound = 1.0 / (cfg.model_dim as f64).sqrt();
        assert!(m.params.iter().all(|p| p.abs() <= bound || *p == 1.0));
    }

    #[test]
    fn forward_shapes_and_stochastic_capture() {
        let spec = SynthSpec::default();
        let cfg = small_cfg();
        let m = init_model(&cfg).unwrap();
        let s = generate_sample(&spec, 0).unwrap();
        let p = s.grounding_prompt(&spec.vocab(), Variant::Original, &[3]).unwrap();
        let out = m.forward(&p.tokens, &p.layout).unwrap();
        assert_eq!(out.logits.len(), p.tokens.len() * cfg.vocab_size);
        assert!(out.logits.iter().all(|x| x.is_finite()));
        assert_eq!(out.capture.num_heads(), 4);
        for rec in out.capture.records() {
            for q in 0..rec.seq_len() {
                let sum: f64 = rec.row(q).iter().sum();
                assert!((sum - 1.0).abs() < ROW_SUM_TOL);
            }
        }
        out.capture.validate().unwrap();
        assert_eq!(out, m.forward(&p.tokens, &p.layout).unwrap());
    }

    #[test]
    fn forward_rejects_overlong_sequences() {
        let cfg = small_cfg();
        let m = init_model(&cfg).unwrap();
        let n = cfg.max_seq_len() + 1;
        let layout = TokenLayout::video_then_text(n, &[]).unwrap();
        assert!(m.forward(&vec![0; n], &layout).is_err());
    }
}
