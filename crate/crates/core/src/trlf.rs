//! Return-conditioned decoder-only transformer over interleaved `(R, s, a)`
//! tokens: training graph, five-step angular loss, two-stage training and
//! cached autoregressive generation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::diffcore::{AdamW, AdamWConfig, Graph, ModelParams, Tensor, Var, ACOS_EPS, LN_EPS};
use crate::env::{EnvConfig, Rollout, World};
use crate::nn::{init_linear, linear, linear_infer, Init};
use crate::rng::{keyed, Domain, Rng};
use crate::scalar::vec3::Vec3;
use crate::scalar::Real;
use crate::traj::{sample_segments, DatasetKind, SegmentBatch, SelectionManifest, TrajectoryDataset};
use crate::{Error, Result};

use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;
/// Streams decoded together during generation; bounds the key/value caches.
pub const GEN_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrlfConfig {
    pub n_layers_pretrain: usize,
    pub n_layers_total: usize,
    pub n_heads: usize,
    pub k: usize,
    pub d: usize,
    pub dropout: f64,
    pub max_ep_len: usize,
    pub rtg_init: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub steps_per_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub state_dim: usize,
    /// Use the unnormalized double sum as the loss.
    pub raw_loss_sum: bool,
}

impl Default for TrlfConfig {
    fn default() -> Self {
        Self {
            n_layers_pretrain: 3,
            n_layers_total: 4,
            n_heads: 1,
            k: 40,
            d: 128,
            dropout: 0.1,
            max_ep_len: 530,
            rtg_init: 300.0,
            pretrain_iters: 30,
            finetune_iters: 10,
            steps_per_iter: 10_000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            state_dim: 334,
            raw_loss_sum: false,
        }
    }
}

impl TrlfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("trlf config: {m}")));
        if self.n_layers_pretrain == 0 || self.n_layers_total <= self.n_layers_pretrain {
            return bad("need n_layers_total > n_layers_pretrain >= 1");
        }
        if self.k < 5 {
            return bad("context length must be at least 5");
        }
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad("d must be a positive multiple of n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_ep_len == 0 || self.state_dim == 0 || self.batch_size == 0 {
            return bad("max_ep_len, state_dim and batch_size must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("lr must be positive; weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        3 * self.k
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("blk{i}.")
}

/// Closed-form parameter count for `n_layers` blocks.
pub fn n_params(cfg: &TrlfConfig, n_layers: usize) -> usize {
    let d = cfg.d;
    let emb = 2 * d + (cfg.state_dim + 1) * d + 4 * d + cfg.max_ep_len * d;
    emb + n_layers * block_params(d) + 2 * d + 3 * d + 3
}

pub fn block_params(d: usize) -> usize {
    4 * d + 4 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
}

fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let n = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(Tensor::from_fn(shape, |_| loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    }))
}

fn init_ln<T: Real>(p: &mut ModelParams<T>, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::full(&[d], T::one()), true)?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]), true)
}

/// Adds decoder block `i`.
pub fn init_block<T: Real>(p: &mut ModelParams<T>, cfg: &TrlfConfig, i: usize, rng: &mut Rng) -> Result<()> {
    let b = block_prefix(i);
    let d = cfg.d;
    let tn = Init::TruncNormal(INIT_STD);
    init_ln(p, &format!("{b}ln1"), d)?;
    for m in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{b}attn.{m}"), d, d, tn, rng)?;
    }
    init_ln(p, &format!("{b}ln2"), d)?;
    init_linear(p, &format!("{b}mlp.fc"), d, 4 * d, tn, rng)?;
    init_linear(p, &format!("{b}mlp.proj"), 4 * d, d, tn, rng)
}

pub fn init_params<T: Real>(cfg: &TrlfConfig, n_layers: usize, rng_seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    let mut rng = keyed(rng_seed, Domain::Init, &[0]);
    let tn = Init::TruncNormal(INIT_STD);
    init_linear(&mut p, "emb.r", 1, cfg.d, tn, &mut rng)?;
    init_linear(&mut p, "emb.s", cfg.state_dim, cfg.d, tn, &mut rng)?;
    init_linear(&mut p, "emb.a", 3, cfg.d, tn, &mut rng)?;
    p.insert("emb.t", trunc_normal(&[cfg.max_ep_len, cfg.d], INIT_STD, &mut rng)?, true)?;
    for i in 0..n_layers {
        init_block(&mut p, cfg, i, &mut keyed(rng_seed, Domain::Init, &[1, i as u64]))?;
    }
    init_ln(&mut p, "ln_f", cfg.d)?;
    init_linear(&mut p, "head", cfg.d, 3, tn, &mut rng)?;
    Ok(p)
}

/// Number of consecutive decoder blocks present.
pub fn n_layers<T: Real>(p: &ModelParams<T>) -> usize {
    (0..).take_while(|&i| p.contains(&format!("{}ln1.g", block_prefix(i)))).count()
}

/// `allowed[b, i, j]`: token `j <= i` whose timestep slot is valid.
pub fn attention_mask(valid: &[bool], batch: usize, k: usize) -> Vec<bool> {
    let t = 3 * k;
    let mut out = vec![false; batch * t * t];
    for b in 0..batch {
        for i in 0..t {
            for j in 0..=i {
                out[(b * t + i) * t + j] = valid[b * k + j / 3];
            }
        }
    }
    out
}

/// Token sequence `[B, 3K, d]`: affine embeddings of `R`, `s` and `a` plus the
/// timestep row shared by all three tokens of a step, interleaved `R, s, a`.
pub fn embed<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, cfg: &TrlfConfig, b: &SegmentBatch<T>) -> Result<Var> {
    if b.state_dim != cfg.state_dim {
        return Err(Error::Shape(format!("state width {} vs configured {}", b.state_dim, cfg.state_dim)));
    }
    let (nb, k) = (b.batch, b.k);
    let r = g.constant(Tensor::new(vec![nb, k, 1], b.rtg.clone())?);
    let s = g.constant(Tensor::new(vec![nb, k, b.state_dim], b.states.clone())?);
    let a = g.constant(Tensor::new(vec![nb, k, 3], b.actions.clone())?);
    let table = g.param(p, "emb.t")?;
    let pos = g.embedding_lookup(table, &b.timesteps, &[nb, k])?;
    let mut parts = Vec::with_capacity(3);
    for (name, x) in [("emb.r", r), ("emb.s", s), ("emb.a", a)] {
        let e = linear(g, p, name, x, false)?;
        parts.push(g.add(e, pos)?);
    }
    g.interleave(&parts)
}

fn layernorm<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.g"))?;
    let beta = g.param(p, &format!("{name}.b"))?;
    g.layernorm_lastdim(x, gamma, beta)
}

fn block<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, cfg: &TrlfConfig, i: usize, x: Var, allowed: &[bool]) -> Result<Var> {
    let pre = block_prefix(i);
    let h = layernorm(g, p, &format!("{pre}ln1"), x)?;
    let q = linear(g, p, &format!("{pre}attn.q"), h, false)?;
    let kk = linear(g, p, &format!("{pre}attn.k"), h, false)?;
    let v = linear(g, p, &format!("{pre}attn.v"), h, false)?;
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, kk, v)
        } else {
            (g.slice_lastdim(q, hd * dh, dh)?, g.slice_lastdim(kk, hd * dh, dh)?, g.slice_lastdim(v, hd * dh, dh)?)
        };
        let sc = g.bmm(qh, kh, true)?;
        let sc = g.scale(sc, scale);
        let att = g.masked_softmax_lastdim(sc, allowed)?;
        heads.push(g.bmm(att, vh, false)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat_lastdim(&heads)? };
    let o = linear(g, p, &format!("{pre}attn.o"), o, false)?;
    let o = g.dropout(o, cfg.dropout)?;
    let x = g.add(x, o)?;
    let h = layernorm(g, p, &format!("{pre}ln2"), x)?;
    let f = linear(g, p, &format!("{pre}mlp.fc"), h, false)?;
    let f = g.relu(f);
    let f = linear(g, p, &format!("{pre}mlp.proj"), f, false)?;
    let f = g.dropout(f, cfg.dropout)?;
    g.add(x, f)
}

/// Pre-layernorm causal blocks followed by the final layernorm.
pub fn decoder_forward<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, cfg: &TrlfConfig, tokens: Var, allowed: &[bool], n_layers: usize) -> Result<Var> {
    let mut x = tokens;
    for i in 0..n_layers {
        x = block(g, p, cfg, i, x, allowed)?;
    }
    layernorm(g, p, "ln_f", x)
}

/// `tanh(head(h))` at every state token: `[B, K, 3]`.
pub fn predict_actions<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, hidden: Var) -> Result<Var> {
    let hs = g.strided_tokens(hidden, 3, 1)?;
    let y = linear(g, p, "head", hs, false)?;
    Ok(g.tanh(y))
}

/// Predicted actions `[B, K, 3]` for a segment batch with every block in `p`.
pub fn forward<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, cfg: &TrlfConfig, b: &SegmentBatch<T>) -> Result<Var> {
    let x = embed(g, p, cfg, b)?;
    let x = g.dropout(x, cfg.dropout)?;
    let allowed = attention_mask(&b.valid, b.batch, b.k);
    let h = decoder_forward(g, p, cfg, x, &allowed, n_layers(p))?;
    predict_actions(g, p, h)
}

/// Per-position multiplicity of the windowed angular loss: position `u` is
/// counted once for every window centre `t in [2, K-3]` with `|u - t| <= 2`,
/// and not at all when padded.
pub fn five_step_weights(valid: &[bool], batch: usize, k: usize) -> Vec<usize> {
    let mut w = vec![0usize; batch * k];
    if k < 5 {
        return w;
    }
    for b in 0..batch {
        for t in 2..=k - 3 {
            for u in t - 2..=t + 2 {
                if valid[b * k + u] {
                    w[b * k + u] += 1;
                }
            }
        }
    }
    w
}

/// Sum over window centres and offsets of `acos(cos(a_hat, a))`, divided by
/// the number of contributing terms unless `raw`.
pub fn five_step_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &[T], valid: &[bool], batch: usize, k: usize, raw: bool) -> Result<Var> {
    if g.value(pred).numel() != batch * k * 3 || target.len() != batch * k * 3 || valid.len() != batch * k {
        return Err(Error::Shape("five-step loss operands".into()));
    }
    let w = five_step_weights(valid, batch, k);
    let n: usize = w.iter().sum();
    let cos = g.cosine_rows(pred, target)?;
    let ang = g.acos_clamped(cos, T::lit(ACOS_EPS));
    let wt: Vec<T> = w.iter().map(|&c| T::from_usize_lossy(c)).collect();
    let s = g.weighted_sum(ang, &wt)?;
    Ok(if raw { s } else { g.scale(s, T::one() / T::from_usize_lossy(n.max(1))) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain = 0,
    Finetune = 1,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub stage: Stage,
    pub iter: usize,
    pub step: usize,
    pub loss: f64,
}

impl LossRow {
    pub fn to_line(&self) -> String {
        format!("stage={} iter={} step={} loss={:.9}", self.stage.name(), self.iter, self.step, self.loss)
    }
}

fn train_loop<T: Real>(
    p: &mut ModelParams<T>,
    cfg: &TrlfConfig,
    ds: &TrajectoryDataset<T>,
    iters: usize,
    stage: Stage,
    rng_seed: u64,
    on_iter: &mut dyn FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<Vec<LossRow>> {
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() })?;
    let mut seg_rng = keyed(rng_seed, Domain::Segments, &[stage as u64]);
    let mut log = Vec::with_capacity(iters * cfg.steps_per_iter);
    for it in 0..iters {
        for st in 0..cfg.steps_per_iter {
            let step = it * cfg.steps_per_iter + st;
            let b = sample_segments(ds, cfg.k, cfg.batch_size, cfg.max_ep_len, &mut seg_rng)?;
            let mut g = Graph::train(keyed(rng_seed, Domain::Dropout, &[stage as u64, step as u64]));
            let pred = forward(&mut g, p, cfg, &b)?;
            let loss = five_step_loss(&mut g, pred, &b.actions, &b.valid, b.batch, b.k, cfg.raw_loss_sum)?;
            let mut grads = g.backward(loss)?;
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(T::lit(cfg.grad_clip));
            }
            opt.step(p, &grads)?;
            let l = g.value(loss).item().to_f64_lossy();
            log::debug!("{} iter {it} step {step} loss {l:.6}", stage.name());
            log.push(LossRow { stage, iter: it, step, loss: l });
        }
        on_iter(it, p)?;
    }
    Ok(log)
}

/// Trains embeddings, the first `n_layers_pretrain` blocks and the head on a
/// mixed dataset. `on_iter` runs after every iteration (checkpointing).
pub fn pretrain<T: Real>(
    ds: &TrajectoryDataset<T>,
    cfg: &TrlfConfig,
    rng_seed: u64,
    mut on_iter: impl FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<(ModelParams<T>, Vec<LossRow>)> {
    if ds.kind != DatasetKind::Mixed {
        return Err(Error::DatasetKind { expected: "mixed" });
    }
    let mut p = init_params(cfg, cfg.n_layers_pretrain, rng_seed)?;
    let log = train_loop(&mut p, cfg, ds, cfg.pretrain_iters, Stage::Pretrain, rng_seed, &mut on_iter)?;
    Ok((p, log))
}

/// Appends fresh blocks up to `n_layers_total`, freezes the embeddings and
/// the pretrained blocks, and trains the rest on a tract dataset.
pub fn finetune<T: Real>(
    pretrained: &ModelParams<T>,
    ds: &TrajectoryDataset<T>,
    cfg: &TrlfConfig,
    rng_seed: u64,
    mut on_iter: impl FnMut(usize, &ModelParams<T>) -> Result<()>,
) -> Result<(ModelParams<T>, Vec<LossRow>)> {
    if ds.kind != DatasetKind::TractSpecific {
        return Err(Error::DatasetKind { expected: "tract_specific" });
    }
    cfg.validate()?;
    let mut p = pretrained.clone();
    let have = n_layers(&p);
    if have != cfg.n_layers_pretrain {
        return Err(Error::InvalidArgument(format!("expected {} pretrained blocks, found {have}", cfg.n_layers_pretrain)));
    }
    p.set_all_trainable(true);
    for i in have..cfg.n_layers_total {
        init_block(&mut p, cfg, i, &mut keyed(rng_seed, Domain::Init, &[2, i as u64]))?;
    }
    p.set_trainable_prefix("emb.", false);
    for i in 0..have {
        p.set_trainable_prefix(&block_prefix(i), false);
    }
    let log = train_loop(&mut p, cfg, ds, cfg.finetune_iters, Stage::Finetune, rng_seed, &mut on_iter)?;
    Ok((p, log))
}

/// Mean eval-mode loss over `n_batches` sampled batches.
pub fn validation_loss<T: Real>(p: &ModelParams<T>, cfg: &TrlfConfig, ds: &TrajectoryDataset<T>, n_batches: usize, rng_seed: u64) -> Result<f64> {
    let mut rng = keyed(rng_seed, Domain::Segments, &[u64::MAX]);
    let mut acc = 0.0;
    for _ in 0..n_batches {
        let b = sample_segments(ds, cfg.k, cfg.batch_size, cfg.max_ep_len, &mut rng)?;
        let mut g = Graph::eval();
        let pred = forward(&mut g, p, cfg, &b)?;
        let l = five_step_loss(&mut g, pred, &b.actions, &b.valid, b.batch, b.k, cfg.raw_loss_sum)?;
        acc += g.value(l).item().to_f64_lossy();
    }
    Ok(acc / n_batches.max(1) as f64)
}

/// Text record stored next to every checkpoint.
pub fn model_card<T: Real>(cfg: &TrlfConfig, stage: Stage, p: &ModelParams<T>, rng_seed: u64, manifests: &[(&str, &SelectionManifest)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model=trlf\nstage={}\nrng_seed={rng_seed}", stage.name());
    let _ = writeln!(s, "n_layers={}\nn_params={}\nn_trainable_segments={}", n_layers(p), p.n_values(), p.iter().filter(|(_, g)| g.trainable).count());
    let _ = writeln!(s, "config={cfg:?}");
    for (name, m) in manifests {
        let _ = writeln!(s, "[dataset {name}]");
        s += &m.to_text();
    }
    s
}

/// One input token for the cached decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Token<T> {
    Rtg(T),
    State(Vec<T>),
    Action(Vec3<T>),
}

/// Per-stream keys and values of every block, one row per token seen.
#[derive(Debug, Clone, Default)]
pub struct Cache<T> {
    keys: Vec<Vec<T>>,
    vals: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> Cache<T> {
    pub fn new(n_layers: usize) -> Self {
        Self { keys: vec![Vec::new(); n_layers], vals: vec![Vec::new(); n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().chain(self.vals.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }
}

/// Tape-free eval-mode forward that extends each stream's sequence token by
/// token, reusing cached keys and values.
pub struct Decoder<'a, T> {
    p: &'a ModelParams<T>,
    cfg: &'a TrlfConfig,
    n_layers: usize,
}

fn ln_rows<T: Real>(x: &[T], g: &[T], b: &[T], d: usize) -> Vec<T> {
    let df = T::from_usize_lossy(d);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / df;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        out.extend(row.iter().zip(g).zip(b).map(|((&a, &gg), &bb)| (a - mean) * rs * gg + bb));
    }
    out
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(p: &'a ModelParams<T>, cfg: &'a TrlfConfig) -> Result<Self> {
        cfg.validate()?;
        let n = n_layers(p);
        if n == 0 {
            return Err(Error::InvalidArgument("parameters hold no decoder blocks".into()));
        }
        Ok(Self { p, cfg, n_layers: n })
    }

    pub fn new_cache(&self) -> Cache<T> {
        Cache::new(self.n_layers)
    }

    fn ln(&self, name: &str, x: &[T]) -> Result<Vec<T>> {
        Ok(ln_rows(x, self.p.get(&format!("{name}.g"))?.data(), self.p.get(&format!("{name}.b"))?.data(), self.cfg.d))
    }

    fn embed(&self, tokens: &[(Token<T>, usize)]) -> Result<Vec<T>> {
        let d = self.cfg.d;
        let table = self.p.get("emb.t")?.data();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (tok, t) in tokens {
            if *t >= self.cfg.max_ep_len {
                return Err(Error::InvalidArgument(format!("timestep {t} >= max_ep_len {}", self.cfg.max_ep_len)));
            }
            let e = match tok {
                Token::Rtg(r) => linear_infer(self.p, "emb.r", std::slice::from_ref(r), 1)?,
                Token::State(s) => linear_infer(self.p, "emb.s", s, 1)?,
                Token::Action(a) => linear_infer(self.p, "emb.a", a, 1)?,
            };
            x.extend(e.iter().zip(&table[t * d..(t + 1) * d]).map(|(&a, &b)| a + b));
        }
        Ok(x)
    }

    /// Appends `tokens[j]` (token, timestep) to `caches[ids[j]]` and returns,
    /// per stream, the action read from its last appended token (meaningful
    /// when that token is a state).
    pub fn append(&self, caches: &mut [Cache<T>], ids: &[usize], tokens: &[Vec<(Token<T>, usize)>]) -> Result<Vec<Vec3<T>>> {
        let d = self.cfg.d;
        let dh = self.cfg.head_dim();
        let nh = self.cfg.n_heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let flat: Vec<(Token<T>, usize)> = tokens.iter().flatten().cloned().collect();
        if flat.is_empty() || tokens.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every stream needs at least one token".into()));
        }
        let n = flat.len();
        let mut x = self.embed(&flat)?;
        let bases: Vec<usize> = ids.iter().map(|&i| caches[i].len).collect();
        for l in 0..self.n_layers {
            let pre = block_prefix(l);
            let h = self.ln(&format!("{pre}ln1"), &x)?;
            let q = linear_infer(self.p, &format!("{pre}attn.q"), &h, n)?;
            let kk = linear_infer(self.p, &format!("{pre}attn.k"), &h, n)?;
            let v = linear_infer(self.p, &format!("{pre}attn.v"), &h, n)?;
            let mut att = vec![T::zero(); n * d];
            let mut row0 = 0;
            for (j, &id) in ids.iter().enumerate() {
                let nt = tokens[j].len();
                let c = &mut caches[id];
                c.keys[l].extend_from_slice(&kk[row0 * d..(row0 + nt) * d]);
                c.vals[l].extend_from_slice(&v[row0 * d..(row0 + nt) * d]);
                let mut sc = Vec::new();
                for i in 0..nt {
                    let r = row0 + i;
                    let visible = bases[j] + i + 1;
                    for hd in 0..nh {
                        let off = hd * dh;
                        let qr = &q[r * d + off..r * d + off + dh];
                        sc.clear();
                        sc.extend((0..visible).map(|u| {
                            let kr = &c.keys[l][u * d + off..u * d + off + dh];
                            qr.iter().zip(kr).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale
                        }));
                        let mx = sc.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut z = T::zero();
                        for s in sc.iter_mut() {
                            *s = (*s - mx).exp();
                            z += *s;
                        }
                        let out = &mut att[r * d + off..r * d + off + dh];
                        for (u, &w) in sc.iter().enumerate() {
                            let vr = &c.vals[l][u * d + off..u * d + off + dh];
                            for (o, &vv) in out.iter_mut().zip(vr) {
                                *o += w / z * vv;
                            }
                        }
                    }
                }
                row0 += nt;
            }
            let o = linear_infer(self.p, &format!("{pre}attn.o"), &att, n)?;
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            let h = self.ln(&format!("{pre}ln2"), &x)?;
            let mut f = linear_infer(self.p, &format!("{pre}mlp.fc"), &h, n)?;
            f.iter_mut().for_each(|a| *a = a.max(T::zero()));
            let m = linear_infer(self.p, &format!("{pre}mlp.proj"), &f, n)?;
            x.iter_mut().zip(&m).for_each(|(a, &b)| *a += b);
        }
        let mut last = Vec::with_capacity(ids.len() * d);
        let mut row0 = 0;
        for (j, &id) in ids.iter().enumerate() {
            row0 += tokens[j].len();
            last.extend_from_slice(&x[(row0 - 1) * d..row0 * d]);
            caches[id].len += tokens[j].len();
        }
        let h = self.ln("ln_f", &last)?;
        let y = linear_infer(self.p, "head", &h, ids.len())?;
        Ok(y.chunks_exact(3).map(|c| [c[0].tanh(), c[1].tanh(), c[2].tanh()]).collect())
    }
}

/// A generated episode and the return-to-go fed at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub rollout: Rollout<T>,
    pub rtg: Vec<T>,
}

struct StreamCtx<T> {
    /// Last `K` steps: (rtg, state, action taken).
    window: VecDeque<(T, Vec<T>, Option<Vec3<T>>)>,
    rtg: Vec<T>,
    t: usize,
}

/// Autoregressive tracking from every seed. At step `t` the context holds the
/// last `K` steps with `R_0 = rtg_init` and `R_{t+1} = R_t - r_t`; the action
/// is read at the `s_t` token. The current step's action slot follows `s_t`
/// and so cannot influence the prediction; it is never materialized.
pub fn generate_batch<T: Real>(p: &ModelParams<T>, cfg: &TrlfConfig, world: &World<T>, env_cfg: &EnvConfig, seeds: &[Vec3<T>], rtg_init: T) -> Result<Vec<Generation<T>>> {
    let dec = Decoder::new(p, cfg)?;
    let k = cfg.k;
    let tcap = |t: usize| t.min(cfg.max_ep_len - 1);
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(GEN_CHUNK) {
        let mut caches: Vec<Cache<T>> = (0..chunk.len()).map(|_| dec.new_cache()).collect();
        let mut ctx: Vec<StreamCtx<T>> = (0..chunk.len()).map(|_| StreamCtx { window: VecDeque::with_capacity(k), rtg: Vec::new(), t: 0 }).collect();
        let mut err = None;
        let rollouts = world.rollout_batch_with_rewards(env_cfg.clone(), chunk, |ids, states, last_r| {
            let dim = states.len() / ids.len().max(1);
            let mut toks = Vec::with_capacity(ids.len());
            for (j, &id) in ids.iter().enumerate() {
                let c = &mut ctx[id];
                let s = states[j * dim..(j + 1) * dim].to_vec();
                let r_t = match (c.rtg.last(), last_r[j]) {
                    (Some(&prev), Some(r)) => prev - r,
                    _ => rtg_init,
                };
                c.rtg.push(r_t);
                let t = c.t;
                let mut tk = Vec::with_capacity(3);
                if t >= k {
                    c.window.pop_front();
                    caches[id].clear();
                    let t0 = t + 1 - k;
                    for (i, (r, st, a)) in c.window.iter().enumerate() {
                        tk.push((Token::Rtg(*r), tcap(t0 + i)));
                        tk.push((Token::State(st.clone()), tcap(t0 + i)));
                        tk.push((Token::Action(a.expect("past action")), tcap(t0 + i)));
                    }
                } else if let Some((_, _, Some(a))) = c.window.back() {
                    tk.push((Token::Action(*a), tcap(t - 1)));
                }
                tk.push((Token::Rtg(r_t), tcap(t)));
                tk.push((Token::State(s.clone()), tcap(t)));
                c.window.push_back((r_t, s, None));
                toks.push(tk);
            }
            match dec.append(&mut caches, ids, &toks) {
                Ok(acts) => {
                    for (&id, a) in ids.iter().zip(&acts) {
                        let c = &mut ctx[id];
                        c.window.back_mut().expect("pushed").2 = Some(*a);
                        c.t += 1;
                    }
                    acts
                }
                Err(e) => {
                    err.get_or_insert(e);
                    vec![[T::zero(); 3]; ids.len()]
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        out.extend(rollouts.into_iter().zip(ctx).map(|(rollout, c)| Generation { rollout, rtg: c.rtg }));
    }
    Ok(out)
}

pub fn generate<T: Real>(p: &ModelParams<T>, cfg: &TrlfConfig, world: &World<T>, env_cfg: &EnvConfig, seed: Vec3<T>, rtg_init: T) -> Result<Generation<T>> {
    Ok(generate_batch(p, cfg, world, env_cfg, &[seed], rtg_init)?.pop().expect("one seed"))
}
