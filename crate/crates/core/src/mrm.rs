//! Mask refinement: a per-voxel classifier that shrinks a dilated mask to the
//! voxels carrying the tract, from local SH coefficients.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffcore::{AdamW, AdamWConfig, BatchStats, BnStats, Graph, ModelParams, Tensor, Var};
use crate::env::{neighborhood_features, N_NEIGHBORS};
use crate::field::{ShField, TrackingMask, VoxelIndex};
use crate::nn::{init_linear, linear, Init};
use crate::rng::{keyed, Domain};
use crate::scalar::Real;
use crate::sh::ShBasis;
use crate::{Error, Result};

const INFER_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrmConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub threshold: f64,
    pub input_dim: usize,
    pub final_dilation_mm: f64,
    /// Dilation that turns a ground-truth mask into the augmented input mask.
    pub aug_dilation_mm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub val_fraction: f64,
}

impl Default for MrmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 256, 128],
            dropout: 0.5,
            threshold: 0.5,
            input_dim: N_NEIGHBORS * 46,
            final_dilation_mm: 1.0,
            aug_dilation_mm: 5.0,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            bn_momentum: 0.1,
            val_fraction: 0.2,
        }
    }
}

impl MrmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("mrm config: {m}")));
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(N_NEIGHBORS) {
            return bad("input_dim must be a positive multiple of 7");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("dropout and val_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.batch_size < 2 || !(self.lr > 0.0) {
            return bad("need bn_momentum in [0, 1], batch_size >= 2, lr > 0");
        }
        if !(self.final_dilation_mm >= 0.0) || !(self.aug_dilation_mm >= 0.0) {
            return bad("dilations must be non-negative");
        }
        Ok(())
    }
}

/// Seven 46-blocks `[shc, mask]` for `v` and its face neighbors, the same
/// layout as the tracking state's neighborhood part.
pub fn mrm_features<T: Real>(field: &ShField<T>, aug: &TrackingMask<T>, v: VoxelIndex) -> Vec<T> {
    let mut out = vec![T::zero(); N_NEIGHBORS * (field.n_coeff + 1)];
    neighborhood_features(field, aug, [v[0] as i64, v[1] as i64, v[2] as i64], &mut out);
    out
}

pub fn feature_matrix<T: Real>(field: &ShField<T>, aug: &TrackingMask<T>, voxels: &[VoxelIndex]) -> Vec<T> {
    let w = N_NEIGHBORS * (field.n_coeff + 1);
    let mut out = vec![T::zero(); voxels.len() * w];
    for (v, row) in voxels.iter().zip(out.chunks_exact_mut(w)) {
        neighborhood_features(field, aug, [v[0] as i64, v[1] as i64, v[2] as i64], row);
    }
    out
}

fn layer(i: usize) -> String {
    format!("mrm.l{i}")
}

fn bn(i: usize) -> String {
    format!("mrm.bn{i}")
}

pub fn init_mrm<T: Real>(cfg: &MrmConfig, rng_seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    let mut rng = keyed(rng_seed, Domain::Init, &[10]);
    let mut fan_in = cfg.input_dim;
    for (i, &h) in cfg.hidden.iter().enumerate() {
        init_linear(&mut p, &layer(i), fan_in, h, Init::FanIn, &mut rng)?;
        p.insert(format!("{}.g", bn(i)), Tensor::full(&[h], T::one()), true)?;
        p.insert(format!("{}.b", bn(i)), Tensor::zeros(&[h]), true)?;
        p.insert(format!("{}.mean", bn(i)), Tensor::zeros(&[h]), false)?;
        p.insert(format!("{}.var", bn(i)), Tensor::full(&[h], T::one()), false)?;
        fan_in = h;
    }
    init_linear(&mut p, "mrm.out", fan_in, 1, Init::FanIn, &mut rng)?;
    Ok(p)
}

/// Probabilities `[N, 1]`. Train-mode graphs normalize with batch statistics
/// (returned per layer) and apply dropout; eval graphs use running statistics.
pub fn mrm_forward<T: Real>(g: &mut Graph<T>, p: &ModelParams<T>, cfg: &MrmConfig, x: Var) -> Result<(Var, Vec<BatchStats<T>>)> {
    if g.value(x).cols() != cfg.input_dim {
        return Err(Error::Shape(format!("mrm input width {} vs {}", g.value(x).cols(), cfg.input_dim)));
    }
    let train = g.mode() == crate::diffcore::Mode::Train;
    let mut h = x;
    let mut stats = Vec::new();
    for i in 0..cfg.hidden.len() {
        h = linear(g, p, &layer(i), h, false)?;
        h = g.relu(h);
        let gamma = g.param(p, &format!("{}.g", bn(i)))?;
        let beta = g.param(p, &format!("{}.b", bn(i)))?;
        let (y, st) = if train {
            g.batchnorm_lastdim(h, gamma, beta, BnStats::Batch)?
        } else {
            let mean = p.get(&format!("{}.mean", bn(i)))?.data();
            let var = p.get(&format!("{}.var", bn(i)))?.data();
            g.batchnorm_lastdim(h, gamma, beta, BnStats::Running { mean, var })?
        };
        stats.extend(st);
        h = g.dropout(y, cfg.dropout)?;
    }
    let y = linear(g, p, "mrm.out", h, false)?;
    Ok((g.sigmoid(y), stats))
}

/// Exponential moving average of batch statistics (unbiased variance).
pub fn update_running_stats<T: Real>(p: &mut ModelParams<T>, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
    let m = T::lit(momentum);
    for (i, st) in stats.iter().enumerate() {
        let corr = T::from_usize_lossy(st.n) / T::from_usize_lossy(st.n.saturating_sub(1).max(1));
        for (r, &b) in p.get_mut(&format!("{}.mean", bn(i)))?.data_mut().iter_mut().zip(&st.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in p.get_mut(&format!("{}.var", bn(i)))?.data_mut().iter_mut().zip(&st.var) {
            *r = (T::one() - m) * *r + m * b * corr;
        }
    }
    Ok(())
}

/// Eval-mode probabilities for `n` feature rows.
pub fn mrm_predict<T: Real>(p: &ModelParams<T>, cfg: &MrmConfig, feats: &[T], n: usize) -> Result<Vec<T>> {
    let w = cfg.input_dim;
    if feats.len() != n * w {
        return Err(Error::Shape(format!("{} feature values for {n} rows of {w}", feats.len())));
    }
    let mut out = Vec::with_capacity(n);
    for chunk in feats.chunks(INFER_CHUNK * w) {
        let rows = chunk.len() / w;
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![rows, w], chunk.to_vec())?);
        let (y, _) = mrm_forward(&mut g, p, cfg, x)?;
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

/// Deterministic per-voxel validation membership.
pub fn is_validation(v_linear: usize, frac: f64, rng_seed: u64) -> bool {
    keyed(rng_seed, Domain::Split, &[v_linear as u64]).random::<f64>() < frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrmReport {
    pub epoch_losses: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl MrmReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_train={}\nn_val={}\ntrain_accuracy={:.6}\nval_accuracy={:.6}\n",
            self.n_train, self.n_val, self.train_accuracy, self.val_accuracy
        );
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s += &format!("epoch={e} loss={l:.9}\n");
        }
        s
    }
}

fn accuracy<T: Real>(probs: &[T], labels: &[T], threshold: f64) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    let hit = probs.iter().zip(labels).filter(|(p, l)| (p.to_f64_lossy() > threshold) == (l.to_f64_lossy() > 0.5)).count();
    hit as f64 / probs.len() as f64
}

/// Trains on the voxels of `aug` (labels from `gt`), holding out a
/// deterministic validation share.
pub fn train_mrm<T: Real>(field: &ShField<T>, aug: &TrackingMask<T>, gt: &TrackingMask<T>, cfg: &MrmConfig, rng_seed: u64) -> Result<(ModelParams<T>, MrmReport)> {
    cfg.validate()?;
    if cfg.input_dim != N_NEIGHBORS * (field.n_coeff + 1) {
        return Err(Error::Shape(format!("input_dim {} does not match a field with {} coefficients", cfg.input_dim, field.n_coeff)));
    }
    if aug.spec != field.spec || gt.spec != field.spec {
        return Err(Error::Shape("field and masks must share a grid".into()));
    }
    if aug.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for v in aug.indices() {
        if is_validation(field.spec.linear(v), cfg.val_fraction, rng_seed) {
            va.push(v);
        } else {
            tr.push(v);
        }
    }
    if tr.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two training voxels".into()));
    }
    let label = |v: &VoxelIndex| if gt.get(*v) { T::one() } else { T::zero() };
    let ytr: Vec<T> = tr.iter().map(label).collect();
    let yva: Vec<T> = va.iter().map(label).collect();
    let n_pos = ytr.iter().filter(|&&y| y > T::zero()).count();
    if n_pos == 0 || n_pos == ytr.len() {
        log::warn!("mask refinement labels are all {}", if n_pos == 0 { "zero" } else { "one" });
    }
    let xtr = feature_matrix(field, aug, &tr);
    let xva = feature_matrix(field, aug, &va);
    let w = cfg.input_dim;

    let mut p = init_mrm(cfg, rng_seed)?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() })?;
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed(rng_seed, Domain::Shuffle, &[epoch as u64]));
        let (mut acc, mut nb) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut xb = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                xb.extend_from_slice(&xtr[i * w..(i + 1) * w]);
            }
            let yb: Vec<T> = idx.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::train(keyed(rng_seed, Domain::Dropout, &[10, epoch as u64, bi as u64]));
            let x = g.constant(Tensor::new(vec![idx.len(), w], xb)?);
            let (prob, stats) = mrm_forward(&mut g, &p, cfg, x)?;
            let loss = g.bce(prob, &yb)?;
            let grads = g.backward(loss)?;
            opt.step(&mut p, &grads)?;
            update_running_stats(&mut p, &stats, cfg.bn_momentum)?;
            acc += g.value(loss).item().to_f64_lossy();
            nb += 1;
        }
        let l = acc / nb.max(1) as f64;
        log::debug!("mrm epoch {epoch} loss {l:.6}");
        epoch_losses.push(l);
    }
    let ptr = mrm_predict(&p, cfg, &xtr, tr.len())?;
    let pva = mrm_predict(&p, cfg, &xva, va.len())?;
    let report = MrmReport {
        epoch_losses,
        n_train: tr.len(),
        n_val: va.len(),
        train_accuracy: accuracy(&ptr, &ytr, cfg.threshold),
        val_accuracy: accuracy(&pva, &yva, cfg.threshold),
    };
    Ok((p, report))
}

/// Keeps voxels of `aug` whose probability is strictly above `threshold`,
/// then dilates by `dilation_mm`.
pub fn refine_from_probs<T: Real>(aug: &TrackingMask<T>, probs: &[T], threshold: f64, dilation_mm: f64) -> Result<TrackingMask<T>> {
    let voxels: Vec<VoxelIndex> = aug.indices().collect();
    if probs.len() != voxels.len() {
        return Err(Error::Shape(format!("{} probabilities for {} mask voxels", probs.len(), voxels.len())));
    }
    let mut kept = TrackingMask::empty(aug.spec);
    for (v, p) in voxels.iter().zip(probs) {
        if p.to_f64_lossy() > threshold {
            kept.set(*v, true);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyRefinedMask);
    }
    kept.dilate(T::lit(dilation_mm))
}

pub fn refine_mask<T: Real>(p: &ModelParams<T>, cfg: &MrmConfig, field: &ShField<T>, aug: &TrackingMask<T>) -> Result<TrackingMask<T>> {
    let voxels: Vec<VoxelIndex> = aug.indices().collect();
    let probs = mrm_predict(p, cfg, &feature_matrix(field, aug, &voxels), voxels.len())?;
    refine_from_probs(aug, &probs, cfg.threshold, cfg.final_dilation_mm)
}

/// Voxels whose maximum fODF amplitude exceeds `frac` of the field-wide maximum.
pub fn amplitude_mask<T: Real>(field: &ShField<T>, basis: &ShBasis<T>, frac: f64) -> Result<TrackingMask<T>> {
    if basis.n_coeff() != field.n_coeff {
        return Err(Error::Shape("basis and field orders differ".into()));
    }
    let n = field.spec.n_voxels();
    let peak: Vec<T> = (0..n)
        .map(|i| basis.amplitudes(&field.coeffs[i * field.n_coeff..(i + 1) * field.n_coeff]).into_iter().fold(T::neg_infinity(), T::max))
        .collect();
    let hi = peak.iter().copied().fold(T::neg_infinity(), T::max);
    let cut = hi * T::lit(frac);
    TrackingMask::from_vec(field.spec, peak.iter().map(|&a| hi > T::zero() && a > cut).collect())
}
