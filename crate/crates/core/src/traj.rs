//! Return-to-go trajectories, dataset selection and segment sampling.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;

use crate::env::Rollout;
use crate::rng::{keyed, Domain, Rng};
use crate::scalar::vec3::Vec3;
use crate::scalar::Real;
use crate::{Error, Result};

/// Episode length cap of stored trajectories.
pub const MAX_EP_LEN: usize = 530;

/// Suffix sums: `out[t] = sum_{t' >= t} rewards[t']`.
pub fn returns_to_go<T: Real>(rewards: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// `(R_t, s_t, a_t)` sequence of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub rtg: Vec<T>,
    /// Row-major `len x state_dim`.
    pub states: Vec<T>,
    pub actions: Vec<Vec3<T>>,
    pub tract_id: u32,
    pub state_dim: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn new(rtg: Vec<T>, states: Vec<T>, actions: Vec<Vec3<T>>, tract_id: u32, state_dim: usize) -> Result<Self> {
        let n = rtg.len();
        if n == 0 || actions.len() != n || states.len() != n * state_dim {
            return Err(Error::Shape(format!("trajectory parts disagree: {n} rtg, {} actions, {} state values", actions.len(), states.len())));
        }
        Ok(Self { rtg, states, actions, tract_id, state_dim })
    }

    /// Builds from an episode, truncating to `max_len` steps and recomputing
    /// returns over the kept rewards.
    pub fn from_rollout(ro: &Rollout<T>, tract_id: u32, max_len: usize) -> Result<Self> {
        let n = ro.len().min(max_len);
        if n == 0 {
            return Err(Error::InvalidArgument("empty episode".into()));
        }
        let dim = ro.states[0].len();
        let mut states = Vec::with_capacity(n * dim);
        for s in &ro.states[..n] {
            states.extend_from_slice(s);
        }
        Self::new(returns_to_go(&ro.rewards[..n]), states, ro.actions[..n].to_vec(), tract_id, dim)
    }

    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    pub fn state(&self, t: usize) -> &[T] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    /// Per-step rewards recovered from the telescoping returns.
    pub fn rewards(&self) -> Vec<T> {
        let n = self.len();
        (0..n).map(|t| if t + 1 < n { self.rtg[t] - self.rtg[t + 1] } else { self.rtg[t] }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TractSpecific,
    Mixed,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TractSpecific => "tract_specific",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceCount {
    pub source: usize,
    pub available: usize,
    pub longest: usize,
    pub random: usize,
}

/// How a dataset was selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionManifest {
    pub rule: String,
    pub rng_seed: u64,
    pub n_total: usize,
    pub sources: Vec<SourceCount>,
}

impl SelectionManifest {
    pub fn total(&self) -> usize {
        self.sources.iter().map(|s| s.longest + s.random).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("rule={}\nrng_seed={}\nn_total={}\n", self.rule, self.rng_seed, self.n_total);
        for c in &self.sources {
            s += &format!("source={} available={} longest={} random={}\n", c.source, c.available, c.longest, c.random);
        }
        s
    }

    /// Inverse of [`Self::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::Format(format!("manifest line {l:?}"));
        let mut m = Self { rule: String::new(), rng_seed: 0, n_total: 0, sources: Vec::new() };
        let num = |v: &str, l: &str| v.parse::<u64>().map_err(|_| bad(l));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if line.starts_with("source=") {
                let mut f = [0usize; 4];
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(bad(line));
                }
                for (slot, (part, key)) in f.iter_mut().zip(parts.iter().zip(["source", "available", "longest", "random"])) {
                    let v = part.strip_prefix(key).and_then(|r| r.strip_prefix('=')).ok_or_else(|| bad(line))?;
                    *slot = num(v, line)? as usize;
                }
                m.sources.push(SourceCount { source: f[0], available: f[1], longest: f[2], random: f[3] });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "rule" => m.rule = v.to_string(),
                "rng_seed" => m.rng_seed = num(v, line)?,
                "n_total" => m.n_total = num(v, line)? as usize,
                _ => return Err(bad(line)),
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryDataset<T> {
    pub trajectories: Vec<Arc<Trajectory<T>>>,
    pub kind: DatasetKind,
    pub manifest: SelectionManifest,
}

impl<T: Real> TrajectoryDataset<T> {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.trajectories.first().map(|t| t.state_dim)
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// A candidate for selection: episode length and its position `(source, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub len: usize,
    pub source: usize,
    pub index: usize,
}

/// Longest `n_long` of `cands` (ties by source, then index) plus `n_rand`
/// drawn uniformly without replacement from the rest. Returns
/// `(longest, random)` in selection order.
fn longest_plus_random(mut cands: Vec<Candidate>, n_long: usize, n_rand: usize, rng: &mut Rng) -> (Vec<Candidate>, Vec<Candidate>) {
    cands.sort_by(|a, b| b.len.cmp(&a.len).then(a.source.cmp(&b.source)).then(a.index.cmp(&b.index)));
    let rest = cands.split_off(n_long.min(cands.len()));
    let mut picked: Vec<usize> = index::sample(rng, rest.len(), n_rand.min(rest.len())).into_vec();
    picked.sort_unstable();
    let random = picked.into_iter().map(|i| rest[i]).collect();
    (cands, random)
}

/// Per-source selection: each source contributes an equal quota (the first
/// `n_total mod n_sources` sources one extra), half its longest episodes and
/// half uniform from its remainder.
pub fn select_tract(cands_per_source: &[Vec<Candidate>], n_total: usize, rng_seed: u64) -> Result<(Vec<Candidate>, SelectionManifest)> {
    let ns = cands_per_source.len();
    if ns == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(n_total);
    let mut sources = Vec::with_capacity(ns);
    for (si, cands) in cands_per_source.iter().enumerate() {
        let quota = n_total / ns + usize::from(si < n_total % ns);
        if cands.len() < quota {
            return Err(Error::Shortfall { source_index: si, available: cands.len(), needed: quota });
        }
        let n_long = quota / 2;
        let n_rand = quota - n_long;
        let mut rng = keyed(rng_seed, Domain::Select, &[si as u64]);
        let (long, rand) = longest_plus_random(cands.clone(), n_long, n_rand, &mut rng);
        sources.push(SourceCount { source: si, available: cands.len(), longest: long.len(), random: rand.len() });
        out.extend(long);
        out.extend(rand);
    }
    let manifest = SelectionManifest { rule: "per-source longest half + uniform remainder".into(), rng_seed, n_total, sources };
    Ok((out, manifest))
}

/// Candidates from rollouts: discarded (too short) episodes are excluded.
pub fn candidates<T: Real>(source: usize, rollouts: &[Rollout<T>]) -> Vec<Candidate> {
    rollouts
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.discarded && !r.is_empty())
        .map(|(i, r)| Candidate { len: r.len().min(MAX_EP_LEN), source, index: i })
        .collect()
}

/// Tract dataset from in-memory rollouts of every source.
pub fn build_tract_dataset<T: Real>(rollouts: &[Vec<Rollout<T>>], tract_id: u32, n_total: usize, rng_seed: u64) -> Result<TrajectoryDataset<T>> {
    let cands: Vec<Vec<Candidate>> = rollouts.iter().enumerate().map(|(s, r)| candidates(s, r)).collect();
    let (picks, manifest) = select_tract(&cands, n_total, rng_seed)?;
    let trajectories = picks
        .iter()
        .map(|c| Trajectory::from_rollout(&rollouts[c.source][c.index], tract_id, MAX_EP_LEN).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(TrajectoryDataset { trajectories, kind: DatasetKind::TractSpecific, manifest })
}

/// Pools the tract datasets and keeps the `n_total / 2` longest overall (ties
/// by dataset order, then position) plus the rest uniform from the remainder.
pub fn build_mixed_dataset<T: Real>(tracts: &[TrajectoryDataset<T>], n_total: usize, rng_seed: u64) -> Result<TrajectoryDataset<T>> {
    let pool: Vec<Candidate> = tracts
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.trajectories.iter().enumerate().map(move |(i, t)| Candidate { len: t.len(), source: s, index: i }))
        .collect();
    if pool.len() < n_total {
        return Err(Error::InsufficientPool { available: pool.len(), needed: n_total });
    }
    let n_long = n_total / 2;
    let mut rng = keyed(rng_seed, Domain::Select, &[u64::MAX]);
    let (long, rand) = longest_plus_random(pool, n_long, n_total - n_long, &mut rng);
    let mut sources: Vec<SourceCount> = tracts.iter().enumerate().map(|(s, d)| SourceCount { source: s, available: d.len(), longest: 0, random: 0 }).collect();
    long.iter().for_each(|c| sources[c.source].longest += 1);
    rand.iter().for_each(|c| sources[c.source].random += 1);
    let trajectories = long.iter().chain(&rand).map(|c| Arc::clone(&tracts[c.source].trajectories[c.index])).collect();
    let manifest = SelectionManifest { rule: "pooled longest half + uniform remainder".into(), rng_seed, n_total, sources };
    Ok(TrajectoryDataset { trajectories, kind: DatasetKind::Mixed, manifest })
}

/// `batch` left-padded windows of `k` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch<T> {
    pub batch: usize,
    pub k: usize,
    pub state_dim: usize,
    /// `batch x k`.
    pub rtg: Vec<T>,
    /// `batch x k x state_dim`.
    pub states: Vec<T>,
    /// `batch x k x 3`.
    pub actions: Vec<T>,
    /// `batch x k`, absolute episode timesteps (0 on padding).
    pub timesteps: Vec<usize>,
    /// `batch x k`, false on padding.
    pub valid: Vec<bool>,
}

impl<T: Real> SegmentBatch<T> {
    pub fn zeros(batch: usize, k: usize, state_dim: usize) -> Self {
        Self {
            batch,
            k,
            state_dim,
            rtg: vec![T::zero(); batch * k],
            states: vec![T::zero(); batch * k * state_dim],
            actions: vec![T::zero(); batch * k * 3],
            timesteps: vec![0; batch * k],
            valid: vec![false; batch * k],
        }
    }

    /// Copies steps `start..start + n` of `tr` right-aligned into row `b`.
    pub fn fill_row(&mut self, b: usize, tr: &Trajectory<T>, start: usize, n: usize, max_ep_len: usize) {
        let (k, d) = (self.k, self.state_dim);
        let pad = k - n;
        for j in 0..n {
            let t = start + j;
            let slot = b * k + pad + j;
            self.rtg[slot] = tr.rtg[t];
            self.states[slot * d..(slot + 1) * d].copy_from_slice(tr.state(t));
            self.actions[slot * 3..slot * 3 + 3].copy_from_slice(&tr.actions[t]);
            self.timesteps[slot] = t.min(max_ep_len - 1);
            self.valid[slot] = true;
        }
    }
}

/// Uniform trajectory, then uniform start offset in `0..=len - k`; trajectories
/// shorter than `k` are used whole and left-padded.
pub fn sample_segments<T: Real>(ds: &TrajectoryDataset<T>, k: usize, batch: usize, max_ep_len: usize, rng: &mut Rng) -> Result<SegmentBatch<T>> {
    if k == 0 || max_ep_len == 0 {
        return Err(Error::InvalidArgument("segment length and max_ep_len must be positive".into()));
    }
    let d = ds.state_dim().ok_or(Error::EmptyDataset)?;
    let mut out = SegmentBatch::zeros(batch, k, d);
    for b in 0..batch {
        let tr = &ds.trajectories[rng.random_range(0..ds.len())];
        let n = tr.len().min(k);
        let start = rng.random_range(0..=tr.len() - n);
        out.fill_row(b, tr, start, n, max_ep_len);
    }
    Ok(out)
}
