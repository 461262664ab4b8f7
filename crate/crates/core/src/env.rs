//! Streamline tracking environment: state assembly, reward, termination, seeding.

use std::fmt;

use rand::Rng as _;

use crate::field::{GridSpec, ShField, TrackingMask, VoxelIndex, NEIGHBOR_OFFSETS};
use crate::rng::{keyed, Domain};
use crate::scalar::vec3::{self, Vec3};
use crate::scalar::Real;
use crate::sh::{extract_peaks, PeakConfig, ShBasis};
use crate::{Error, Result};

pub const N_NEIGHBORS: usize = NEIGHBOR_OFFSETS.len();
pub const ACTION_DIM: usize = 3;
/// Actions shorter than this are degenerate.
pub const MIN_ACTION_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub step_size_mm: f64,
    pub min_len_mm: f64,
    pub max_len_mm: f64,
    pub max_steps: usize,
    pub max_angle_deg: f64,
    pub seeds_per_voxel: usize,
    pub n_prev_dirs: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            step_size_mm: 0.375,
            min_len_mm: 20.0,
            max_len_mm: 200.0,
            max_steps: 530,
            max_angle_deg: 60.0,
            seeds_per_voxel: 7,
            n_prev_dirs: 4,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("env config: {m}")));
        if !(self.step_size_mm > 0.0 && self.step_size_mm.is_finite()) {
            return bad("step_size_mm must be positive");
        }
        if !(self.min_len_mm >= 0.0 && self.max_len_mm > self.min_len_mm) {
            return bad("need 0 <= min_len_mm < max_len_mm");
        }
        if self.max_steps == 0 || self.seeds_per_voxel == 0 {
            return bad("max_steps and seeds_per_voxel must be positive");
        }
        if !(self.max_angle_deg > 0.0 && self.max_angle_deg <= 180.0) {
            return bad("max_angle_deg must be in (0, 180]");
        }
        let need = (self.max_len_mm / self.step_size_mm).ceil() as i64 - 9;
        if (self.max_steps as i64) < need {
            return bad(&format!("max_steps {} < ceil(max_len/step) - 9 = {need}", self.max_steps));
        }
        Ok(())
    }

    pub fn cos_max_angle(&self) -> f64 {
        self.max_angle_deg.to_radians().cos()
    }
}

/// Fixed state layout: per neighborhood voxel `[shc(n_coeff), mask]`, then
/// `n_prev` previous directions, most recent first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_coeff: usize,
    pub n_prev: usize,
}

impl StateLayout {
    pub fn new(n_coeff: usize, n_prev: usize) -> Self {
        Self { n_coeff, n_prev }
    }

    pub fn neighborhood_dim(&self) -> usize {
        N_NEIGHBORS * (self.n_coeff + 1)
    }

    pub fn dim(&self) -> usize {
        self.neighborhood_dim() + 3 * self.n_prev
    }

    pub fn assemble<T: Real>(&self, shc: &[Vec<T>], mask: &[T], prev_dirs: &[Vec3<T>]) -> Result<Vec<T>> {
        if shc.len() != N_NEIGHBORS || mask.len() != N_NEIGHBORS || shc.iter().any(|b| b.len() != self.n_coeff) || prev_dirs.len() != self.n_prev {
            return Err(Error::Shape("state parts do not match the layout".into()));
        }
        let mut s = Vec::with_capacity(self.dim());
        for (b, &m) in shc.iter().zip(mask) {
            s.extend_from_slice(b);
            s.push(m);
        }
        for d in prev_dirs {
            s.extend_from_slice(d);
        }
        Ok(s)
    }

    /// Inverse of [`StateLayout::assemble`].
    pub fn disassemble<T: Real>(&self, s: &[T]) -> Result<(Vec<Vec<T>>, Vec<T>, Vec<Vec3<T>>)> {
        if s.len() != self.dim() {
            return Err(Error::Shape(format!("state has {} values, layout needs {}", s.len(), self.dim())));
        }
        let w = self.n_coeff + 1;
        let shc = (0..N_NEIGHBORS).map(|i| s[i * w..i * w + self.n_coeff].to_vec()).collect();
        let mask = (0..N_NEIGHBORS).map(|i| s[i * w + self.n_coeff]).collect();
        let base = self.neighborhood_dim();
        let prev = (0..self.n_prev).map(|i| [s[base + 3 * i], s[base + 3 * i + 1], s[base + 3 * i + 2]]).collect();
        Ok((shc, mask, prev))
    }
}

/// Writes the 7-voxel `[shc, mask]` neighborhood of voxel `v` (signed, may lie
/// outside the grid) into `out`; out-of-grid voxels contribute zeros.
pub fn neighborhood_features<T: Real>(field: &ShField<T>, mask: &TrackingMask<T>, v: [i64; 3], out: &mut [T]) {
    let nc = field.n_coeff;
    debug_assert_eq!(out.len(), N_NEIGHBORS * (nc + 1));
    for (k, d) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let block = &mut out[k * (nc + 1)..(k + 1) * (nc + 1)];
        let q = [v[0] + d[0] as i64, v[1] + d[1] as i64, v[2] + d[2] as i64];
        match field.spec.checked_index(q) {
            Some(q) => {
                block[..nc].copy_from_slice(field.voxel(q));
                block[nc] = if mask.get(q) { T::one() } else { T::zero() };
            }
            None => block.iter_mut().for_each(|x| *x = T::zero()),
        }
    }
}

/// Per-voxel fODF peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakMap<T> {
    pub spec: GridSpec<T>,
    peaks: Vec<Vec<Vec3<T>>>,
}

impl<T: Real> PeakMap<T> {
    pub fn from_vec(spec: GridSpec<T>, peaks: Vec<Vec<Vec3<T>>>) -> Result<Self> {
        if peaks.len() != spec.n_voxels() {
            return Err(Error::Shape("peak map size does not match grid".into()));
        }
        Ok(Self { spec, peaks })
    }

    /// Extracts peaks from `field`, only inside `within` when given.
    pub fn from_field(field: &ShField<T>, basis: &ShBasis<T>, cfg: &PeakConfig, within: Option<&TrackingMask<T>>) -> Result<Self> {
        let n = field.spec.n_voxels();
        let mut peaks = vec![Vec::new(); n];
        for (i, slot) in peaks.iter_mut().enumerate() {
            let v = field.spec.unravel(i);
            if within.is_some_and(|m| !m.get(v)) {
                continue;
            }
            let c = field.voxel(v);
            if c.iter().all(|&x| x == T::zero()) {
                continue;
            }
            *slot = extract_peaks(basis, c, cfg)?.peaks;
        }
        Ok(Self { spec: field.spec, peaks })
    }

    pub fn at(&self, v: VoxelIndex) -> &[Vec3<T>] {
        &self.peaks[self.spec.linear(v)]
    }

    pub fn at_point(&self, p: &Vec3<T>) -> &[Vec3<T>] {
        match self.spec.containing_voxel(p) {
            Some(v) => self.at(v),
            None => &[],
        }
    }
}

/// Read-only tracking data for one tract: field, mask and per-voxel peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct World<T> {
    pub field: ShField<T>,
    pub mask: TrackingMask<T>,
    pub peaks: PeakMap<T>,
}

impl<T: Real> World<T> {
    pub fn new(field: ShField<T>, mask: TrackingMask<T>, peaks: PeakMap<T>) -> Result<Self> {
        if field.spec != mask.spec || field.spec != peaks.spec {
            return Err(Error::InvalidGrid("field, mask and peaks must share one grid".into()));
        }
        Ok(Self { field, mask, peaks })
    }

    /// Peaks extracted from the field inside the mask.
    pub fn from_field(field: ShField<T>, mask: TrackingMask<T>, basis: &ShBasis<T>, cfg: &PeakConfig) -> Result<Self> {
        let peaks = PeakMap::from_field(&field, basis, cfg, Some(&mask))?;
        Self::new(field, mask, peaks)
    }

    pub fn env(&self, cfg: EnvConfig) -> Result<TrackingEnv<'_, T>> {
        TrackingEnv::new(cfg, &self.field, &self.mask, &self.peaks)
    }

    pub fn rollout_batch(&self, cfg: EnvConfig, seeds: &[Vec3<T>], policy: impl FnMut(&[usize], &[T]) -> Vec<Vec3<T>>) -> Result<Vec<Rollout<T>>> {
        rollout_batch(cfg, &self.field, &self.mask, &self.peaks, seeds, policy)
    }

    pub fn rollout_batch_with_rewards(&self, cfg: EnvConfig, seeds: &[Vec3<T>], policy: impl FnMut(&[usize], &[T], &[Option<T>]) -> Vec<Vec3<T>>) -> Result<Vec<Rollout<T>>> {
        rollout_batch_with_rewards(cfg, &self.field, &self.mask, &self.peaks, seeds, policy)
    }
}

/// Step reward `max_i |p_i . a| * (a . u_prev)` with `a` normalized; the
/// weighting factor is 1 without a previous direction. Peaks are axial, so the
/// absolute value makes the result independent of each peak's sign. Degenerate
/// actions and empty peak sets give 0.
pub fn reward<T: Real>(a: &Vec3<T>, peaks: &[Vec3<T>], u_prev: Option<&Vec3<T>>) -> T {
    let Some(ah) = vec3::normalized(a, T::lit(MIN_ACTION_NORM)) else { return T::zero() };
    if peaks.is_empty() {
        return T::zero();
    }
    let m = peaks.iter().map(|p| vec3::dot(p, &ah).abs()).fold(T::zero(), T::max);
    let w = u_prev.map_or(T::one(), |u| vec3::dot(&ah, u));
    (m * w).max(-T::one()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DoneReason {
    MaskExit,
    MaxLength,
    SharpAngle,
    DegenerateAction,
}

impl fmt::Display for DoneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaskExit => "mask_exit",
            Self::MaxLength => "max_length",
            Self::SharpAngle => "sharp_angle",
            Self::DegenerateAction => "degenerate_action",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub s: Vec<T>,
    pub a: Vec3<T>,
    pub r: T,
    pub s_next: Vec<T>,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// One tracking episode. Field, mask and peaks are borrowed read-only, so many
/// environments can share them.
pub struct TrackingEnv<'a, T> {
    pub cfg: EnvConfig,
    field: &'a ShField<T>,
    mask: &'a TrackingMask<T>,
    peaks: &'a PeakMap<T>,
    layout: StateLayout,
    pos: Vec3<T>,
    steps: usize,
    prev_dirs: Vec<Vec3<T>>,
    state: Vec<T>,
    done: bool,
    active: bool,
}

impl<'a, T: Real> TrackingEnv<'a, T> {
    pub fn new(cfg: EnvConfig, field: &'a ShField<T>, mask: &'a TrackingMask<T>, peaks: &'a PeakMap<T>) -> Result<Self> {
        cfg.validate()?;
        if field.spec != mask.spec || field.spec != peaks.spec {
            return Err(Error::InvalidGrid("field, mask and peaks must share one grid".into()));
        }
        let layout = StateLayout::new(field.n_coeff, cfg.n_prev_dirs);
        Ok(Self {
            prev_dirs: vec![[T::zero(); 3]; cfg.n_prev_dirs],
            cfg,
            field,
            mask,
            peaks,
            layout,
            pos: [T::zero(); 3],
            steps: 0,
            state: Vec::new(),
            done: false,
            active: false,
        })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn position(&self) -> Vec3<T> {
        self.pos
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> &[T] {
        &self.state
    }

    fn last_dir(&self) -> Option<Vec3<T>> {
        (self.steps > 0).then(|| self.prev_dirs[0])
    }

    fn assemble(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.layout.dim()];
        let nd = self.layout.neighborhood_dim();
        let v = self.field.spec.containing_voxel_signed(&self.pos);
        neighborhood_features(self.field, self.mask, v, &mut s[..nd]);
        for (i, d) in self.prev_dirs.iter().enumerate() {
            s[nd + 3 * i..nd + 3 * i + 3].copy_from_slice(d);
        }
        s
    }

    pub fn reset(&mut self, seed_mm: Vec3<T>) -> Result<Vec<T>> {
        if !self.mask.contains_point(&seed_mm) {
            return Err(Error::SeedOutsideMask(vec3::cast(&seed_mm)));
        }
        self.pos = seed_mm;
        self.steps = 0;
        self.prev_dirs.iter_mut().for_each(|d| *d = [T::zero(); 3]);
        self.done = false;
        self.active = true;
        self.state = self.assemble();
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: Vec3<T>) -> Result<Transition<T>> {
        if !self.active || self.done {
            return Err(Error::EpisodeDone);
        }
        let a = action.map(|x| x.max(-T::one()).min(T::one()));
        let s = self.state.clone();
        let Some(ah) = vec3::normalized(&a, T::lit(MIN_ACTION_NORM)) else {
            self.done = true;
            return Ok(Transition { s: s.clone(), a, r: T::zero(), s_next: s, done: true, done_reason: Some(DoneReason::DegenerateAction) });
        };
        let u_prev = self.last_dir();
        let r = reward(&ah, self.peaks.at_point(&self.pos), u_prev.as_ref());
        self.pos = vec3::add(&self.pos, &vec3::scale(&ah, T::lit(self.cfg.step_size_mm)));
        self.steps += 1;
        if self.cfg.n_prev_dirs > 0 {
            self.prev_dirs.rotate_right(1);
            self.prev_dirs[0] = ah;
        }
        let reason = if u_prev.is_some_and(|u| vec3::dot(&ah, &u).to_f64_lossy() < self.cfg.cos_max_angle()) {
            Some(DoneReason::SharpAngle)
        } else if !self.mask.contains_point(&self.pos) {
            Some(DoneReason::MaskExit)
        } else if self.steps >= self.cfg.max_steps || self.steps as f64 * self.cfg.step_size_mm > self.cfg.max_len_mm {
            Some(DoneReason::MaxLength)
        } else {
            None
        };
        self.done = reason.is_some();
        self.state = self.assemble();
        Ok(Transition { s, a, r, s_next: self.state.clone(), done: self.done, done_reason: reason })
    }
}

/// One seed's episode: visited states, actions and rewards, plus the streamline.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    pub streamline: crate::field::Streamline<T>,
    pub states: Vec<Vec<T>>,
    pub actions: Vec<Vec3<T>>,
    pub rewards: Vec<T>,
    pub final_state: Vec<T>,
    pub done_reason: DoneReason,
    /// Shorter than the minimum length; kept for RL training, dropped from tracts.
    pub discarded: bool,
}

impl<T: Real> Rollout<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transitions(&self) -> Vec<Transition<T>> {
        let n = self.len();
        (0..n)
            .map(|t| {
                let last = t + 1 == n;
                Transition {
                    s: self.states[t].clone(),
                    a: self.actions[t],
                    r: self.rewards[t],
                    s_next: if last { self.final_state.clone() } else { self.states[t + 1].clone() },
                    done: last,
                    done_reason: last.then_some(self.done_reason),
                }
            })
            .collect()
    }

    pub fn mean_reward(&self) -> T {
        if self.is_empty() {
            return T::zero();
        }
        self.rewards.iter().copied().sum::<T>() / T::from_usize_lossy(self.len())
    }
}

fn streamline_length_mm(n_points: usize, step: f64) -> f64 {
    n_points.saturating_sub(1) as f64 * step
}

/// Runs one episode from `seed_mm` under `policy`.
pub fn rollout<T: Real>(env: &mut TrackingEnv<'_, T>, mut policy: impl FnMut(&[T]) -> Vec3<T>, seed_mm: Vec3<T>) -> Result<Rollout<T>> {
    let mut out = rollout_batch(env.cfg.clone(), env.field, env.mask, env.peaks, &[seed_mm], |_, states| vec![policy(states)])?;
    Ok(out.pop().expect("one seed"))
}

/// Runs one episode per seed in lockstep. At every step `policy` receives the
/// ids (positions in `seeds`) of still-active episodes and their states
/// concatenated row-wise, and returns one action per active episode.
pub fn rollout_batch<T: Real>(
    cfg: EnvConfig,
    field: &ShField<T>,
    mask: &TrackingMask<T>,
    peaks: &PeakMap<T>,
    seeds: &[Vec3<T>],
    mut policy: impl FnMut(&[usize], &[T]) -> Vec<Vec3<T>>,
) -> Result<Vec<Rollout<T>>> {
    rollout_batch_with_rewards(cfg, field, mask, peaks, seeds, |ids, states, _| policy(ids, states))
}

/// As [`rollout_batch`], but the policy also sees the reward each active
/// episode received on its previous step (`None` before the first step).
pub fn rollout_batch_with_rewards<T: Real>(
    cfg: EnvConfig,
    field: &ShField<T>,
    mask: &TrackingMask<T>,
    peaks: &PeakMap<T>,
    seeds: &[Vec3<T>],
    mut policy: impl FnMut(&[usize], &[T], &[Option<T>]) -> Vec<Vec3<T>>,
) -> Result<Vec<Rollout<T>>> {
    let step = cfg.step_size_mm;
    let min_len = cfg.min_len_mm;
    let mut envs = Vec::with_capacity(seeds.len());
    let mut outs = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut e = TrackingEnv::new(cfg.clone(), field, mask, peaks)?;
        let s0 = e.reset(s)?;
        envs.push(e);
        outs.push((vec![s], vec![s0], Vec::new(), Vec::new(), None));
    }
    let mut active: Vec<usize> = (0..seeds.len()).collect();
    let mut buf = Vec::new();
    let mut last_r = Vec::new();
    while !active.is_empty() {
        buf.clear();
        last_r.clear();
        for &i in &active {
            buf.extend_from_slice(envs[i].state());
            last_r.push(outs[i].3.last().copied());
        }
        let acts = policy(&active, &buf, &last_r);
        if acts.len() != active.len() {
            return Err(Error::Shape(format!("policy returned {} actions for {} states", acts.len(), active.len())));
        }
        for (&i, a) in active.iter().zip(acts) {
            let tr = envs[i].step(a)?;
            let o = &mut outs[i];
            o.2.push(tr.a);
            o.3.push(tr.r);
            if tr.done_reason != Some(DoneReason::DegenerateAction) {
                o.0.push(envs[i].position());
            }
            if tr.done {
                o.4 = tr.done_reason;
            } else {
                o.1.push(tr.s_next);
            }
        }
        active.retain(|&i| !envs[i].is_done());
    }
    Ok(outs
        .into_iter()
        .zip(envs)
        .map(|((points, states, actions, rewards, reason), e)| {
            let discarded = streamline_length_mm(points.len(), step) < min_len;
            Rollout {
                streamline: crate::field::Streamline::new(points),
                states,
                actions,
                rewards,
                final_state: e.state().to_vec(),
                done_reason: reason.expect("finished episode"),
                discarded,
            }
        })
        .collect())
}

/// `seeds_per_voxel` uniform points in every mask voxel, in voxel order. Each
/// point depends only on `(rng_seed, voxel, k)`.
pub fn generate_seeds<T: Real>(mask: &TrackingMask<T>, seeds_per_voxel: usize, rng_seed: u64) -> Result<Vec<Vec3<T>>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let spec = &mask.spec;
    let mut out = Vec::with_capacity(mask.count() * seeds_per_voxel);
    for v in mask.indices() {
        let lin = spec.linear(v) as u64;
        for k in 0..seeds_per_voxel {
            let mut r = keyed(rng_seed, Domain::Seeds, &[lin, k as u64]);
            let mut p = [T::zero(); 3];
            for ax in 0..3 {
                let u: f64 = r.random();
                p[ax] = T::lit((v[ax] as f64 + u) * spec.spacing[ax].to_f64_lossy() + spec.origin[ax].to_f64_lossy());
            }
            // rounding can land exactly on the upper face; pull back to the voxel center
            if spec.containing_voxel(&p) != Some(v) {
                let c = spec.voxel_center(v);
                for ax in 0..3 {
                    if spec.containing_voxel_signed(&p)[ax] != v[ax] as i64 {
                        p[ax] = c[ax];
                    }
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let x = [1.0, 0.0, 0.0];
        let h = 0.5f64.sqrt();
        assert_eq!(reward(&x, &[x], Some(&x)), 1.0);
        assert_eq!(reward(&x, &[[0.0, 0.0, 1.0]], Some(&x)), 0.0);
        assert!((reward(&[h, h, 0.0], &[x, [0.0, 1.0, 0.0]], Some(&x)) - 0.5).abs() < 1e-15);
        assert_eq!(reward(&[-1.0, 0.0, 0.0], &[x], Some(&x)), -1.0);
        assert_eq!(reward(&[0.0, 0.0, 0.0], &[x], Some(&x)), 0.0);
        assert_eq!(reward(&x, &[x], None), 1.0);
    }

    #[test]
    fn layout_dims() {
        let l = StateLayout::new(45, 4);
        assert_eq!(l.dim(), 334);
        assert_eq!(l.neighborhood_dim(), 322);
    }

    #[test]
    fn default_config_validates() {
        EnvConfig::default().validate().unwrap();
        let bad = EnvConfig { max_steps: 500, ..EnvConfig::default() };
        assert!(bad.validate().is_err());
    }
}
