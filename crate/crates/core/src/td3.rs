//! Level-1 policy: TD3 actor-critic with replay buffer and target networks.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{AdamW, AdamWConfig, Graph, ModelParams, Tensor};
use crate::env::{EnvConfig, Rollout, Transition, World, ACTION_DIM};
use crate::nn::{Act, Init, Mlp};
use crate::rng::{keyed, Domain, Rng};
use crate::scalar::vec3::Vec3;
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub sigma_train: f64,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub polyak_tau: f64,
    /// Multiplies rewards inside critic targets. 1 keeps `y = r + gamma * ..`;
    /// `1 - gamma` keeps returns inside the tanh critic's range.
    pub reward_scale: f64,
    pub episodes_per_batch: usize,
    /// Gradient updates per newly stored transition.
    pub updates_per_transition: f64,
    pub max_updates_per_batch: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            actor_hidden: vec![1024, 1024],
            critic_hidden: vec![1024, 1024],
            lr: 8.56e-6,
            gamma: 0.776,
            sigma_train: 0.334,
            buffer_capacity: 1_000_000,
            minibatch: 256,
            policy_delay: 2,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            polyak_tau: 0.005,
            reward_scale: 1.0,
            episodes_per_batch: 4096,
            updates_per_transition: 1.0,
            max_updates_per_batch: 1_000_000_000,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("td3 config: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(self.sigma_train >= 0.0) || self.target_noise < 0.0 || self.target_noise_clip < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if self.policy_delay == 0 || self.minibatch == 0 || self.buffer_capacity == 0 || self.episodes_per_batch == 0 {
            return bad("policy_delay, minibatch, buffer_capacity and episodes_per_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.polyak_tau) {
            return bad("polyak_tau must be in [0, 1]");
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        if !(self.reward_scale > 0.0) || !(self.updates_per_transition >= 0.0) {
            return bad("reward_scale must be positive and updates_per_transition non-negative");
        }
        AdamWConfig::with_lr(self.lr).validate()
    }
}

/// Column-major-free minibatch: states row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub s: Vec<T>,
    pub a: Vec<T>,
    pub r: Vec<T>,
    pub s_next: Vec<T>,
    pub done: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn from_transitions(ts: &[Transition<T>]) -> Self {
        let mut b = Self { s: Vec::new(), a: Vec::new(), r: Vec::new(), s_next: Vec::new(), done: Vec::new() };
        for t in ts {
            b.s.extend_from_slice(&t.s);
            b.a.extend_from_slice(&t.a);
            b.r.push(t.r);
            b.s_next.extend_from_slice(&t.s_next);
            b.done.push(t.done);
        }
        b
    }
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    dim: usize,
    cap: usize,
    len: usize,
    head: usize,
    s: Vec<T>,
    a: Vec<T>,
    r: Vec<T>,
    s_next: Vec<T>,
    done: Vec<bool>,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(state_dim: usize, capacity: usize) -> Self {
        Self { dim: state_dim, cap: capacity, len: 0, head: 0, s: Vec::new(), a: Vec::new(), r: Vec::new(), s_next: Vec::new(), done: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn push(&mut self, s: &[T], a: &Vec3<T>, r: T, s_next: &[T], done: bool) -> Result<()> {
        if s.len() != self.dim || s_next.len() != self.dim {
            return Err(Error::Shape(format!("replay expects states of length {}", self.dim)));
        }
        let d = self.dim;
        if self.len < self.cap {
            self.s.extend_from_slice(s);
            self.a.extend_from_slice(a);
            self.r.push(r);
            self.s_next.extend_from_slice(s_next);
            self.done.push(done);
            self.len += 1;
        } else {
            let i = self.head;
            self.s[i * d..(i + 1) * d].copy_from_slice(s);
            self.a[i * 3..i * 3 + 3].copy_from_slice(a);
            self.r[i] = r;
            self.s_next[i * d..(i + 1) * d].copy_from_slice(s_next);
            self.done[i] = done;
        }
        self.head = (self.head + 1) % self.cap;
        Ok(())
    }

    pub fn push_rollout(&mut self, ro: &Rollout<T>) -> Result<()> {
        let n = ro.len();
        for t in 0..n {
            let last = t + 1 == n;
            let next = if last { &ro.final_state } else { &ro.states[t + 1] };
            self.push(&ro.states[t], &ro.actions[t], ro.rewards[t], next, last)?;
        }
        Ok(())
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch<T>> {
        if self.len == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = self.dim;
        let mut b = Batch { s: Vec::with_capacity(n * d), a: Vec::with_capacity(n * 3), r: Vec::with_capacity(n), s_next: Vec::with_capacity(n * d), done: Vec::with_capacity(n) };
        for _ in 0..n {
            let i = rng.random_range(0..self.len);
            b.s.extend_from_slice(&self.s[i * d..(i + 1) * d]);
            b.a.extend_from_slice(&self.a[i * 3..i * 3 + 3]);
            b.r.push(self.r[i]);
            b.s_next.extend_from_slice(&self.s_next[i * d..(i + 1) * d]);
            b.done.push(self.done[i]);
        }
        Ok(b)
    }
}

pub const ACTOR: &str = "actor";
pub const CRITIC1: &str = "critic1";
pub const CRITIC2: &str = "critic2";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

/// Actor, twin critics, their targets and optimizers.
#[derive(Debug, Clone)]
pub struct Td3Agent<T> {
    pub cfg: Td3Config,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub online: ModelParams<T>,
    pub target: ModelParams<T>,
    actor_opt: AdamW<T>,
    critic_opt: AdamW<T>,
    updates: u64,
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(out);
    v
}

impl<T: Real> Td3Agent<T> {
    pub fn new(cfg: Td3Config, state_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::new(ACTOR, sizes(state_dim, &cfg.actor_hidden, ACTION_DIM), Act::Relu, Act::Tanh)?;
        let critic_sizes = sizes(state_dim + ACTION_DIM, &cfg.critic_hidden, 1);
        let critic1 = Mlp::new(CRITIC1, critic_sizes.clone(), Act::Relu, Act::Tanh)?;
        let critic2 = Mlp::new(CRITIC2, critic_sizes, Act::Relu, Act::Tanh)?;
        let mut online = ModelParams::new();
        actor.init(&mut online, Init::FanIn, &mut keyed(seed, Domain::Init, &[0]))?;
        critic1.init(&mut online, Init::FanIn, &mut keyed(seed, Domain::Init, &[1]))?;
        critic2.init(&mut online, Init::FanIn, &mut keyed(seed, Domain::Init, &[2]))?;
        let opt = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() };
        Ok(Self {
            target: online.clone(),
            online,
            actor,
            critic1,
            critic2,
            actor_opt: AdamW::new(opt)?,
            critic_opt: AdamW::new(opt)?,
            updates: 0,
            cfg,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.in_dim()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Deterministic actions for `rows` states.
    pub fn act(&self, states: &[T], rows: usize) -> Result<Vec<Vec3<T>>> {
        actor_forward(&self.actor, &self.online, states, rows)
    }

    /// Actor output plus `N(0, sigma^2)` per component, clamped to `[-1, 1]`.
    pub fn explore(&self, states: &[T], rows: usize, sigma: f64, rng: &mut Rng) -> Result<Vec<Vec3<T>>> {
        let a = self.act(states, rows)?;
        Ok(add_noise(a, sigma, None, rng))
    }

    /// Critic regression targets `scale * r + gamma * (1 - done) * min(Q1', Q2')`
    /// from the target networks only.
    pub fn critic_targets(&self, b: &Batch<T>, rng: &mut Rng) -> Result<Vec<T>> {
        let n = b.len();
        let a2 = actor_forward(&self.actor, &self.target, &b.s_next, n)?;
        let a2 = add_noise(a2, self.cfg.target_noise, Some(self.cfg.target_noise_clip), rng);
        let flat: Vec<T> = a2.iter().flatten().copied().collect();
        let q1 = critic_forward(&self.critic1, &self.target, &b.s_next, &flat, n)?;
        let q2 = critic_forward(&self.critic2, &self.target, &b.s_next, &flat, n)?;
        let g = T::lit(self.cfg.gamma);
        let sc = T::lit(self.cfg.reward_scale);
        Ok((0..n).map(|i| sc * b.r[i] + if b.done[i] { T::zero() } else { g * q1[i].min(q2[i]) }).collect())
    }

    /// One TD3 step: both critics regress to the targets; on every
    /// `policy_delay`-th step the actor ascends Q1 and the targets track the
    /// online networks.
    pub fn update(&mut self, b: &Batch<T>, rng: &mut Rng) -> Result<UpdateStats> {
        if b.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let y = self.critic_targets(b, rng)?;
        let mut g = Graph::eval();
        let loss = critic_loss(&mut g, &self.critic1, &self.critic2, &self.online, b, &y)?;
        let critic_l = g.value(loss).item().to_f64_lossy();
        let grads = g.backward(loss)?;
        self.critic_opt.step(&mut self.online, &grads)?;

        let mut stats = UpdateStats { critic_loss: critic_l, actor_loss: None };
        if self.updates.is_multiple_of(self.cfg.policy_delay as u64) {
            let mut g = Graph::eval();
            let loss = actor_loss(&mut g, &self.actor, &self.critic1, &self.online, b)?;
            stats.actor_loss = Some(g.value(loss).item().to_f64_lossy());
            let grads = g.backward(loss)?;
            self.actor_opt.step(&mut self.online, &grads)?;
            self.target.polyak_from(&self.online, T::lit(self.cfg.polyak_tau))?;
        }
        self.updates += 1;
        Ok(stats)
    }
}

fn add_noise<T: Real>(mut a: Vec<Vec3<T>>, sigma: f64, clip: Option<f64>, rng: &mut Rng) -> Vec<Vec3<T>> {
    if sigma == 0.0 {
        return a;
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for v in a.iter_mut().flatten() {
        let mut e: f64 = n.sample(rng);
        if let Some(c) = clip {
            e = e.clamp(-c, c);
        }
        *v = (*v + T::lit(e)).max(-T::one()).min(T::one());
    }
    a
}

/// `rows` actions from an actor network.
pub fn actor_forward<T: Real>(actor: &Mlp, params: &ModelParams<T>, states: &[T], rows: usize) -> Result<Vec<Vec3<T>>> {
    let out = actor.infer(params, states, rows)?;
    Ok(out.chunks(ACTION_DIM).map(|c| [c[0], c[1], c[2]]).collect())
}

/// `rows` Q-values of `concat(s, a)`.
pub fn critic_forward<T: Real>(critic: &Mlp, params: &ModelParams<T>, states: &[T], actions: &[T], rows: usize) -> Result<Vec<T>> {
    if rows == 0 || !states.len().is_multiple_of(rows) || actions.len() != rows * ACTION_DIM {
        return Err(Error::Shape("critic inputs".into()));
    }
    let d = states.len() / rows;
    let mut x = Vec::with_capacity(rows * (d + ACTION_DIM));
    for i in 0..rows {
        x.extend_from_slice(&states[i * d..(i + 1) * d]);
        x.extend_from_slice(&actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
    }
    critic.infer(params, &x, rows)
}

/// `MSE(Q1(s, a), y) + MSE(Q2(s, a), y)` on the tape.
pub fn critic_loss<T: Real>(g: &mut Graph<T>, c1: &Mlp, c2: &Mlp, params: &ModelParams<T>, b: &Batch<T>, y: &[T]) -> Result<crate::diffcore::Var> {
    let n = b.len();
    let d = b.s.len() / n;
    let s = g.constant(Tensor::new(vec![n, d], b.s.clone())?);
    let a = g.constant(Tensor::new(vec![n, ACTION_DIM], b.a.clone())?);
    let x = g.concat_lastdim(&[s, a])?;
    let q1 = c1.forward(g, params, x, false)?;
    let q2 = c2.forward(g, params, x, false)?;
    let l1 = g.mse(q1, y)?;
    let l2 = g.mse(q2, y)?;
    g.add(l1, l2)
}

/// `-mean(Q1(s, actor(s)))` with the critic held fixed.
pub fn actor_loss<T: Real>(g: &mut Graph<T>, actor: &Mlp, c1: &Mlp, params: &ModelParams<T>, b: &Batch<T>) -> Result<crate::diffcore::Var> {
    let n = b.len();
    let d = b.s.len() / n;
    let s = g.constant(Tensor::new(vec![n, d], b.s.clone())?);
    let a = actor.forward(g, params, s, false)?;
    let x = g.concat_lastdim(&[s, a])?;
    let q = c1.forward(g, params, x, true)?;
    let m = g.mean(q);
    Ok(g.scale(m, -T::one()))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct Td3LogRow {
    pub batch: usize,
    pub world: usize,
    pub episodes: usize,
    pub transitions: usize,
    /// Undiscounted episode return, averaged over the batch.
    pub mean_return: f64,
    pub mean_length: f64,
    pub mean_step_reward: f64,
    pub updates: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

impl Td3LogRow {
    pub fn to_line(&self) -> String {
        format!(
            "batch={} world={} episodes={} transitions={} return={:.6} length={:.3} step_reward={:.6} updates={} critic_loss={:.6e} actor_loss={:.6e}",
            self.batch,
            self.world,
            self.episodes,
            self.transitions,
            self.mean_return,
            self.mean_length,
            self.mean_step_reward,
            self.updates,
            self.critic_loss,
            self.actor_loss
        )
    }
}

/// Summary of a batch of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub transitions: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    /// Total reward over total steps.
    pub mean_step_reward: f64,
}

impl EpisodeStats {
    pub fn of<T: Real>(rollouts: &[Rollout<T>]) -> Self {
        let n = rollouts.len();
        let steps: usize = rollouts.iter().map(|r| r.len()).sum();
        let total: f64 = rollouts.iter().flat_map(|r| r.rewards.iter()).map(|r| r.to_f64_lossy()).sum();
        if n == 0 {
            return Self::default();
        }
        Self {
            episodes: n,
            transitions: steps,
            mean_return: total / n as f64,
            mean_length: steps as f64 / n as f64,
            mean_step_reward: if steps == 0 { 0.0 } else { total / steps as f64 },
        }
    }
}

/// Tracks every seed with the deterministic actor.
pub fn evaluate<T: Real>(agent: &Td3Agent<T>, world: &World<T>, env: &EnvConfig, seeds: &[Vec3<T>]) -> Result<Vec<Rollout<T>>> {
    let mut err = None;
    let out = world.rollout_batch(env.clone(), seeds, |ids, st| match agent.act(st, ids.len()) {
        Ok(a) => a,
        Err(e) => {
            err = Some(e);
            vec![[T::zero(); 3]; ids.len()]
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Alternates exploration rollouts (all transitions stored) with gradient
/// updates, cycling over `worlds`. `seeds[i]` are the seed points of
/// `worlds[i]`; each batch draws `episodes_per_batch` of them uniformly.
pub fn train_td3<T: Real>(
    cfg: &Td3Config,
    env: &EnvConfig,
    worlds: &[World<T>],
    seeds: &[Vec<Vec3<T>>],
    episode_budget: usize,
    rng_seed: u64,
    mut on_batch: impl FnMut(&Td3LogRow),
) -> Result<(Td3Agent<T>, Vec<Td3LogRow>)> {
    if worlds.is_empty() || worlds.len() != seeds.len() || seeds.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("train_td3 needs one non-empty seed list per world".into()));
    }
    let state_dim = crate::env::StateLayout::new(worlds[0].field.n_coeff, env.n_prev_dirs).dim();
    let mut agent = Td3Agent::new(cfg.clone(), state_dim, rng_seed)?;
    let mut buffer = ReplayBuffer::new(state_dim, cfg.buffer_capacity);
    let mut log = Vec::new();
    let mut done_eps = 0;
    let mut batch = 0;
    while done_eps < episode_budget {
        let wi = batch % worlds.len();
        let n_eps = cfg.episodes_per_batch.min(episode_budget - done_eps);
        let mut pick = keyed(rng_seed, Domain::Select, &[batch as u64]);
        let chosen: Vec<Vec3<T>> = (0..n_eps).map(|_| *seeds[wi].choose(&mut pick).expect("non-empty")).collect();
        let mut noise = keyed(rng_seed, Domain::Explore, &[batch as u64]);
        let mut err = None;
        let rollouts = worlds[wi].rollout_batch(env.clone(), &chosen, |ids, st| match agent.explore(st, ids.len(), cfg.sigma_train, &mut noise) {
            Ok(a) => a,
            Err(e) => {
                err = Some(e);
                vec![[T::zero(); 3]; ids.len()]
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        for ro in &rollouts {
            buffer.push_rollout(ro)?;
        }
        let st = EpisodeStats::of(&rollouts);
        let n_up = ((st.transitions as f64 * cfg.updates_per_transition).round() as usize).min(cfg.max_updates_per_batch);
        let (mut cl, mut al, mut na) = (0.0, 0.0, 0usize);
        for _ in 0..n_up {
            let u = agent.updates();
            let mb = buffer.sample(cfg.minibatch, &mut keyed(rng_seed, Domain::Replay, &[u]))?;
            let s = agent.update(&mb, &mut keyed(rng_seed, Domain::Explore, &[u64::MAX, u]))?;
            cl += s.critic_loss;
            if let Some(a) = s.actor_loss {
                al += a;
                na += 1;
            }
        }
        let row = Td3LogRow {
            batch,
            world: wi,
            episodes: st.episodes,
            transitions: st.transitions,
            mean_return: st.mean_return,
            mean_length: st.mean_length,
            mean_step_reward: st.mean_step_reward,
            updates: agent.updates(),
            critic_loss: if n_up > 0 { cl / n_up as f64 } else { 0.0 },
            actor_loss: if na > 0 { al / na as f64 } else { 0.0 },
        };
        log::debug!("{}", row.to_line());
        on_batch(&row);
        log.push(row);
        done_eps += n_eps;
        batch += 1;
    }
    Ok((agent, log))
}
