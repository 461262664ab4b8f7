//! Pipeline stages. Each reads its inputs by path, writes artifacts plus
//! `.meta` sidecars, and returns what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use trlf_core::env::{generate_seeds, EnvConfig, Rollout, StateLayout, World};
use trlf_core::field::{GridSpec, ShField, Streamline, TrackingMask};
use trlf_core::io;
use trlf_core::mrm;
use trlf_core::phantom::{make_phantom, PhantomConfig, PhantomKind};
use trlf_core::post::{self, TractScores};
use trlf_core::scalar::vec3::Vec3;
use trlf_core::sh::{order_for, ShBasis, Sphere};
use trlf_core::td3::{self, EpisodeStats, Td3Agent};
use trlf_core::traj::{build_mixed_dataset, build_tract_dataset, DatasetKind, SelectionManifest, TrajectoryDataset};
use trlf_core::trlf::{self as tf, LossRow, Stage};
use trlf_core::ModelParams;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::meta::{self, RunMeta};

pub const FIELD: &str = "field.shf";
pub const GT_MASK: &str = "gt_mask.msk";
pub const AUG_MASK: &str = "aug_mask.msk";
pub const GT_TRACKS: &str = "gt.trk";
pub const TD3_CKPT: &str = "td3.ckp";
pub const TD3_LOG: &str = "td3_log.csv";
pub const MIXED: &str = "mixed";
pub const PRETRAINED: &str = "trlf_pretrained.ckp";

pub fn tract_name(i: usize) -> String {
    format!("tract_{i}")
}

pub fn finetuned_name(i: usize) -> String {
    format!("trlf_tract_{i}.ckp")
}

/// Resolved configuration plus per-invocation metadata.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub run: RunMeta,
    pub threads: usize,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, command: &str, threads: usize) -> Self {
        let run = RunMeta { command: command.to_string(), config_sha256: meta::sha256_hex(cfg.to_toml().as_bytes()), rng_seed: cfg.rng_seed };
        Self { cfg, run, threads: threads.max(1) }
    }

    /// Creates `dir` and writes the resolved config beside the outputs.
    fn begin(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        meta::write(&dir.join(format!("{}.config.toml", self.run.command)), self.cfg.to_toml().as_bytes())
    }

    fn begin_file(&self, file: &Path) -> CliResult<()> {
        self.begin(file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))
    }

    fn sub(&self, tag: &str, i: u64) -> u64 {
        subseed(self.cfg.rng_seed, tag, i)
    }

    fn save(&self, path: &Path, f: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> trlf_core::Result<()>) -> CliResult<()> {
        io::save(path, f).map_err(|e| match e {
            trlf_core::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            e => e.into(),
        })?;
        self.run.record(path)
    }

    fn save_text(&self, path: &Path, text: &str) -> CliResult<()> {
        meta::write(path, text.as_bytes())?;
        self.run.record(path)
    }
}

/// Independent stream seed for `(tag, i)` under the run seed.
pub fn subseed(seed: u64, tag: &str, i: u64) -> u64 {
    let mut b = seed.to_le_bytes().to_vec();
    b.extend_from_slice(tag.as_bytes());
    b.extend_from_slice(&i.to_le_bytes());
    let h = meta::sha256_hex(&b);
    u64::from_str_radix(&h[..16], 16).expect("hex")
}

pub fn require<'a>(path: &'a Path, stage: &'static str) -> CliResult<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), stage })
    }
}

fn load<R>(path: &Path, stage: &'static str, f: impl FnOnce(&mut std::io::BufReader<fs::File>) -> trlf_core::Result<R>) -> CliResult<R> {
    require(path, stage)?;
    io::load(path, f).map_err(|e| match e {
        trlf_core::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        e => e.into(),
    })
}

pub fn load_field(path: &Path) -> CliResult<ShField<f64>> {
    load(path, "phantom", io::read_field)
}

pub fn load_mask(path: &Path, stage: &'static str) -> CliResult<TrackingMask<f64>> {
    load(path, stage, io::read_mask)
}

pub fn load_tracks(path: &Path, stage: &'static str) -> CliResult<Vec<Streamline<f64>>> {
    load(path, stage, io::read_streamlines)
}

pub fn load_params(path: &Path, stage: &'static str) -> CliResult<ModelParams> {
    load(path, stage, io::read_params)
}

pub fn basis_for(field: &ShField<f64>) -> CliResult<ShBasis<f64>> {
    let order = order_for(field.n_coeff).ok_or_else(|| trlf_core::Error::Format(format!("{} is not an even SH coefficient count", field.n_coeff)))?;
    Ok(ShBasis::new(order, Sphere::symmetric_724())?)
}

/// Field plus tracking mask; the mask defaults to the subject's ground truth.
#[derive(Debug, Clone)]
pub struct Subject {
    pub field: PathBuf,
    pub mask: PathBuf,
}

impl Subject {
    pub fn from_dir(dir: &Path, mask: Option<&Path>) -> Self {
        Self { field: dir.join(FIELD), mask: mask.map_or_else(|| dir.join(GT_MASK), Path::to_path_buf) }
    }

    pub fn world(&self, peaks: &trlf_core::sh::PeakConfig) -> CliResult<World<f64>> {
        let field = load_field(&self.field)?;
        let mask = load_mask(&self.mask, "mrm-refine")?;
        let basis = basis_for(&field)?;
        Ok(World::from_field(field, mask, &basis, peaks)?)
    }
}

fn state_dim(field: &ShField<f64>, env: &EnvConfig) -> usize {
    StateLayout::new(field.n_coeff, env.n_prev_dirs).dim()
}

/// Runs `f` over contiguous seed chunks on up to `threads` workers and
/// concatenates the results in seed order.
fn par_chunks<R: Send>(seeds: &[Vec3<f64>], threads: usize, f: impl Fn(&[Vec3<f64>]) -> trlf_core::Result<Vec<R>> + Sync) -> CliResult<Vec<R>> {
    if threads <= 1 || seeds.len() < 2 {
        return Ok(f(seeds)?);
    }
    let per = seeds.len().div_ceil(threads);
    let parts: Vec<trlf_core::Result<Vec<R>>> = std::thread::scope(|s| {
        let hs: Vec<_> = seeds.chunks(per).map(|c| s.spawn(|| f(c))).collect();
        hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

// ---- phantom / inspect ----

#[derive(Debug, Clone)]
pub struct PhantomFiles {
    pub field: PathBuf,
    pub gt_mask: PathBuf,
    pub aug_mask: PathBuf,
    pub gt_tracks: PathBuf,
}

impl PhantomFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self { field: dir.join(FIELD), gt_mask: dir.join(GT_MASK), aug_mask: dir.join(AUG_MASK), gt_tracks: dir.join(GT_TRACKS) }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.field, &self.gt_mask, &self.aug_mask, &self.gt_tracks]
    }
}

pub fn phantom(ctx: &Ctx, kind: PhantomKind, seed: u64, out: &Path) -> CliResult<PhantomFiles> {
    ctx.begin(out)?;
    let c = &ctx.cfg;
    let n = c.phantom.dims;
    let spec = GridSpec::isotropic([n, n, n], c.phantom.spacing_mm)?;
    let basis = ShBasis::default_order8();
    let pc = PhantomConfig { fibers_per_bundle: c.phantom.fibers_per_bundle, tube_radius_vox: c.phantom.tube_radius_vox };
    let ph = make_phantom(kind, spec, seed, &pc, &basis)?;
    let aug = ph.gt_mask.dilate(c.mrm.aug_dilation_mm)?;
    let files = PhantomFiles::in_dir(out);
    ctx.save(&files.field, |w| io::write_field(w, &ph.field))?;
    ctx.save(&files.gt_mask, |w| io::write_mask(w, &ph.gt_mask))?;
    ctx.save(&files.aug_mask, |w| io::write_mask(w, &aug))?;
    ctx.save(&files.gt_tracks, |w| io::write_streamlines(w, &ph.gt_streamlines))?;
    log::info!("phantom {kind}: {} gt voxels, {} fibers", ph.gt_mask.count(), ph.gt_streamlines.len());
    Ok(files)
}

/// Grid summary and peak counts; with `voxel`, that voxel's peaks. Peaks can
/// be dumped as two-point streamlines centered on their voxels.
pub fn inspect(ctx: &Ctx, field: &Path, mask: Option<&Path>, voxel: Option<[usize; 3]>, peaks_out: Option<&Path>) -> CliResult<String> {
    let f = load_field(field)?;
    let m = match mask {
        Some(p) => Some(load_mask(p, "phantom")?),
        None => None,
    };
    let basis = basis_for(&f)?;
    let spec = f.spec;
    let mut s = String::new();
    let _ = writeln!(s, "dims={},{},{}", spec.dims[0], spec.dims[1], spec.dims[2]);
    let _ = writeln!(s, "spacing={},{},{}", spec.spacing[0], spec.spacing[1], spec.spacing[2]);
    let _ = writeln!(s, "n_coeff={}", f.n_coeff);
    if let Some(m) = &m {
        let _ = writeln!(s, "mask_voxels={}", m.count());
    }
    let within = match (voxel, &m) {
        (Some(v), _) => {
            if v.iter().zip(&spec.dims).any(|(a, d)| a >= d) {
                return Err(CliError::Usage(format!("voxel {v:?} outside grid {:?}", spec.dims)));
            }
            let mut one = TrackingMask::empty(spec);
            one.set(v, true);
            one
        }
        (None, Some(m)) => m.clone(),
        (None, None) => TrackingMask::full(spec),
    };
    let peaks = trlf_core::env::PeakMap::from_field(&f, &basis, &ctx.cfg.peaks, Some(&within))?;
    let mut hist = [0usize; 8];
    let mut segs = Vec::new();
    for v in within.indices() {
        let ps = peaks.at(v);
        hist[ps.len().min(7)] += 1;
        let c = spec.voxel_center(v);
        for p in ps {
            let h = 0.5 * spec.min_spacing();
            segs.push(Streamline::new(vec![[c[0] - h * p[0], c[1] - h * p[1], c[2] - h * p[2]], [c[0] + h * p[0], c[1] + h * p[1], c[2] + h * p[2]]]));
        }
        if voxel.is_some() {
            let _ = writeln!(s, "voxel={},{},{} n_peaks={}", v[0], v[1], v[2], ps.len());
            for p in ps {
                let _ = writeln!(s, "peak={:.6},{:.6},{:.6}", p[0], p[1], p[2]);
            }
        }
    }
    for (k, n) in hist.iter().enumerate().filter(|(_, &n)| n > 0) {
        let _ = writeln!(s, "voxels_with_{k}_peaks={n}");
    }
    if let Some(out) = peaks_out {
        ctx.begin_file(out)?;
        ctx.save(out, |w| io::write_streamlines(w, &segs))?;
    }
    Ok(s)
}

// ---- mask refinement ----

/// Synthetic refinement task on `field`: gt = voxels whose peak amplitude
/// exceeds `frac` of the global maximum, aug = gt dilated as configured.
pub fn mask_task(ctx: &Ctx, field: &Path, frac: f64, out: &Path) -> CliResult<(PathBuf, PathBuf)> {
    ctx.begin(out)?;
    let f = load_field(field)?;
    let gt = mrm::amplitude_mask(&f, &basis_for(&f)?, frac)?;
    let aug = gt.dilate(ctx.cfg.mrm.aug_dilation_mm)?;
    let (gp, ap) = (out.join("task_gt.msk"), out.join("task_aug.msk"));
    ctx.save(&gp, |w| io::write_mask(w, &gt))?;
    ctx.save(&ap, |w| io::write_mask(w, &aug))?;
    Ok((gp, ap))
}

pub fn mrm_train(ctx: &Ctx, field: &Path, aug: &Path, gt: &Path, out: &Path) -> CliResult<mrm::MrmReport> {
    ctx.begin_file(out)?;
    let f = load_field(field)?;
    let aug = load_mask(aug, "phantom")?;
    let gt = load_mask(gt, "phantom")?;
    let (p, rep) = mrm::train_mrm(&f, &aug, &gt, &ctx.cfg.mrm, ctx.sub("mrm", 0))?;
    ctx.save(out, |w| io::write_params(w, &p))?;
    ctx.save_text(&with_ext(out, "report"), &rep.to_text())?;
    Ok(rep)
}

pub fn mrm_refine(ctx: &Ctx, field: &Path, aug: &Path, model: &Path, out: &Path) -> CliResult<TrackingMask<f64>> {
    ctx.begin_file(out)?;
    let f = load_field(field)?;
    let aug = load_mask(aug, "phantom")?;
    let p = load_params(model, "mrm-train")?;
    let refined = mrm::refine_mask(&p, &ctx.cfg.mrm, &f, &aug)?;
    ctx.save(out, |w| io::write_mask(w, &refined))?;
    Ok(refined)
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

// ---- level-1 agent ----

pub fn td3_log_csv(rows: &[td3::Td3LogRow]) -> String {
    let mut s = String::from("batch,world,episodes,transitions,mean_return,mean_length,mean_step_reward,updates,critic_loss,actor_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.9},{:.6},{:.9},{},{:.9e},{:.9e}",
            r.batch, r.world, r.episodes, r.transitions, r.mean_return, r.mean_length, r.mean_step_reward, r.updates, r.critic_loss, r.actor_loss
        );
    }
    s
}

pub fn train_rl(ctx: &Ctx, subjects: &[Subject], out: &Path) -> CliResult<Vec<td3::Td3LogRow>> {
    if subjects.is_empty() {
        return Err(CliError::Usage("train-rl needs at least one --subject".into()));
    }
    ctx.begin(out)?;
    let c = &ctx.cfg;
    let worlds = subjects.iter().map(|s| s.world(&c.peaks)).collect::<CliResult<Vec<_>>>()?;
    let seeds = worlds
        .iter()
        .enumerate()
        .map(|(i, w)| generate_seeds(&w.mask, c.env.seeds_per_voxel, ctx.sub("train_seeds", i as u64)))
        .collect::<trlf_core::Result<Vec<_>>>()?;
    let (agent, log) = td3::train_td3(&c.td3, &c.env, &worlds, &seeds, c.train_rl.episodes, ctx.sub("td3", 0), |r| log::info!("{}", r.to_line()))?;
    ctx.save(&out.join(TD3_CKPT), |w| io::write_params(w, &agent.online))?;
    ctx.save_text(&out.join(TD3_LOG), &td3_log_csv(&log))?;
    Ok(log)
}

pub fn load_agent(ctx: &Ctx, path: &Path, state_dim: usize) -> CliResult<Td3Agent<f64>> {
    let p = load_params(path, "train-rl")?;
    let mut agent = Td3Agent::new(ctx.cfg.td3.clone(), state_dim, 0)?;
    for (name, seg) in agent.online.iter() {
        let got = p.get(name).map_err(|_| trlf_core::Error::Format(format!("checkpoint lacks `{name}`")))?;
        if got.shape() != seg.tensor.shape() {
            return Err(trlf_core::Error::Shape(format!("`{name}` is {:?} in the checkpoint, {:?} in the config", got.shape(), seg.tensor.shape())).into());
        }
    }
    agent.online = p;
    Ok(agent)
}

fn td3_rollouts(ctx: &Ctx, agent: &Td3Agent<f64>, world: &World<f64>, seeds: &[Vec3<f64>]) -> CliResult<Vec<Rollout<f64>>> {
    par_chunks(seeds, ctx.threads, |c| td3::evaluate(agent, world, &ctx.cfg.env, c))
}

#[derive(Debug, Clone)]
pub struct RolloutSummary {
    pub stats: Vec<EpisodeStats>,
    pub kept: Vec<usize>,
}

pub fn rollout(ctx: &Ctx, subjects: &[Subject], agent: &Path, out: &Path) -> CliResult<RolloutSummary> {
    if subjects.is_empty() {
        return Err(CliError::Usage("rollout needs at least one --subject".into()));
    }
    ctx.begin(out)?;
    let c = &ctx.cfg;
    let mut tracts = Vec::new();
    let mut sum = RolloutSummary { stats: Vec::new(), kept: Vec::new() };
    let mut csv = String::from("tract,episodes,kept,mean_length,mean_step_reward\n");
    for (i, s) in subjects.iter().enumerate() {
        let world = s.world(&c.peaks)?;
        let agent = load_agent(ctx, agent, state_dim(&world.field, &c.env))?;
        let seeds = generate_seeds(&world.mask, c.traj.rollout_seeds_per_voxel, ctx.sub("rollout_seeds", i as u64))?;
        let ro = td3_rollouts(ctx, &agent, &world, &seeds)?;
        let st = EpisodeStats::of(&ro);
        let kept = ro.iter().filter(|r| !r.discarded).count();
        let _ = writeln!(csv, "{i},{},{kept},{:.6},{:.9}", st.episodes, st.mean_length, st.mean_step_reward);
        let ds = build_tract_dataset(&[ro], i as u32, c.traj.n_per_tract, ctx.sub("select", i as u64))?;
        write_dataset(ctx, out, &tract_name(i), &ds)?;
        sum.stats.push(st);
        sum.kept.push(kept);
        tracts.push(ds);
    }
    let mixed = build_mixed_dataset(&tracts, c.traj.n_mixed, ctx.sub("select", u64::MAX))?;
    write_dataset(ctx, out, MIXED, &mixed)?;
    ctx.save_text(&out.join("rollout_stats.csv"), &csv)?;
    Ok(sum)
}

fn write_dataset(ctx: &Ctx, dir: &Path, name: &str, ds: &TrajectoryDataset<f64>) -> CliResult<()> {
    ctx.save(&dir.join(format!("{name}.trj")), |w| io::write_trajectories(w, &ds.trajectories))?;
    ctx.save_text(&dir.join(format!("{name}.manifest")), &format!("kind={}\n{}", ds.kind, ds.manifest.to_text()))
}

pub fn load_dataset(dir: &Path, name: &str, kind: DatasetKind, state_dim: usize) -> CliResult<TrajectoryDataset<f64>> {
    let trajectories = load(&dir.join(format!("{name}.trj")), "rollout", |r| io::read_trajectories(r, state_dim))?;
    let mpath = dir.join(format!("{name}.manifest"));
    let text = String::from_utf8_lossy(&meta::read(require(&mpath, "rollout")?)?).into_owned();
    let body = text.strip_prefix(&format!("kind={kind}\n")).ok_or_else(|| trlf_core::Error::DatasetKind { expected: if kind == DatasetKind::Mixed { "mixed" } else { "tract_specific" } })?;
    Ok(TrajectoryDataset { trajectories, kind, manifest: SelectionManifest::from_text(body)? })
}

// ---- level-2 transformer ----

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("stage,iter,step,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.9}", r.stage.name(), r.iter, r.step, r.loss);
    }
    s
}

pub fn pretrain(ctx: &Ctx, data: &Path, out: &Path) -> CliResult<Vec<LossRow>> {
    ctx.begin(out)?;
    let c = &ctx.cfg;
    let ds = load_dataset(data, MIXED, DatasetKind::Mixed, c.trlf.state_dim)?;
    let (p, log) = tf::pretrain(&ds, &c.trlf, ctx.sub("pretrain", 0), |i, _| {
        log::info!("pretrain iteration {i} done");
        Ok(())
    })?;
    let ck = out.join(PRETRAINED);
    ctx.save(&ck, |w| io::write_params(w, &p))?;
    ctx.save_text(&with_ext(&ck, "card"), &tf::model_card(&c.trlf, Stage::Pretrain, &p, c.rng_seed, &[(MIXED, &ds.manifest)]))?;
    ctx.save_text(&out.join("pretrain_loss.csv"), &loss_csv(&log))?;
    Ok(log)
}

pub fn finetune(ctx: &Ctx, data: &Path, tract: usize, pretrained: &Path, out: &Path) -> CliResult<Vec<LossRow>> {
    ctx.begin(out)?;
    let c = &ctx.cfg;
    let ds = load_dataset(data, &tract_name(tract), DatasetKind::TractSpecific, c.trlf.state_dim)?;
    let pre = load_params(pretrained, "pretrain")?;
    let (p, log) = tf::finetune(&pre, &ds, &c.trlf, ctx.sub("finetune", tract as u64), |i, _| {
        log::info!("finetune iteration {i} done");
        Ok(())
    })?;
    let ck = out.join(finetuned_name(tract));
    ctx.save(&ck, |w| io::write_params(w, &p))?;
    let name = tract_name(tract);
    ctx.save_text(&with_ext(&ck, "card"), &tf::model_card(&c.trlf, Stage::Finetune, &p, c.rng_seed, &[(name.as_str(), &ds.manifest)]))?;
    ctx.save_text(&out.join(format!("finetune_{tract}_loss.csv")), &loss_csv(&log))?;
    Ok(log)
}

// ---- tracking and evaluation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Policy {
    Td3,
    Trlf,
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub streamlines: Vec<Streamline<f64>>,
    pub stats: EpisodeStats,
}

pub fn track(ctx: &Ctx, policy: Policy, model: &Path, subject: &Subject, out: &Path) -> CliResult<TrackOutput> {
    ctx.begin_file(out)?;
    let c = &ctx.cfg;
    let world = subject.world(&c.peaks)?;
    let seeds = generate_seeds(&world.mask, c.track.seeds_per_voxel, ctx.sub("track_seeds", 0))?;
    let ro = match policy {
        Policy::Td3 => {
            let agent = load_agent(ctx, model, state_dim(&world.field, &c.env))?;
            td3_rollouts(ctx, &agent, &world, &seeds)?
        }
        Policy::Trlf => {
            let p = load_params(model, "finetune")?;
            let gens = par_chunks(&seeds, ctx.threads, |s| tf::generate_batch(&p, &c.trlf, &world, &c.env, s, c.trlf.rtg_init))?;
            gens.into_iter().map(|g| g.rollout).collect()
        }
    };
    let stats = EpisodeStats::of(&ro);
    let streamlines: Vec<_> = ro.into_iter().filter(|r| !r.discarded).map(|r| r.streamline).collect();
    ctx.save(out, |w| io::write_streamlines(w, &streamlines))?;
    let text = format!(
        "policy={policy:?}\nseeds={}\nkept={}\nmean_length={:.6}\nmean_step_reward={:.9}\n",
        stats.episodes,
        streamlines.len(),
        stats.mean_length,
        stats.mean_step_reward
    );
    ctx.save_text(&with_ext(out, "stats"), &text)?;
    Ok(TrackOutput { streamlines, stats })
}

pub fn clean(ctx: &Ctx, tracks: &Path, reference: &Path, out: &Path) -> CliResult<post::CleanReport> {
    ctx.begin_file(out)?;
    let t = load_tracks(tracks, "track")?;
    let r = load_tracks(reference, "phantom")?;
    let (kept, rep) = post::clean(&t, &r, &ctx.cfg.post)?;
    ctx.save(out, |w| io::write_streamlines(w, &kept))?;
    ctx.save_text(&with_ext(out, "rejections"), &rep.to_text())?;
    Ok(rep)
}

pub fn eval(ctx: &Ctx, tracks: &Path, gt_mask: &Path, out: &Path) -> CliResult<TractScores> {
    ctx.begin_file(out)?;
    let t = load_tracks(tracks, "clean")?;
    let gt = load_mask(gt_mask, "phantom")?;
    let sc = post::score(&post::voxelize(&t, &gt.spec), &gt)?;
    let text = format!("{}\nclean_radius_mm={}\novr_convention=outside_over_gt\n", sc.to_kv().replace(' ', "\n"), ctx.cfg.post.radius_mm);
    ctx.save_text(out, &text)?;
    Ok(sc)
}

// ---- report ----

fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn files_with(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_string_lossy().ends_with(suffix) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Aggregates logs and scores under `dir` into plot-ready series and a
/// summary table.
pub fn report(ctx: &Ctx, dir: &Path, out: &Path) -> CliResult<String> {
    require(dir, "eval")?;
    ctx.begin(out)?;
    let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();

    let mut reward = String::from("source,batch,world,mean_step_reward,critic_loss\n");
    for p in files_with(dir, TD3_LOG) {
        let text = String::from_utf8_lossy(&meta::read(&p)?).into_owned();
        for l in text.lines().skip(1) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() == 10 {
                let _ = writeln!(reward, "{},{},{},{},{}", rel(&p), f[0], f[1], f[6], f[8]);
            }
        }
    }
    let mut loss = String::from("source,stage,iter,step,loss\n");
    for p in files_with(dir, "_loss.csv") {
        let text = String::from_utf8_lossy(&meta::read(&p)?).into_owned();
        for l in text.lines().skip(1) {
            let _ = writeln!(loss, "{},{l}", rel(&p));
        }
    }
    let mut scores = String::from("source,dice,ovl,ovr,n_pred,n_gt\n");
    let mut table = String::from("| scores | dice | ovl | ovr |\n|---|---|---|---|\n");
    for p in files_with(dir, ".scores") {
        let kv = parse_kv(&String::from_utf8_lossy(&meta::read(&p)?));
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map_or("", |(_, v)| v.as_str()).to_string();
        let _ = writeln!(scores, "{},{},{},{},{},{}", rel(&p), get("dice"), get("ovl"), get("ovr"), get("n_pred"), get("n_gt"));
        let _ = writeln!(table, "| {} | {} | {} | {} |", rel(&p), get("dice"), get("ovl"), get("ovr"));
    }
    let mut tracking = String::from("source,policy,seeds,kept,mean_length,mean_step_reward\n");
    for p in files_with(dir, ".stats") {
        let kv = parse_kv(&String::from_utf8_lossy(&meta::read(&p)?));
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map_or("", |(_, v)| v.as_str()).to_string();
        let _ = writeln!(tracking, "{},{},{},{},{},{}", rel(&p), get("policy"), get("seeds"), get("kept"), get("mean_length"), get("mean_step_reward"));
    }
    ctx.save_text(&out.join("reward_trace.csv"), &reward)?;
    ctx.save_text(&out.join("loss_curves.csv"), &loss)?;
    ctx.save_text(&out.join("scores.csv"), &scores)?;
    ctx.save_text(&out.join("tracking.csv"), &tracking)?;
    ctx.save_text(&out.join("report.md"), &table)?;
    Ok(table)
}
