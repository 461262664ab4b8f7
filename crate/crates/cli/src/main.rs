use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trlf_cli::config::{PipelineConfig, Preset};
use trlf_cli::error::{CliError, CliResult, EXIT_OK};
use trlf_cli::stages::{self, Ctx, Policy, Subject};
use trlf_core::phantom::PhantomKind;

#[derive(Parser)]
#[command(name = "trlf", version, about = "Tract-specific streamline tracking with a distilled transformer policy")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides `rng_seed` from the config.
    #[arg(long = "rng-seed", global = true)]
    rng_seed: Option<u64>,
    #[arg(long, global = true, env = "TRLF_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SubjectArgs {
    /// Phantom directory (repeatable where several subjects are accepted).
    #[arg(long = "subject", required = true)]
    subjects: Vec<PathBuf>,
    /// Tracking mask file; defaults to each subject's ground-truth mask.
    #[arg(long)]
    mask: Option<PathBuf>,
}

impl SubjectArgs {
    fn resolve(&self) -> CliResult<Vec<Subject>> {
        if self.mask.is_some() && self.subjects.len() > 1 {
            return Err(CliError::Usage("--mask applies to a single --subject".into()));
        }
        Ok(self.subjects.iter().map(|d| Subject::from_dir(d, self.mask.as_deref())).collect())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the resolved configuration.
    Config,
    /// Write a synthetic subject: field, ground-truth and augmented masks, fibers.
    Phantom {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid summary and fODF peaks.
    Inspect {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// `i,j,k`
        #[arg(long, value_parser = parse_voxel)]
        voxel: Option<[usize; 3]>,
        #[arg(long)]
        peaks_out: Option<PathBuf>,
    },
    /// Amplitude-threshold refinement task masks for a field.
    MaskTask {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    MrmTrain {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        aug: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    MrmRefine {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        aug: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the level-1 agent jointly on all subjects.
    TrainRl {
        #[command(flatten)]
        subjects: SubjectArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out the agent and write tract-specific and mixed datasets.
    Rollout {
        #[command(flatten)]
        subjects: SubjectArgs,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tract: usize,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Track {
        #[arg(long, value_enum)]
        policy: Policy,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        subject: SubjectArgs,
        #[arg(long)]
        out: PathBuf,
    },
    Clean {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt_mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_voxel(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected i,j,k".to_string())
}

fn name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Config => "config",
        Cmd::Phantom { .. } => "phantom",
        Cmd::Inspect { .. } => "inspect",
        Cmd::MaskTask { .. } => "mask-task",
        Cmd::MrmTrain { .. } => "mrm-train",
        Cmd::MrmRefine { .. } => "mrm-refine",
        Cmd::TrainRl { .. } => "train-rl",
        Cmd::Rollout { .. } => "rollout",
        Cmd::Pretrain { .. } => "pretrain",
        Cmd::Finetune { .. } => "finetune",
        Cmd::Track { .. } => "track",
        Cmd::Clean { .. } => "clean",
        Cmd::Eval { .. } => "eval",
        Cmd::Report { .. } => "report",
    }
}

fn single(subjects: &SubjectArgs) -> CliResult<Subject> {
    let mut s = subjects.resolve()?;
    if s.len() != 1 {
        return Err(CliError::Usage("expected exactly one --subject".into()));
    }
    Ok(s.remove(0))
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let mut cfg = PipelineConfig::load(g.preset, g.config.as_deref())?;
    if let Some(s) = g.rng_seed {
        cfg.rng_seed = s;
    }
    if let Cmd::Phantom { dims: Some(d), .. } = &cli.cmd {
        cfg.phantom.dims = *d;
    }
    cfg.validate()?;
    let ctx = Ctx::new(cfg, name(&cli.cmd), g.threads);
    match &cli.cmd {
        Cmd::Config => print!("{}", ctx.cfg.to_toml()),
        Cmd::Phantom { kind, seed, out, .. } => {
            let kind: PhantomKind = kind.parse().map_err(|e: trlf_core::Error| CliError::Usage(e.to_string()))?;
            let files = stages::phantom(&ctx, kind, *seed, out)?;
            for p in files.all() {
                println!("{}", p.display());
            }
        }
        Cmd::Inspect { field, mask, voxel, peaks_out } => print!("{}", stages::inspect(&ctx, field, mask.as_deref(), *voxel, peaks_out.as_deref())?),
        Cmd::MaskTask { field, frac, out } => {
            let (gt, aug) = stages::mask_task(&ctx, field, *frac, out)?;
            println!("{}\n{}", gt.display(), aug.display());
        }
        Cmd::MrmTrain { field, aug, gt, out } => print!("{}", stages::mrm_train(&ctx, field, aug, gt, out)?.to_text()),
        Cmd::MrmRefine { field, aug, model, out } => println!("refined_voxels={}", stages::mrm_refine(&ctx, field, aug, model, out)?.count()),
        Cmd::TrainRl { subjects, out } => {
            let log = stages::train_rl(&ctx, &subjects.resolve()?, out)?;
            if let Some(r) = log.last() {
                println!("{}", r.to_line());
            }
        }
        Cmd::Rollout { subjects, agent, out } => {
            let s = stages::rollout(&ctx, &subjects.resolve()?, agent, out)?;
            for (i, (st, k)) in s.stats.iter().zip(&s.kept).enumerate() {
                println!("tract={i} episodes={} kept={k} mean_step_reward={:.6}", st.episodes, st.mean_step_reward);
            }
        }
        Cmd::Pretrain { data, out } => print_last_loss(&stages::pretrain(&ctx, data, out)?),
        Cmd::Finetune { data, tract, pretrained, out } => print_last_loss(&stages::finetune(&ctx, data, *tract, pretrained, out)?),
        Cmd::Track { policy, model, subject, out } => {
            let t = stages::track(&ctx, *policy, model, &single(subject)?, out)?;
            println!("streamlines={} mean_step_reward={:.6}", t.streamlines.len(), t.stats.mean_step_reward);
        }
        Cmd::Clean { tracks, reference, out } => {
            let r = stages::clean(&ctx, tracks, reference, out)?;
            println!("kept={} rejected={}", r.n_kept(), r.records.len() - r.n_kept());
        }
        Cmd::Eval { tracks, gt_mask, out } => {
            let sc = stages::eval(&ctx, tracks, gt_mask, out)?;
            print!("{}", sc.to_kv().replace(' ', "\n"));
            println!();
        }
        Cmd::Report { dir, out } => print!("{}", stages::report(&ctx, dir, out)?),
    }
    Ok(())
}

fn print_last_loss(rows: &[trlf_core::trlf::LossRow]) {
    if let Some(r) = rows.last() {
        println!("{}", r.to_line());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
