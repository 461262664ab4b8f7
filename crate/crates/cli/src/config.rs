//! Pipeline configuration: a preset, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trlf_core::env::EnvConfig;
use trlf_core::mrm::MrmConfig;
use trlf_core::post::CleanConfig;
use trlf_core::sh::PeakConfig;
use trlf_core::td3::Td3Config;
use trlf_core::trlf::TrlfConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub dims: usize,
    pub spacing_mm: f64,
    pub fibers_per_bundle: usize,
    pub tube_radius_vox: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let pc = trlf_core::phantom::PhantomConfig::default();
        Self { dims: 32, spacing_mm: 1.0, fibers_per_bundle: pc.fibers_per_bundle, tube_radius_vox: pc.tube_radius_vox }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRlSection {
    pub episodes: usize,
}

impl Default for TrainRlSection {
    fn default() -> Self {
        Self { episodes: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajSection {
    /// Seeds per mask voxel for the dataset-generating rollouts.
    pub rollout_seeds_per_voxel: usize,
    pub n_per_tract: usize,
    pub n_mixed: usize,
}

impl Default for TrajSection {
    fn default() -> Self {
        Self { rollout_seeds_per_voxel: 10, n_per_tract: 2000, n_mixed: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub seeds_per_voxel: usize,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self { seeds_per_voxel: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    pub env: EnvConfig,
    pub peaks: PeakConfig,
    pub td3: Td3Config,
    pub train_rl: TrainRlSection,
    pub traj: TrajSection,
    pub trlf: TrlfConfig,
    pub mrm: MrmConfig,
    pub post: CleanConfig,
    pub track: TrackSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            out_dir: PathBuf::from("trlf_out"),
            phantom: PhantomSection::default(),
            env: EnvConfig::default(),
            peaks: PeakConfig::default(),
            td3: Td3Config::default(),
            train_rl: TrainRlSection::default(),
            traj: TrajSection::default(),
            trlf: TrlfConfig::default(),
            mrm: MrmConfig::default(),
            post: CleanConfig::default(),
            track: TrackSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Module defaults at full scale.
    Full,
    /// Phantom-scale settings that finish on a desktop CPU.
    Desk,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    /// 32^3 phantoms, a 256-wide TD3 agent and a short transformer schedule.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.phantom.fibers_per_bundle = 200;
        c.td3 = Td3Config {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            lr: 1e-3,
            buffer_capacity: 50_000,
            minibatch: 128,
            episodes_per_batch: 100,
            updates_per_transition: 0.1,
            reward_scale: 1.0 - c.td3.gamma,
            ..c.td3
        };
        c.trlf = TrlfConfig { pretrain_iters: 2, finetune_iters: 1, steps_per_iter: 100, batch_size: 16, lr: 1e-3, rtg_init: 70.0, ..c.trlf };
        c.mrm.epochs = 30;
        c
    }

    /// `base` overlaid with the TOML document `text`; unknown keys fail.
    pub fn overlay(base: &Self, text: &str) -> CliResult<Self> {
        let mut merged = toml::Value::try_from(base).map_err(|e| CliError::Config(e.to_string()))?;
        let over: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, over);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> CliResult<Self> {
        let base = Self::preset(preset);
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::overlay(&base, &text)
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.env.validate()?;
        self.td3.validate()?;
        self.trlf.validate()?;
        self.mrm.validate()?;
        self.post.validate()?;
        if self.phantom.dims == 0 || !(self.phantom.spacing_mm > 0.0) {
            return Err(CliError::Config("phantom dims and spacing must be positive".into()));
        }
        if self.traj.rollout_seeds_per_voxel == 0 || self.track.seeds_per_voxel == 0 {
            return Err(CliError::Config("seeds per voxel must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
