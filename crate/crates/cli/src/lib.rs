//! Pipeline orchestration for the `trlf` binary: phantom preparation, mask
//! refinement, level-1 agent training, dataset rollouts, transformer
//! pretraining and finetuning, tracking, cleaning, scoring and reporting.

pub mod config;
pub mod error;
pub mod meta;
pub mod stages;

pub use config::{PipelineConfig, Preset};
pub use error::{CliError, CliResult};
