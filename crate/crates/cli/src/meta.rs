//! Sidecar metadata: every artifact `x` gets `x.meta` with its hash, the
//! resolved config hash, the seed and the code version.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&read(path)?))
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Context shared by every artifact of one command invocation.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub command: String,
    pub config_sha256: String,
    pub rng_seed: u64,
}

impl RunMeta {
    pub fn record(&self, artifact: &Path) -> CliResult<()> {
        let text = format!(
            "artifact={}\nsha256={}\ncommand={}\nconfig_sha256={}\nrng_seed={}\nversion={}\n",
            artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            file_sha256(artifact)?,
            self.command,
            self.config_sha256,
            self.rng_seed,
            trlf_core::VERSION,
        );
        write(&meta_path(artifact), text.as_bytes())
    }
}
