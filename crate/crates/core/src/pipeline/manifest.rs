use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::PipelineConfig;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        let mut bytes = 0u64;
        loop {
            let n = r
                .read(&mut buf)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(hasher.finalize()),
            bytes,
        })
    }
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: PipelineConfig,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub items: usize,
    pub failures: usize,
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig, threads: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: config.clone(),
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            items: 0,
            failures: 0,
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// `out.jsonl` -> `out.jsonl.manifest.json`
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
