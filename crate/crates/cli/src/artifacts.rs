//! Output files stamped with the tool version and the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default output directory when neither the config nor ANIFRAME_OUT sets one.
pub const DEFAULT_OUT: &str = "aniframe-out";

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Config entry, then ANIFRAME_OUT, then the default.
pub fn resolve_out_dir(from_config: Option<&Path>) -> PathBuf {
    if let Some(p) = from_config {
        return p.to_path_buf();
    }
    match std::env::var_os("ANIFRAME_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT),
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    config_sha256: &'a str,
    subcommand: &'a str,
    result: &'a T,
}

pub struct Artifacts {
    dir: PathBuf,
    hash: String,
    subcommand: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: PathBuf, hash: String, subcommand: &str) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Artifacts {
            dir,
            hash,
            subcommand: subcommand.into(),
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn header_line(&self) -> String {
        format!("# aniframe {VERSION} {} config-sha256={}\n", self.subcommand, self.hash)
    }

    /// JSON wrapped in an envelope carrying version and hash.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let env = Envelope {
            tool: "aniframe",
            version: VERSION,
            config_sha256: &self.hash,
            subcommand: &self.subcommand,
            result: value,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// CSV body produced by `body`, preceded by a `#` header line.
    pub fn csv<F>(&mut self, name: &str, body: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> aniframe_core::Result<()>,
    {
        let mut buf = self.header_line().into_bytes();
        body(&mut buf)?;
        self.write(name, &buf)
    }

    /// Binary formats carry their own header; the JSON summary names them.
    pub fn binary<F>(&mut self, name: &str, save: F) -> anyhow::Result<()>
    where
        F: FnOnce(&Path) -> aniframe_core::Result<()>,
    {
        let path = self.path(name);
        save(&path)?;
        self.written.push(path);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }
}
