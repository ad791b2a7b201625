//! Bundle directory writer.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, OUTPUT_ROOT_ENV};

pub const MANIFEST: &str = "manifest.json";
pub const HASH_COLUMN: &str = "config_hash";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub verb: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub wall_time_s: f64,
    pub status: String,
    pub files: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest, CliError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::Config(format!("missing manifest {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Bundle location: explicit `--out`, else `output_dir` from the config,
/// else `<root>/<verb>` where the root comes from the environment or
/// defaults to `runs`.
pub fn resolve_dir(cfg: &RunConfig, verb: &str, out: Option<&Path>) -> PathBuf {
    if let Some(p) = out {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    match &cfg.output_dir {
        Some(d) if Path::new(d).is_absolute() => PathBuf::from(d),
        Some(d) => root.join(d),
        None => root.join(verb),
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub struct Bundle {
    dir: PathBuf,
    verb: String,
    config: RunConfig,
    hash: String,
    started: Instant,
    files: Vec<String>,
}

impl Bundle {
    pub fn create(dir: PathBuf, verb: &str, config: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)?;
        Ok(Bundle {
            dir,
            verb: verb.to_string(),
            hash: config.hash(),
            config: config.clone(),
            started: Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Writes a CSV with a trailing `config_hash` column on every row.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        let mut head: Vec<&str> = header.to_vec();
        head.push(HASH_COLUMN);
        w.write_record(&head)?;
        for r in rows {
            w.write_record(r.iter().map(String::as_str).chain([self.hash.as_str()]))?;
        }
        w.flush()?;
        self.record(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), text)?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    /// Writes the manifest, marking the run as passed or failed.
    pub fn finish(mut self, passed: bool) -> Result<PathBuf, CliError> {
        self.files.sort();
        let manifest = Manifest {
            verb: self.verb,
            config_hash: self.hash,
            seed: self.config.seed,
            git_describe: git_describe(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            status: if passed { "pass" } else { "fail" }.to_string(),
            files: self.files,
            config: self.config,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(self.dir)
    }
}
