use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config_sha256: String,
    pub code_version: &'static str,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

/// Tracks one command invocation and serializes it as `run.json` when done.
pub struct RunTracker {
    started: Instant,
    command: String,
    config_sha256: String,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl RunTracker {
    pub fn new(command: impl Into<String>, config_toml: &str, seed: Option<u64>) -> Self {
        Self {
            started: Instant::now(),
            command: command.into(),
            config_sha256: hex_digest(config_toml.as_bytes()),
            seed,
            outputs: Vec::new(),
        }
    }

    /// Registers a produced artifact so the record lists everything the
    /// command wrote.
    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `run.json` into `dir` and returns its path.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let record = RunRecord {
            command: self.command,
            config_sha256: self.config_sha256,
            code_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        };
        let path = dir.join("run.json");
        let body = serde_json::to_string_pretty(&record)?;
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force` is
/// set; with `force` the previous contents are removed.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                anyhow::bail!(
                    "output directory {} already exists and is not empty (use --force to overwrite)",
                    dir.display()
                );
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_sha256() {
        // SHA-256 of the empty string is a published constant.
        assert_eq!(
            hex_digest(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn prepare_refuses_non_empty_without_force() {
        let dir = std::env::temp_dir().join(format!("prov-test-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("stale.txt"), "x").unwrap();

        assert!(prepare_out_dir(&dir, false).is_err());
        prepare_out_dir(&dir, true).unwrap();
        assert!(fs::read_dir(&dir).unwrap().next().is_none());

        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tracker_writes_run_json() {
        let dir = std::env::temp_dir().join(format!("prov-run-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();

        let mut tracker = RunTracker::new("collect", "a = 1\n", Some(5));
        tracker.record_output(&dir.join("episode_000.json"));
        let path = tracker.finish(&dir).unwrap();

        let body = fs::read_to_string(path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(value["command"], "collect");
        assert_eq!(value["seed"], 5);
        assert_eq!(value["config_sha256"].as_str().unwrap().len(), 64);
        assert!(value["wall_time_s"].as_f64().unwrap() >= 0.0);
        assert_eq!(value["outputs"].as_array().unwrap().len(), 1);

        fs::remove_dir_all(&dir).unwrap();
    }
}
