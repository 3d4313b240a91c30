//! Run directory layout:
//!
//! ```text
//! <run>/config.cfg            flat snapshot of the effective configuration
//! <run>/command.txt           the invoking command line
//! <run>/log.txt               append-only progress log
//! <run>/metrics.csv           one row per update
//! <run>/checkpoints/step-N/   saved training state
//! <run>/DONE                  present once the run completed
//! ```
//!
//! A completed run is never written again.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cemat::training::{MetricRow, MetricsWriter, METRICS_HEADER};

use crate::config::RunConfig;
use crate::UsageError;

pub const RUN_ROOT_ENV: &str = "CEMAT_RUN_ROOT";

pub struct RunDir {
    pub path: PathBuf,
    log: fs::File,
}

/// `--run-dir` if given, else `$CEMAT_RUN_ROOT/<name>` (or `runs/<name>`).
pub fn resolve(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name),
    }
}

impl RunDir {
    /// Starts a new run; the directory must not already hold one.
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        if path.join("config.cfg").exists() {
            bail!(UsageError(format!(
                "{} already holds a run; pass --resume or choose another --run-dir",
                path.display()
            )));
        }
        fs::create_dir_all(path.join("checkpoints")).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join("config.cfg"), cfg.to_text())?;
        let argv: Vec<String> = std::env::args().collect();
        fs::write(path.join("command.txt"), argv.join(" ") + "\n")?;
        Self::open_log(path)
    }

    /// Reopens an unfinished run and returns its snapshotted configuration.
    pub fn resume(path: &Path) -> Result<(Self, RunConfig)> {
        let snapshot = path.join("config.cfg");
        if !snapshot.exists() {
            bail!(UsageError(format!("{} holds no run to resume", path.display())));
        }
        if path.join("DONE").exists() {
            bail!(UsageError(format!("{} is a completed run", path.display())));
        }
        let cfg = RunConfig::preset("base")?.apply_file(&snapshot)?;
        Ok((Self::open_log(path)?, cfg))
    }

    fn open_log(path: &Path) -> Result<Self> {
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.join("log.txt"))
            .with_context(|| format!("opening {}", path.join("log.txt").display()))?;
        Ok(RunDir { path: path.to_path_buf(), log })
    }

    pub fn log(&mut self, msg: &str) -> Result<()> {
        eprintln!("{msg}");
        writeln!(self.log, "{msg}")?;
        Ok(())
    }

    pub fn checkpoint_dir(&self, step: u64) -> PathBuf {
        self.path.join("checkpoints").join(format!("step-{step:08}"))
    }

    /// Most recent checkpoint directory, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(self.path.join("checkpoints"))? {
            let p = entry?.path();
            let step = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step-"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(s) = step {
                if p.join("manifest.json").exists() && best.as_ref().map_or(true, |b| s > b.0) {
                    best = Some((s, p));
                }
            }
        }
        Ok(best.map(|b| b.1))
    }

    /// Metrics writer; rows after `keep_through` are dropped first so a
    /// resumed run does not repeat updates.
    pub fn metrics(&self, keep_through: u64) -> Result<MetricsWriter> {
        let path = self.path.join("metrics.csv");
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let kept: Vec<&str> = text
                .lines()
                .filter(|l| {
                    *l == METRICS_HEADER
                        || l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= keep_through)
                })
                .collect();
            fs::write(&path, kept.iter().map(|l| format!("{l}\n")).collect::<String>())?;
        }
        Ok(MetricsWriter::open(&path)?)
    }

    pub fn finish(mut self, last: Option<&MetricRow>) -> Result<()> {
        if let Some(r) = last {
            self.log(&format!("finished at step {} loss {:.4}", r.step, r.loss))?;
        }
        fs::write(self.path.join("DONE"), "")?;
        Ok(())
    }
}
