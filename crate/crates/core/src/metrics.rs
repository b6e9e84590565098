//! Metrics persistence: line-delimited JSON, one self-contained record per
//! trajectory, append-only.
//!
//! Wall-clock timings deliberately live in a separate sidecar file so the
//! primary stream is byte-identical across replays of the same seed.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Aggregated planner diagnostics over one trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerStats {
    /// Mean chosen-plan score over planned steps.
    pub mean_score: f64,
    /// Mean safe fraction of the chosen plan.
    pub mean_safe_frac: f64,
    /// Total safe-set threshold decays across the trajectory.
    pub total_decays: u64,
    /// Steps where the solve fell back to ignoring the safe set.
    pub fallback_steps: u64,
    /// Steps actually planned (frozen steps are skipped).
    pub planned_steps: u64,
}

/// One trajectory of experience, online or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Collection phase: "offline", "online", or "eval".
    pub phase: String,
    /// Online round index; 0 for offline data, final round for eval.
    pub round: usize,
    pub trajectory_id: u64,
    pub seed: u64,
    pub total_reward: f64,
    pub success: bool,
    pub violation: bool,
    /// Steps until first goal entry; horizon if never reached.
    pub steps_to_goal: usize,
    pub planner: PlannerStats,
}

/// Append-only JSONL writer.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Read every parseable record; each line stands alone, so a truncated tail
/// (crash mid-write) loses at most the final line.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(r) = serde_json::from_str(&line) {
            records.push(r);
        }
    }
    Ok(records)
}
