//! Artifacts of one training run.
//!
//! The manifest is written before training starts; epoch records and audit
//! files are appended as each epoch completes, so an aborted run leaves the
//! manifest plus every finished epoch on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use osda_core::data::OsdaTask;
use osda_core::threshold::ThresholdSchedule;
use osda_core::trainer::{AuditRow, EpochObserver, EpochRecord, Evaluation, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::fmt::{full, to_json, to_json_pretty};

pub const MANIFEST: &str = "manifest.json";
pub const LOG: &str = "train_log.jsonl";
pub const THRESHOLDS: &str = "threshold.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const AUDIT_DIR: &str = "audit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub path: String,
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    pub n_common: usize,
    pub n_total: usize,
    pub openness: f64,
}

impl TaskSummary {
    pub fn new(path: &Path, task: &OsdaTask) -> Self {
        Self {
            path: path.display().to_string(),
            n_source: task.n_source(),
            n_target: task.n_target(),
            dim: task.dim(),
            n_common: task.n_common,
            n_total: task.n_total,
            openness: task.openness(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub log: String,
    pub thresholds: String,
    pub audit_dir: Option<String>,
}

/// Everything needed to repeat a run on the same task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub task: TaskSummary,
    pub seed: u64,
    pub config: TrainConfig,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Epoch(&'a EpochRecord),
    Summary(&'a Summary),
}

/// Last line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub pretrain_final_loss: Option<f64>,
    pub final_h: Option<f64>,
    pub eval: Option<Evaluation>,
}

impl Summary {
    pub fn new(log: &TrainLog, eval: Option<Evaluation>) -> Self {
        Self {
            epochs: log.epochs.len(),
            pretrain_final_loss: log.pretrain_loss.last().copied(),
            final_h: log.final_h(),
            eval,
        }
    }
}

/// Streams epoch records into the run directory.
pub struct RunWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    audit: bool,
    error: Option<anyhow::Error>,
}

impl RunWriter {
    /// Creates `dir`, writes the manifest and opens the log.
    pub fn create(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, to_json_pretty(manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        let audit = manifest.artifacts.audit_dir.is_some();
        if audit {
            fs::create_dir_all(dir.join(AUDIT_DIR))?;
        }
        let log_path = dir.join(LOG);
        let log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
        Ok(Self { dir: dir.to_path_buf(), log, audit, error: None })
    }

    fn write_epoch(&mut self, record: &EpochRecord, audit: &[AuditRow]) -> Result<()> {
        writeln!(self.log, "{}", to_json(&LogLine::Epoch(record))?)?;
        self.log.flush()?;
        if self.audit {
            let path = self.dir.join(AUDIT_DIR).join(format!("epoch_{:03}.csv", record.epoch));
            write_audit(&path, audit)?;
        }
        Ok(())
    }

    /// Appends the summary, writes the threshold schedule and surfaces the
    /// first error hit while streaming epochs.
    pub fn finish(mut self, summary: &Summary, thresholds: &ThresholdSchedule) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.context("writing epoch records"));
        }
        writeln!(self.log, "{}", to_json(&LogLine::Summary(summary))?)?;
        self.log.flush()?;
        write_thresholds(&self.dir.join(THRESHOLDS), thresholds)
    }
}

impl EpochObserver for RunWriter {
    fn wants_audit(&self) -> bool {
        self.audit
    }

    fn on_epoch(&mut self, record: &EpochRecord, audit: &[AuditRow]) {
        if self.error.is_none() {
            if let Err(e) = self.write_epoch(record, audit) {
                self.error = Some(e);
            }
        }
    }
}

pub fn write_thresholds(path: &Path, schedule: &ThresholdSchedule) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["epoch", "h", "pairs", "lambda1"])?;
    for e in &schedule.entries {
        w.write_record([e.epoch.to_string(), full(e.h), e.pairs.to_string(), full(e.lambda1)])?;
    }
    w.flush()?;
    Ok(())
}

pub const AUDIT_HEADER: [&str; 8] = ["target", "omega_ent", "omega_cons", "omega_conf", "omega", "pseudo_label", "gated", "lambda2"];

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(AUDIT_HEADER)?;
    for r in rows {
        let s = &r.scores;
        w.write_record([
            r.target.to_string(),
            full(s.ent),
            full(s.cons),
            full(s.conf),
            full(s.omega),
            r.pseudo.to_string(),
            u8::from(r.gated).to_string(),
            r.lambda2.map(full).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
