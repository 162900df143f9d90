//! Append-only store of trial results plus derived per-configuration state.
//!
//! On disk a run directory holds:
//!   - `trials.jsonl`       one JSON object per trial, append-only
//!   - `configs.jsonl`      config_id -> values, written once per config
//!   - `evaluations.jsonl`  one line per completed evaluation (detector,
//!     adjustment, and aggregation outputs in completion order)
//!   - `run.json`           the run manifest
//!
//! The same catalog also runs fully in memory for tests and library use.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::configspace::{Configuration, ConfigurationRecord, ParamValue};
use crate::error::{Error, Result};
use crate::objective::Direction;

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const CONFIGS_FILE: &str = "configs.jsonl";
pub const EVALUATIONS_FILE: &str = "evaluations.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const BEST_CONFIG_FILE: &str = "best_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Crashed,
    Timeout,
}

/// One evaluation of a configuration on one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub config_id: u64,
    pub worker_id: usize,
    /// Worker-count of the evaluation this trial was collected for.
    pub budget: usize,
    pub performance: Option<f64>,
    pub adjusted_performance: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    pub status: TrialStatus,
}

impl TrialRecord {
    fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::Validation("trial budget must be >= 1".into()));
        }
        match self.status {
            TrialStatus::Ok => match self.performance {
                Some(p) if p.is_finite() => {}
                _ => {
                    return Err(Error::Validation(
                        "ok trial requires finite performance".into(),
                    ))
                }
            },
            _ => {}
        }
        if self.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite metric value".into()));
        }
        Ok(())
    }
}

/// Per-evaluation log entry: the detector/adjuster/aggregation outputs for
/// one completed (config, budget) evaluation, in completion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub iteration: u64,
    pub config_id: u64,
    pub budget: usize,
    pub trial_ids: Vec<u64>,
    pub relative_range: f64,
    pub is_unstable: bool,
    pub threshold: f64,
    pub raw_samples: Vec<f64>,
    pub adjusted_samples: Vec<f64>,
    pub reported_score: f64,
    /// Rows in the noise model at the time the adjustment ran.
    pub model_rows: usize,
}

/// Derived, in-memory view of one configuration's history.
#[derive(Debug, Clone, Default)]
pub struct ConfigSummary {
    pub record_indexes: Vec<usize>,
    pub workers: std::collections::BTreeSet<usize>,
    pub verdict: Option<(f64, bool, f64)>, // (relative_range, is_unstable, threshold)
    pub reported_score: Option<f64>,
}

impl ConfigSummary {
    /// Highest budget this configuration actually completed: the largest
    /// recorded budget whose total sample requirement is met.
    pub fn max_budget_reached(&self, records: &[TrialRecord]) -> usize {
        let n = self.record_indexes.len();
        self.record_indexes
            .iter()
            .map(|&i| records[i].budget)
            .filter(|&b| b <= n)
            .max()
            .unwrap_or(0)
    }
}

/// A training row for the noise-adjuster model.
#[derive(Debug, Clone)]
pub struct TrainingRow {
    pub config_id: u64,
    pub worker_id: usize,
    pub metrics: BTreeMap<String, f64>,
    pub performance: f64,
}

struct Sink {
    trials: BufWriter<File>,
    configs: BufWriter<File>,
    evaluations: BufWriter<File>,
    dir: PathBuf,
}

pub struct Catalog {
    records: Vec<TrialRecord>,
    summaries: BTreeMap<u64, ConfigSummary>,
    config_values: BTreeMap<u64, BTreeMap<String, ParamValue>>,
    evaluations: Vec<EvaluationRecord>,
    next_trial_id: u64,
    sink: Option<Sink>,
}

impl Catalog {
    /// Purely in-memory catalog.
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            summaries: BTreeMap::new(),
            config_values: BTreeMap::new(),
            evaluations: Vec::new(),
            next_trial_id: 1,
            sink: None,
        }
    }

    /// Create a fresh catalog in `dir` (truncating any previous files).
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(dir.join(name))?,
            ))
        };
        let mut cat = Self::in_memory();
        cat.sink = Some(Sink {
            trials: open(TRIALS_FILE)?,
            configs: open(CONFIGS_FILE)?,
            evaluations: open(EVALUATIONS_FILE)?,
            dir: dir.to_path_buf(),
        });
        Ok(cat)
    }

    /// Reopen an existing catalog directory; appends continue from the last
    /// trial id.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut cat = Self::in_memory();
        let trials_path = dir.join(TRIALS_FILE);
        if trials_path.exists() {
            for line in BufReader::new(File::open(&trials_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: TrialRecord = serde_json::from_str(&line)?;
                cat.index_record(record)?;
            }
        }
        let configs_path = dir.join(CONFIGS_FILE);
        if configs_path.exists() {
            for line in BufReader::new(File::open(&configs_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ConfigurationRecord = serde_json::from_str(&line)?;
                cat.config_values.insert(rec.config_id, rec.values);
            }
        }
        let evals_path = dir.join(EVALUATIONS_FILE);
        if evals_path.exists() {
            for line in BufReader::new(File::open(&evals_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: EvaluationRecord = serde_json::from_str(&line)?;
                cat.summaries.entry(ev.config_id).or_default().verdict =
                    Some((ev.relative_range, ev.is_unstable, ev.threshold));
                cat.summaries.entry(ev.config_id).or_default().reported_score =
                    Some(ev.reported_score);
                cat.evaluations.push(ev);
            }
        }
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(name))?,
            ))
        };
        cat.sink = Some(Sink {
            trials: open(TRIALS_FILE)?,
            configs: open(CONFIGS_FILE)?,
            evaluations: open(EVALUATIONS_FILE)?,
            dir: dir.to_path_buf(),
        });
        Ok(cat)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.dir.as_path())
    }

    fn index_record(&mut self, record: TrialRecord) -> Result<()> {
        record.validate()?;
        let summary = self.summaries.entry(record.config_id).or_default();
        if !summary.workers.insert(record.worker_id) {
            return Err(Error::Exclusion {
                config_id: record.config_id,
                worker_id: record.worker_id,
            });
        }
        summary.record_indexes.push(self.records.len());
        self.next_trial_id = self.next_trial_id.max(record.trial_id + 1);
        self.records.push(record);
        Ok(())
    }

    /// Append a trial. The record's `trial_id` is assigned here; the stored
    /// record is durable before this returns.
    pub fn append(&mut self, mut record: TrialRecord) -> Result<u64> {
        record.trial_id = self.next_trial_id;
        let id = record.trial_id;
        record.validate()?;
        if self
            .summaries
            .get(&record.config_id)
            .map(|s| s.workers.contains(&record.worker_id))
            .unwrap_or(false)
        {
            return Err(Error::Exclusion {
                config_id: record.config_id,
                worker_id: record.worker_id,
            });
        }
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record)?;
            sink.trials.write_all(line.as_bytes())?;
            sink.trials.write_all(b"\n")?;
            sink.trials.flush()?;
        }
        self.index_record(record)?;
        Ok(id)
    }

    /// Record a configuration's values (once per config id).
    pub fn register_config(&mut self, config: &Configuration) -> Result<()> {
        if self.config_values.contains_key(&config.id()) {
            return Ok(());
        }
        self.config_values
            .insert(config.id(), config.values().clone());
        if let Some(sink) = &mut self.sink {
            let rec = ConfigurationRecord {
                config_id: config.id(),
                values: config.values().clone(),
            };
            let line = serde_json::to_string(&rec)?;
            sink.configs.write_all(line.as_bytes())?;
            sink.configs.write_all(b"\n")?;
            sink.configs.flush()?;
        }
        Ok(())
    }

    pub fn config_values(&self, config_id: u64) -> Option<&BTreeMap<String, ParamValue>> {
        self.config_values.get(&config_id)
    }

    pub fn append_evaluation(&mut self, ev: EvaluationRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&ev)?;
            sink.evaluations.write_all(line.as_bytes())?;
            sink.evaluations.write_all(b"\n")?;
            sink.evaluations.flush()?;
        }
        self.evaluations.push(ev);
        Ok(())
    }

    pub fn evaluations(&self) -> &[EvaluationRecord] {
        &self.evaluations
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All records for a configuration in trial-id order; empty if unknown.
    pub fn samples_for(&self, config_id: u64) -> Vec<&TrialRecord> {
        self.summaries
            .get(&config_id)
            .map(|s| s.record_indexes.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    /// Workers that already measured this configuration.
    pub fn workers_for(&self, config_id: u64) -> std::collections::BTreeSet<usize> {
        self.summaries
            .get(&config_id)
            .map(|s| s.workers.clone())
            .unwrap_or_default()
    }

    pub fn summary(&self, config_id: u64) -> Option<&ConfigSummary> {
        self.summaries.get(&config_id)
    }

    pub fn summaries(&self) -> impl Iterator<Item = (&u64, &ConfigSummary)> {
        self.summaries.iter()
    }

    pub fn max_budget_reached(&self, config_id: u64) -> usize {
        self.summaries
            .get(&config_id)
            .map(|s| s.max_budget_reached(&self.records))
            .unwrap_or(0)
    }

    pub fn set_verdict(&mut self, config_id: u64, relative_range: f64, is_unstable: bool, threshold: f64) {
        self.summaries.entry(config_id).or_default().verdict =
            Some((relative_range, is_unstable, threshold));
    }

    pub fn set_reported_score(&mut self, config_id: u64, score: f64) {
        self.summaries.entry(config_id).or_default().reported_score = Some(score);
    }

    pub fn reported_score(&self, config_id: u64) -> Option<f64> {
        self.summaries.get(&config_id).and_then(|s| s.reported_score)
    }

    /// Rows for the noise-adjuster: every sample of every stable
    /// configuration that completed the given maximum budget.
    pub fn training_rows(&self, max_budget: usize) -> Vec<TrainingRow> {
        let mut rows = Vec::new();
        for (&config_id, summary) in &self.summaries {
            if summary.max_budget_reached(&self.records) != max_budget {
                continue;
            }
            match summary.verdict {
                Some((_, false, _)) => {}
                _ => continue, // unstable or still pending
            }
            for &i in &summary.record_indexes {
                let r = &self.records[i];
                if r.status != TrialStatus::Ok {
                    continue;
                }
                rows.push(TrainingRow {
                    config_id,
                    worker_id: r.worker_id,
                    metrics: r.metrics.clone(),
                    performance: r.performance.expect("ok trial has performance"),
                });
            }
        }
        rows
    }

    /// Configuration with the extremal reported score; ties break toward the
    /// lower config id.
    pub fn best_config(&self, direction: Direction) -> Result<u64> {
        let mut best: Option<(u64, f64)> = None;
        for (&id, summary) in &self.summaries {
            let Some(score) = summary.reported_score else {
                continue;
            };
            match best {
                None => best = Some((id, score)),
                Some((_, s)) if direction.better(score, s) => best = Some((id, score)),
                _ => {}
            }
        }
        best.map(|(id, _)| id)
            .ok_or_else(|| Error::State("no configuration has a reported score".into()))
    }
}

/// The run manifest: everything needed to interpret or replay a catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub mode: String,
    pub optimizer: String,
    pub trials: usize,
    pub pool: usize,
    pub threshold: f64,
    pub detector_enabled: bool,
    pub model_enabled: bool,
    pub guardrail: bool,
    pub objective: crate::objective::ObjectiveSpec,
    pub rung_budgets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_penalty: Option<f64>,
    pub space: serde_json::Value,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let f = File::open(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}
