//! Worker pool, eligibility-constrained scheduling queue, and trial
//! backends.
//!
//! Evaluations reuse samples taken at lower budgets, so the queue tracks
//! which workers already measured a configuration and never places a new
//! trial there. Dispatch is FIFO with overtaking: a later evaluation may
//! run ahead of an earlier one whose only eligible workers are busy.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::catalog::TrialStatus;
use crate::configspace::Configuration;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::simulator::Environment;

#[derive(Debug, Clone)]
pub struct WorkerHandle {
    pub worker_id: usize,
    pub busy: bool,
}

#[derive(Debug)]
pub struct PendingEvaluation {
    pub seq: u64,
    pub config: Configuration,
    pub target_budget: usize,
    /// Workers that already hold a sample of this config (ineligible).
    pub already_sampled: BTreeSet<usize>,
    /// Workers currently running a trial for this evaluation.
    pub assigned: BTreeSet<usize>,
    /// New trials still to place.
    pub remaining: usize,
    /// Trials placed but not yet completed.
    pub outstanding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued { seq: u64, remaining: usize },
    /// The config already has samples from at least `target_budget` workers.
    AlreadySatisfied,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub seq: u64,
    pub worker_id: usize,
    pub config: Configuration,
}

/// A fully-sampled evaluation ready for the detector/adjuster stage.
#[derive(Debug)]
pub struct FinishedEvaluation {
    pub seq: u64,
    pub config: Configuration,
    pub target_budget: usize,
}

pub struct Scheduler {
    workers: Vec<WorkerHandle>,
    entries: BTreeMap<u64, PendingEvaluation>,
    /// FIFO queue of entry keys.
    order: Vec<u64>,
    next_seq: u64,
}

impl Scheduler {
    pub fn new(pool_size: usize) -> Self {
        Self {
            workers: (0..pool_size)
                .map(|worker_id| WorkerHandle {
                    worker_id,
                    busy: false,
                })
                .collect(),
            entries: BTreeMap::new(),
            order: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.workers.len()
    }

    pub fn idle_count(&self) -> usize {
        self.workers.iter().filter(|w| !w.busy).count()
    }

    pub fn busy_count(&self) -> usize {
        self.workers.iter().filter(|w| w.busy).count()
    }

    /// Total new trials still waiting for a worker.
    pub fn queued_demand(&self) -> usize {
        self.entries.values().map(|e| e.remaining).sum()
    }

    /// Queue an evaluation at `target_budget` workers, reusing the given
    /// prior samples. Those workers become ineligible for the new trials.
    pub fn enqueue(
        &mut self,
        config: Configuration,
        target_budget: usize,
        prior_workers: BTreeSet<usize>,
    ) -> Result<EnqueueOutcome> {
        if target_budget > self.workers.len() {
            return Err(Error::Capacity(format!(
                "budget {target_budget} exceeds pool size {}",
                self.workers.len()
            )));
        }
        if prior_workers.len() >= target_budget {
            return Ok(EnqueueOutcome::AlreadySatisfied);
        }
        let eligible = self.workers.len() - prior_workers.len();
        let remaining = target_budget - prior_workers.len();
        if remaining > eligible {
            return Err(Error::Capacity(format!(
                "evaluation needs {remaining} fresh workers but only {eligible} are eligible"
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.insert(
            seq,
            PendingEvaluation {
                seq,
                config,
                target_budget,
                already_sampled: prior_workers,
                assigned: BTreeSet::new(),
                remaining,
                outstanding: 0,
            },
        );
        self.order.push(seq);
        Ok(EnqueueOutcome::Queued { seq, remaining })
    }

    /// Assign idle eligible workers to queued evaluations in FIFO order,
    /// lowest worker id first. Entries whose eligible workers are all busy
    /// are skipped, letting later entries overtake.
    pub fn dispatch(&mut self) -> Vec<Assignment> {
        let mut assignments = Vec::new();
        for &seq in &self.order {
            let Some(entry) = self.entries.get_mut(&seq) else {
                continue;
            };
            if entry.remaining == 0 {
                continue;
            }
            for w in 0..self.workers.len() {
                if entry.remaining == 0 {
                    break;
                }
                if self.workers[w].busy
                    || entry.already_sampled.contains(&w)
                    || entry.assigned.contains(&w)
                {
                    continue;
                }
                self.workers[w].busy = true;
                entry.assigned.insert(w);
                entry.remaining -= 1;
                entry.outstanding += 1;
                assignments.push(Assignment {
                    seq,
                    worker_id: w,
                    config: entry.config.clone(),
                });
            }
        }
        assignments
    }

    /// Mark a trial finished. Returns the evaluation when its last new
    /// trial completes.
    pub fn complete(&mut self, seq: u64, worker_id: usize) -> Result<Option<FinishedEvaluation>> {
        let entry = self
            .entries
            .get_mut(&seq)
            .ok_or_else(|| Error::State(format!("completion for unknown evaluation {seq}")))?;
        if !entry.assigned.contains(&worker_id) {
            return Err(Error::State(format!(
                "worker {worker_id} reported a trial it was not assigned"
            )));
        }
        self.workers[worker_id].busy = false;
        entry.outstanding -= 1;
        // the worker now holds a sample of this config
        entry.already_sampled.insert(worker_id);
        if entry.remaining == 0 && entry.outstanding == 0 {
            let entry = self.entries.remove(&seq).expect("entry exists");
            self.order.retain(|&s| s != seq);
            return Ok(Some(FinishedEvaluation {
                seq,
                config: entry.config,
                target_budget: entry.target_budget,
            }));
        }
        Ok(None)
    }

    /// Drop queue entries that have not started running (used at drain).
    /// Entries with trials in flight stay until those complete.
    pub fn purge_unstarted(&mut self) -> usize {
        let mut purged = 0;
        let unstarted: Vec<u64> = self
            .entries
            .values()
            .filter(|e| e.assigned.is_empty() && e.outstanding == 0)
            .map(|e| e.seq)
            .collect();
        for seq in unstarted {
            self.entries.remove(&seq);
            self.order.retain(|&s| s != seq);
            purged += 1;
        }
        purged
    }

    pub fn entry(&self, seq: u64) -> Option<&PendingEvaluation> {
        self.entries.get(&seq)
    }

    pub fn in_flight(&self) -> usize {
        self.entries.values().map(|e| e.outstanding).sum()
    }
}

/// What a backend reports for one trial.
#[derive(Debug, Clone)]
pub struct BackendOutcome {
    pub status: TrialStatus,
    pub performance: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

/// Runs a user-specified program once per trial. The configuration rides in
/// `TUNA_CONFIG_JSON` and the worker index in `TUNA_WORKER_ID`; the last
/// stdout line must be `{"performance": <number>, "metrics": {...}}`.
/// Exit code 0 means ok; the wall-clock timeout yields status=timeout.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub command: String,
    pub timeout: Duration,
    pub workdir: Option<PathBuf>,
}

impl CommandBackend {
    pub fn new(command: &str, timeout: Duration) -> Self {
        Self {
            command: command.to_string(),
            timeout,
            workdir: None,
        }
    }

    pub fn execute(&self, worker_id: usize, config: &Configuration) -> BackendOutcome {
        let started = Instant::now();
        let config_json = serde_json::to_string(&config.to_json()).unwrap_or_default();
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(&self.command)
            .env("TUNA_CONFIG_JSON", config_json)
            .env("TUNA_WORKER_ID", worker_id.to_string())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .stdin(Stdio::null());
        if let Some(dir) = &self.workdir {
            cmd.current_dir(dir);
        }
        // own process group, so a timeout kill reaches the whole tree
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            unsafe {
                cmd.pre_exec(|| {
                    libc::setpgid(0, 0);
                    Ok(())
                });
            }
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                log::warn!("failed to spawn trial command: {e}");
                return BackendOutcome {
                    status: TrialStatus::Crashed,
                    performance: None,
                    metrics: BTreeMap::new(),
                    wall_time_s: started.elapsed().as_secs_f64(),
                };
            }
        };

        // drain stdout off-thread; a pipe-buffer stall must not block the
        // timeout loop
        let reader = child.stdout.take().map(|mut out| {
            std::thread::spawn(move || {
                let mut s = String::new();
                let _ = out.read_to_string(&mut s);
                s
            })
        });

        let deadline = started + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {
                    if Instant::now() >= deadline {
                        kill_tree(&mut child);
                        break None;
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => {
                    log::warn!("trial wait failed: {e}");
                    kill_tree(&mut child);
                    break None;
                }
            }
        };
        let wall_time_s = started.elapsed().as_secs_f64();

        let stdout = reader
            .and_then(|r| r.join().ok())
            .unwrap_or_default();

        let Some(status) = status else {
            return BackendOutcome {
                status: TrialStatus::Timeout,
                performance: None,
                metrics: BTreeMap::new(),
                wall_time_s,
            };
        };
        if !status.success() {
            return BackendOutcome {
                status: TrialStatus::Crashed,
                performance: None,
                metrics: BTreeMap::new(),
                wall_time_s,
            };
        }
        match parse_trial_payload(&stdout) {
            Ok((performance, metrics)) => BackendOutcome {
                status: TrialStatus::Ok,
                performance: Some(performance),
                metrics,
                wall_time_s,
            },
            Err(e) => {
                log::warn!("trial stdout was not a valid payload: {e}");
                BackendOutcome {
                    status: TrialStatus::Crashed,
                    performance: None,
                    metrics: BTreeMap::new(),
                    wall_time_s,
                }
            }
        }
    }
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn parse_trial_payload(stdout: &str) -> Result<(f64, BTreeMap<String, f64>)> {
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Validation("empty trial stdout".into()))?;
    #[derive(serde::Deserialize)]
    struct Payload {
        performance: f64,
        #[serde(default)]
        metrics: BTreeMap<String, f64>,
    }
    let payload: Payload = serde_json::from_str(line.trim())?;
    if !payload.performance.is_finite() {
        return Err(Error::Validation("non-finite performance in payload".into()));
    }
    Ok((payload.performance, payload.metrics))
}

/// The two ways a trial can run.
pub enum TrialBackend {
    Simulated(Arc<Environment>),
    Command(CommandBackend),
}

impl TrialBackend {
    pub fn is_simulated(&self) -> bool {
        matches!(self, TrialBackend::Simulated(_))
    }

    /// Run one trial to completion. Simulated trials report a pseudo wall
    /// time derived from the trial stream (used as the virtual duration).
    pub fn execute(&self, worker_id: usize, config: &Configuration, ordinal: u64) -> BackendOutcome {
        match self {
            TrialBackend::Simulated(env) => match env.evaluate(worker_id, config, ordinal) {
                Ok(out) => {
                    let mut rng = derive_rng(
                        env.seed,
                        "trial-duration",
                        &[worker_id as u64, config.id(), ordinal],
                    );
                    BackendOutcome {
                        status: TrialStatus::Ok,
                        performance: Some(out.performance),
                        metrics: out.metrics,
                        wall_time_s: 45.0 + 30.0 * rng.gen::<f64>(),
                    }
                }
                Err(e) => {
                    log::warn!("simulated trial failed: {e}");
                    BackendOutcome {
                        status: TrialStatus::Crashed,
                        performance: None,
                        metrics: BTreeMap::new(),
                        wall_time_s: 0.0,
                    }
                }
            },
            TrialBackend::Command(cmd) => cmd.execute(worker_id, config),
        }
    }
}
