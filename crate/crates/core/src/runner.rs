//! The tuning loop: ask -> enqueue/dispatch/execute -> catalog -> detector ->
//! noise adjustment (inference before training) -> worst-case aggregation ->
//! tell, until the trial budget is spent.
//!
//! Simulated backends run on a virtual clock (trial completion order is a
//! pure function of the seed); the command backend runs trials on real
//! threads, one per busy worker. The evaluation-processing stage is shared
//! with `replay`, which re-feeds a recorded catalog through the detector and
//! model under different flags without re-executing anything.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, EvaluationRecord, TrialRecord, TrialStatus};
use crate::cluster::{Assignment, BackendOutcome, EnqueueOutcome, Scheduler, TrialBackend};
use crate::configspace::{ConfigSpace, Configuration, ParamValue};
use crate::error::{Error, Result};
use crate::noisemodel::{NoiseModel, NoiseModelConfig};
use crate::objective::{Direction, ObjectiveSpec};
use crate::optimizer::{Optimizer, OptimizerKind, OptimizerSettings, RunMode};
use crate::rng::derive_seed;
use crate::simulator::Environment;
use crate::stability::{self, AggregationPolicy};

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub mode: RunMode,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub trial_limit: usize,
    pub pool_size: usize,
    pub threshold: f64,
    pub detector_enabled: bool,
    pub model_enabled: bool,
    pub guardrail: bool,
    pub crash_penalty: Option<f64>,
}

impl RunSettings {
    pub fn new(mode: RunMode, seed: u64, trial_limit: usize) -> Self {
        Self {
            mode,
            optimizer: OptimizerKind::ForestBo,
            seed,
            trial_limit,
            pool_size: 10,
            threshold: stability::DEFAULT_THRESHOLD,
            detector_enabled: true,
            model_enabled: true,
            guardrail: false,
            crash_penalty: None,
        }
    }
}

/// One completed evaluation as seen by the optimizer.
#[derive(Debug, Clone)]
pub struct TellEvent {
    pub iteration: u64,
    pub config_id: u64,
    pub budget: usize,
    pub reported: f64,
    pub relative_range: f64,
    pub is_unstable: bool,
    pub model_rows: usize,
    /// Noise-free worst-case deployment performance (simulated runs only).
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestConfig {
    pub config_id: u64,
    pub values: BTreeMap<String, ParamValue>,
    pub reported_score: f64,
    pub relative_range: Option<f64>,
    pub is_unstable: Option<bool>,
    pub max_budget_reached: usize,
}

pub struct RunOutput {
    pub catalog: Catalog,
    pub tells: Vec<TellEvent>,
    pub best: Option<BestConfig>,
    pub trials_started: usize,
    pub crashed_trials: usize,
    pub rung_budgets: Vec<usize>,
}

impl RunOutput {
    pub fn crashed_fraction(&self) -> f64 {
        if self.trials_started == 0 {
            0.0
        } else {
            self.crashed_trials as f64 / self.trials_started as f64
        }
    }
}

/// One trial result entering the evaluation pipeline.
#[derive(Debug, Clone)]
struct SampleInput {
    worker_id: usize,
    status: TrialStatus,
    performance: Option<f64>,
    metrics: BTreeMap<String, f64>,
    wall_time_s: f64,
}

impl SampleInput {
    fn from_outcome(worker_id: usize, o: BackendOutcome) -> Self {
        Self {
            worker_id,
            status: o.status,
            performance: o.performance,
            metrics: o.metrics,
            wall_time_s: o.wall_time_s,
        }
    }

    fn from_record(r: &TrialRecord) -> Self {
        Self {
            worker_id: r.worker_id,
            status: r.status,
            performance: r.performance,
            metrics: r.metrics.clone(),
            wall_time_s: r.wall_time_s,
        }
    }
}

struct ProcessOutcome {
    reported: f64,
    relative_range: f64,
    is_unstable: bool,
    model_rows: usize,
}

/// Detector -> adjuster -> aggregation over one completed evaluation, plus
/// all the catalog writes. Shared between the live loop and `replay`.
struct Pipeline {
    direction: Direction,
    policy: AggregationPolicy<f64>,
    threshold: f64,
    detector_enabled: bool,
    model_enabled: bool,
    crash_penalty: Option<f64>,
    default_config_id: u64,
    max_budget: usize,
    model: Option<NoiseModel<f64>>,
    model_config: NoiseModelConfig,
    model_seed: u64,
    worker_vocabulary: Vec<usize>,
    iteration: u64,
}

impl Pipeline {
    #[allow(clippy::too_many_arguments)]
    fn new(
        direction: Direction,
        threshold: f64,
        detector_enabled: bool,
        model_enabled: bool,
        guardrail: bool,
        crash_penalty: Option<f64>,
        default_config_id: u64,
        max_budget: usize,
        pool_size: usize,
        run_seed: u64,
    ) -> Self {
        let model_config = if guardrail {
            NoiseModelConfig::default().with_guardrail()
        } else {
            NoiseModelConfig::default()
        };
        Self {
            direction,
            policy: AggregationPolicy::worst_case(direction),
            threshold,
            detector_enabled,
            model_enabled,
            crash_penalty,
            default_config_id,
            max_budget,
            model: None,
            model_config,
            model_seed: derive_seed(run_seed, "noise-model", &[]),
            worker_vocabulary: (0..pool_size).collect(),
            iteration: 0,
        }
    }

    /// Freeze the metric vocabulary from the first ok trial observed.
    fn ensure_model(&mut self, metrics: &BTreeMap<String, f64>) {
        if self.model.is_none() {
            let vocab: Vec<String> = metrics.keys().cloned().collect();
            self.model = Some(NoiseModel::new(
                vocab,
                self.worker_vocabulary.clone(),
                self.model_config.clone(),
                self.model_seed,
            ));
        }
    }

    /// Substitution value for crashed/timeout trials: the configured
    /// penalty, else the worst ok performance of the default config, else
    /// the worst ok performance seen anywhere.
    fn crash_value(&self, catalog: &Catalog, pending: &[SampleInput]) -> Option<f64> {
        if let Some(v) = self.crash_penalty {
            return Some(v);
        }
        let default_perfs = catalog
            .samples_for(self.default_config_id)
            .into_iter()
            .filter(|r| r.status == TrialStatus::Ok)
            .filter_map(|r| r.performance);
        if let Some(v) = worst_of(self.direction, default_perfs) {
            return Some(v);
        }
        let all = catalog
            .records()
            .iter()
            .filter(|r| r.status == TrialStatus::Ok)
            .filter_map(|r| r.performance)
            .chain(
                pending
                    .iter()
                    .filter(|s| s.status == TrialStatus::Ok)
                    .filter_map(|s| s.performance),
            );
        worst_of(self.direction, all)
    }

    /// Process one completed evaluation: substitute crashes, classify over
    /// all samples (prior and new), adjust each sample with the
    /// before-training model state, aggregate, and persist. Returns None
    /// when no usable samples exist (every trial crashed with no penalty
    /// value available).
    fn process(
        &mut self,
        catalog: &mut Catalog,
        config: &Configuration,
        budget: usize,
        new_samples: Vec<SampleInput>,
        truth: Option<f64>,
    ) -> Result<Option<(ProcessOutcome, TellEvent)>> {
        catalog.register_config(config)?;
        if let Some(first_ok) = new_samples.iter().find(|s| s.status == TrialStatus::Ok) {
            self.ensure_model(&first_ok.metrics);
        }

        let prior: Vec<SampleInput> = catalog
            .samples_for(config.id())
            .into_iter()
            .map(SampleInput::from_record)
            .collect();
        let all: Vec<&SampleInput> = prior.iter().chain(new_samples.iter()).collect();

        let crash_value = if all.iter().any(|s| s.status != TrialStatus::Ok) {
            self.crash_value(catalog, &new_samples)
        } else {
            None
        };

        let mut raw: Vec<f64> = Vec::with_capacity(all.len());
        let mut usable = true;
        for s in &all {
            match s.status {
                TrialStatus::Ok => raw.push(s.performance.expect("validated")),
                _ => match crash_value {
                    Some(v) => raw.push(v),
                    None => usable = false,
                },
            }
        }
        if !usable || raw.is_empty() {
            // still persist the raw observations
            for s in new_samples {
                self.append_record(catalog, config.id(), budget, s, None)?;
            }
            log::warn!(
                "evaluation of config {:016x} had no usable samples; skipping tell",
                config.id()
            );
            return Ok(None);
        }

        let verdict_raw = stability::classify(config.id(), &raw, self.threshold)?;
        let verdict = if self.detector_enabled {
            verdict_raw
        } else {
            stability::StabilityVerdict {
                is_unstable: false,
                ..verdict_raw
            }
        };

        let model_rows = self
            .model
            .as_ref()
            .map(|m| m.trained_row_count())
            .unwrap_or(0);

        // inference happens before training: adjust with the current model
        let mut adjusted: Vec<f64> = Vec::with_capacity(all.len());
        for (s, &r) in all.iter().zip(raw.iter()) {
            let value = if s.status != TrialStatus::Ok || !self.model_enabled {
                r
            } else {
                match &mut self.model {
                    Some(model) => model.adjust(&s.metrics, s.worker_id, r, verdict.is_unstable)?,
                    None => r,
                }
            };
            adjusted.push(value);
        }

        let reported = stability::aggregate(&adjusted, &verdict, &self.policy)?;

        let mut trial_ids = Vec::with_capacity(new_samples.len());
        let offset = prior.len();
        for (i, s) in new_samples.into_iter().enumerate() {
            let adj = (s.status == TrialStatus::Ok).then_some(adjusted[offset + i]);
            trial_ids.push(self.append_record(catalog, config.id(), budget, s, adj)?);
        }

        catalog.set_verdict(
            config.id(),
            verdict.relative_range,
            verdict.is_unstable,
            self.threshold,
        );
        catalog.set_reported_score(config.id(), reported);
        self.iteration += 1;
        catalog.append_evaluation(EvaluationRecord {
            iteration: self.iteration,
            config_id: config.id(),
            budget,
            trial_ids: trial_ids.clone(),
            relative_range: verdict.relative_range,
            is_unstable: verdict.is_unstable,
            threshold: self.threshold,
            raw_samples: raw,
            adjusted_samples: adjusted,
            reported_score: reported,
            model_rows,
        })?;

        // training happens after inference, and only on max-budget data
        if budget == self.max_budget && self.model_enabled {
            if let Some(model) = &mut self.model {
                let rows = catalog.training_rows(self.max_budget);
                model.train(&rows)?;
            }
        }

        let outcome = ProcessOutcome {
            reported,
            relative_range: verdict.relative_range,
            is_unstable: verdict.is_unstable,
            model_rows,
        };
        let event = TellEvent {
            iteration: self.iteration,
            config_id: config.id(),
            budget,
            reported,
            relative_range: outcome.relative_range,
            is_unstable: outcome.is_unstable,
            model_rows,
            truth,
        };
        Ok(Some((outcome, event)))
    }

    fn append_record(
        &self,
        catalog: &mut Catalog,
        config_id: u64,
        budget: usize,
        s: SampleInput,
        adjusted: Option<f64>,
    ) -> Result<u64> {
        catalog.append(TrialRecord {
            trial_id: 0,
            config_id,
            worker_id: s.worker_id,
            budget,
            performance: s.performance,
            adjusted_performance: adjusted,
            metrics: s.metrics,
            wall_time_s: s.wall_time_s,
            status: s.status,
        })
    }
}

fn worst_of(direction: Direction, values: impl Iterator<Item = f64>) -> Option<f64> {
    values.reduce(|a, b| direction.worst(a, b))
}

struct VirtualEvent {
    finish_at: f64,
    seq: u64,
    worker_id: usize,
    outcome: BackendOutcome,
}

enum Executor {
    /// Deterministic virtual clock for simulated backends.
    Virtual {
        clock: f64,
        events: Vec<VirtualEvent>,
    },
    /// Real threads for the command backend.
    Real {
        tx: mpsc::Sender<(u64, usize, BackendOutcome)>,
        rx: mpsc::Receiver<(u64, usize, BackendOutcome)>,
    },
}

impl Executor {
    fn for_backend(backend: &TrialBackend) -> Self {
        if backend.is_simulated() {
            Executor::Virtual {
                clock: 0.0,
                events: Vec::new(),
            }
        } else {
            let (tx, rx) = mpsc::channel();
            Executor::Real { tx, rx }
        }
    }

    fn launch(&mut self, backend: &Arc<TrialBackend>, a: Assignment) {
        match self {
            Executor::Virtual { clock, events } => {
                let outcome = backend.execute(a.worker_id, &a.config, 0);
                events.push(VirtualEvent {
                    finish_at: *clock + outcome.wall_time_s.max(0.0),
                    seq: a.seq,
                    worker_id: a.worker_id,
                    outcome,
                });
            }
            Executor::Real { tx, .. } => {
                let tx = tx.clone();
                let backend = Arc::clone(backend);
                std::thread::spawn(move || {
                    let outcome = backend.execute(a.worker_id, &a.config, 0);
                    let _ = tx.send((a.seq, a.worker_id, outcome));
                });
            }
        }
    }

    /// Earliest completion: virtual-time order (ties by seq then worker)
    /// for the simulator, arrival order for real threads.
    fn next_completion(&mut self) -> Option<(u64, usize, BackendOutcome)> {
        match self {
            Executor::Virtual { clock, events } => {
                if events.is_empty() {
                    return None;
                }
                let mut at = 0;
                for i in 1..events.len() {
                    let a = &events[i];
                    let b = &events[at];
                    let earlier = a.finish_at < b.finish_at
                        || (a.finish_at == b.finish_at
                            && (a.seq, a.worker_id) < (b.seq, b.worker_id));
                    if earlier {
                        at = i;
                    }
                }
                let ev = events.swap_remove(at);
                *clock = ev.finish_at;
                Some((ev.seq, ev.worker_id, ev.outcome))
            }
            Executor::Real { rx, .. } => rx.recv().ok(),
        }
    }
}

struct EvalState {
    config: Configuration,
    budget: usize,
    new_samples: Vec<SampleInput>,
}

/// Run the full tuning loop against a backend, writing into `catalog`.
pub fn run_tuning(
    space: &ConfigSpace,
    backend: TrialBackend,
    objective: ObjectiveSpec,
    settings: &RunSettings,
    mut catalog: Catalog,
) -> Result<RunOutput> {
    let policy = settings.mode.policy(settings.pool_size);
    let active_pool = if policy.pin_single_worker {
        1
    } else {
        settings.pool_size
    };
    let detector_enabled = settings.detector_enabled && !policy.force_no_detector;
    let model_enabled = settings.model_enabled && !policy.force_no_model;
    let direction = objective.direction;

    let mut optimizer = Optimizer::new(
        space.clone(),
        OptimizerSettings::new(settings.mode, settings.optimizer, objective, active_pool),
        settings.seed,
    )?;
    let rung_budgets = optimizer.rung_budgets();
    let max_budget = optimizer.max_budget();

    let default_id = space.default_config()?.id();
    let mut pipeline = Pipeline::new(
        direction,
        settings.threshold,
        detector_enabled,
        model_enabled,
        settings.guardrail,
        settings.crash_penalty,
        default_id,
        max_budget,
        active_pool,
        settings.seed,
    );

    let backend = Arc::new(backend);
    let mut executor = Executor::for_backend(&backend);
    let mut scheduler = Scheduler::new(active_pool);
    let mut evals: BTreeMap<u64, EvalState> = BTreeMap::new();
    let mut tells: Vec<TellEvent> = Vec::new();
    let mut trials_started = 0usize;
    let mut crashed_trials = 0usize;
    let mut asks_stopped = false;

    loop {
        // fill phase: dispatch whatever is ready, then ask for more work
        // while idle workers remain and the trial budget allows
        loop {
            for a in scheduler.dispatch() {
                trials_started += 1;
                executor.launch(&backend, a);
            }
            if scheduler.idle_count() == 0 || asks_stopped {
                break;
            }
            let planned = trials_started + scheduler.queued_demand();
            if planned >= settings.trial_limit {
                asks_stopped = true;
                break;
            }
            let suggestion = optimizer.ask()?;
            let prior = catalog.workers_for(suggestion.config.id());
            let need = suggestion.budget.saturating_sub(prior.len());
            if planned + need > settings.trial_limit {
                // suggestion dropped: the run is out of trial budget
                asks_stopped = true;
                break;
            }
            catalog.register_config(&suggestion.config)?;
            match scheduler.enqueue(suggestion.config.clone(), suggestion.budget, prior)? {
                EnqueueOutcome::Queued { seq, .. } => {
                    evals.insert(
                        seq,
                        EvalState {
                            config: suggestion.config,
                            budget: suggestion.budget,
                            new_samples: Vec::new(),
                        },
                    );
                }
                EnqueueOutcome::AlreadySatisfied => {
                    return Err(Error::State(
                        "optimizer suggested a budget already satisfied by the catalog".into(),
                    ));
                }
            }
        }

        if scheduler.in_flight() == 0 {
            if asks_stopped || scheduler.queued_demand() == 0 {
                break;
            }
            continue;
        }

        let (seq, worker_id, outcome) = executor
            .next_completion()
            .ok_or_else(|| Error::State("lost a trial completion".into()))?;
        if outcome.status != TrialStatus::Ok {
            crashed_trials += 1;
        }
        let state = evals
            .get_mut(&seq)
            .ok_or_else(|| Error::State(format!("completion for unknown evaluation {seq}")))?;
        state
            .new_samples
            .push(SampleInput::from_outcome(worker_id, outcome));

        if scheduler.complete(seq, worker_id)?.is_some() {
            let state = evals.remove(&seq).expect("evaluation tracked");
            let truth = match &*backend {
                TrialBackend::Simulated(env) => env.deployment_truth(&state.config).ok(),
                TrialBackend::Command(_) => None,
            };
            if let Some((outcome, event)) = pipeline.process(
                &mut catalog,
                &state.config,
                state.budget,
                state.new_samples,
                truth,
            )? {
                optimizer.tell(&state.config, state.budget, outcome.reported)?;
                tells.push(event);
            }
        }
    }

    optimizer.finish();
    let best = best_config_of(&catalog, direction);
    Ok(RunOutput {
        catalog,
        tells,
        best,
        trials_started,
        crashed_trials,
        rung_budgets,
    })
}

fn best_config_of(catalog: &Catalog, direction: Direction) -> Option<BestConfig> {
    let id = catalog.best_config(direction).ok()?;
    let summary = catalog.summary(id)?;
    Some(BestConfig {
        config_id: id,
        values: catalog.config_values(id).cloned().unwrap_or_default(),
        reported_score: summary.reported_score?,
        relative_range: summary.verdict.map(|(rr, _, _)| rr),
        is_unstable: summary.verdict.map(|(_, u, _)| u),
        max_budget_reached: catalog.max_budget_reached(id),
    })
}

#[derive(Debug, Clone)]
pub struct ReplaySettings {
    pub threshold: f64,
    pub detector_enabled: bool,
    pub model_enabled: bool,
    pub guardrail: bool,
    pub crash_penalty: Option<f64>,
}

/// Re-feed a recorded catalog through the detector and noise model with
/// different flags, without re-executing trials. Evaluations replay in
/// their original completion order; the noise-model stream is re-derived
/// from the original run seed, so replaying with unchanged flags
/// reproduces the recorded pipeline outputs exactly.
pub fn replay(
    source: &Catalog,
    space: &ConfigSpace,
    run_seed: u64,
    objective: ObjectiveSpec,
    pool_size: usize,
    max_budget: usize,
    settings: &ReplaySettings,
    mut out: Catalog,
    env: Option<&Environment>,
) -> Result<RunOutput> {
    let default_id = space.default_config()?.id();
    let mut pipeline = Pipeline::new(
        objective.direction,
        settings.threshold,
        settings.detector_enabled,
        settings.model_enabled,
        settings.guardrail,
        settings.crash_penalty,
        default_id,
        max_budget,
        pool_size,
        run_seed,
    );

    let by_id: BTreeMap<u64, &TrialRecord> = source
        .records()
        .iter()
        .map(|r| (r.trial_id, r))
        .collect();
    let mut tells = Vec::new();
    let mut crashed = 0usize;
    let mut started = 0usize;

    for ev in source.evaluations() {
        let values = source.config_values(ev.config_id).ok_or_else(|| {
            Error::State(format!(
                "catalog has no values for config {:016x}",
                ev.config_id
            ))
        })?;
        let config = space.configuration(values)?;
        let mut new_samples = Vec::with_capacity(ev.trial_ids.len());
        for id in &ev.trial_ids {
            let record = by_id.get(id).ok_or_else(|| {
                Error::State(format!("evaluation references unknown trial {id}"))
            })?;
            started += 1;
            if record.status != TrialStatus::Ok {
                crashed += 1;
            }
            new_samples.push(SampleInput::from_record(record));
        }
        let truth = env.and_then(|e| e.deployment_truth(&config).ok());
        if let Some((_, event)) =
            pipeline.process(&mut out, &config, ev.budget, new_samples, truth)?
        {
            tells.push(event);
        }
    }

    let best = best_config_of(&out, objective.direction);
    Ok(RunOutput {
        catalog: out,
        tells,
        best,
        trials_started: started,
        crashed_trials: crashed,
        rung_budgets: Vec::new(),
    })
}
