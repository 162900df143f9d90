//! Ask/tell configuration suggestion with multi-fidelity intensification.
//!
//! Budgets are worker counts. A single-bracket Successive Halving ladder
//! promotes the top 1/eta of each rung; fresh rung-0 proposals come either
//! from Expected Improvement over a seeded random candidate pool against a
//! forest surrogate, or from plain random search. The surrogate trains on
//! (encoded config ++ normalized budget) -> reported score and is refit from
//! scratch on every tell.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::configspace::{ConfigSpace, Configuration};
use crate::error::{Error, Result};
use crate::forest::{ForestHyperParams, ForestModel};
use crate::objective::{Direction, ObjectiveSpec};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::stats::{normal_cdf, normal_pdf};

/// Sampling methodology. Decides budgets, worker pinning, and which pipeline
/// stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Tuna,
    Traditional,
    ExtendedTraditional,
    NaiveDistributed,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Tuna => "tuna",
            RunMode::Traditional => "traditional",
            RunMode::ExtendedTraditional => "extended-traditional",
            RunMode::NaiveDistributed => "naive",
        }
    }

    /// The scheduling policy this mode implies.
    pub fn policy(&self, pool: usize) -> ModePolicy {
        match self {
            RunMode::Tuna => ModePolicy {
                rung_budgets: successive_halving_budgets(pool, 3),
                pin_single_worker: false,
                force_no_detector: false,
                force_no_model: false,
            },
            RunMode::Traditional | RunMode::ExtendedTraditional => ModePolicy {
                rung_budgets: vec![1],
                pin_single_worker: true,
                force_no_detector: false,
                force_no_model: false,
            },
            RunMode::NaiveDistributed => ModePolicy {
                rung_budgets: vec![pool.max(1)],
                pin_single_worker: false,
                force_no_detector: true,
                force_no_model: true,
            },
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tuna" => Ok(RunMode::Tuna),
            "traditional" => Ok(RunMode::Traditional),
            "extended-traditional" | "extended_traditional" => Ok(RunMode::ExtendedTraditional),
            "naive" | "naive-distributed" | "naive_distributed" => Ok(RunMode::NaiveDistributed),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModePolicy {
    pub rung_budgets: Vec<usize>,
    pub pin_single_worker: bool,
    pub force_no_detector: bool,
    pub force_no_model: bool,
}

/// Rung ladder built top-down: pool, pool/eta, pool/eta^2, ... down to 1.
/// A pool of 10 with eta 3 gives [1, 3, 10].
pub fn successive_halving_budgets(pool: usize, eta: usize) -> Vec<usize> {
    let pool = pool.max(1);
    let eta = eta.max(2);
    let mut budgets = vec![pool];
    let mut b = pool;
    while b > 1 {
        b /= eta;
        budgets.push(b.max(1));
    }
    budgets.reverse();
    budgets.dedup();
    budgets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    ForestBo,
    Random,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "forest-bo" | "forest_bo" => Ok(OptimizerKind::ForestBo),
            "random" => Ok(OptimizerKind::Random),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Suggestion {
    pub config: Configuration,
    pub budget: usize,
    pub is_initialization: bool,
}

/// Expected improvement of a posterior N(mean, stddev^2) over `best`.
/// EI = sigma (z Phi(z) + phi(z)) with z = (mean - best)/sigma for maximize
/// (improvement negated for minimize); the sigma = 0 limit is
/// max(0, improvement).
pub fn expected_improvement<T: Scalar>(mean: T, stddev: T, best: T, direction: Direction) -> T {
    let improvement = match direction {
        Direction::Maximize => mean - best,
        Direction::Minimize => best - mean,
    };
    if stddev <= T::zero() {
        return improvement.max(T::zero());
    }
    let z = improvement / stddev;
    let ei = stddev * (z * normal_cdf(z) + normal_pdf(z));
    ei.max(T::zero())
}

#[derive(Debug, Clone)]
pub struct OptimizerSettings {
    pub mode: RunMode,
    pub kind: OptimizerKind,
    pub objective: ObjectiveSpec,
    pub pool_size: usize,
    pub eta: usize,
    /// Initialization set size: the default config plus seeded random ones.
    pub init_count: usize,
    /// Random candidates scored by EI per fresh proposal.
    pub candidate_pool: usize,
    pub surrogate: ForestHyperParams,
}

impl OptimizerSettings {
    pub fn new(mode: RunMode, kind: OptimizerKind, objective: ObjectiveSpec, pool_size: usize) -> Self {
        Self {
            mode,
            kind,
            objective,
            pool_size,
            eta: 3,
            init_count: 10,
            candidate_pool: 5000,
            surrogate: ForestHyperParams::default(),
        }
    }
}

struct Rung {
    budget: usize,
    /// (config_id, score, config) in completion order.
    completed: Vec<(u64, f64, Configuration)>,
    promoted: BTreeSet<u64>,
}

pub struct Optimizer {
    space: ConfigSpace,
    settings: OptimizerSettings,
    seed: u64,
    rungs: Vec<Rung>,
    init_queue: std::collections::VecDeque<Configuration>,
    /// (config_id, budget) pairs asked but not yet told.
    outstanding: BTreeSet<(u64, usize)>,
    told: BTreeSet<(u64, usize)>,
    /// Config ids ever suggested at rung 0 (initialization or proposals).
    proposed: BTreeSet<u64>,
    surrogate_x: Vec<Vec<f64>>,
    surrogate_y: Vec<f64>,
    surrogate: Option<ForestModel<f64>>,
    best_told: Option<f64>,
    ask_counter: u64,
    finished: bool,
}

impl Optimizer {
    pub fn new(space: ConfigSpace, settings: OptimizerSettings, seed: u64) -> Result<Self> {
        if settings.init_count < 1 {
            return Err(Error::Validation("init_count must be >= 1".into()));
        }
        let policy = settings.mode.policy(settings.pool_size);
        let rungs = policy
            .rung_budgets
            .iter()
            .map(|&budget| Rung {
                budget,
                completed: Vec::new(),
                promoted: BTreeSet::new(),
            })
            .collect();

        // initialization set: the default config then seeded random configs,
        // deduplicated by config id
        let default = space.default_config()?;
        let mut init_queue = std::collections::VecDeque::new();
        let mut seen = BTreeSet::new();
        seen.insert(default.id());
        init_queue.push_back(default);
        if settings.init_count > 1 {
            let draw = (settings.init_count - 1) * 4;
            for cfg in space.sample_random(derive_seed(seed, "init", &[]), draw)? {
                if init_queue.len() >= settings.init_count {
                    break;
                }
                if seen.insert(cfg.id()) {
                    init_queue.push_back(cfg);
                }
            }
        }

        Ok(Self {
            space,
            settings,
            seed,
            rungs,
            init_queue,
            outstanding: BTreeSet::new(),
            told: BTreeSet::new(),
            proposed: BTreeSet::new(),
            surrogate_x: Vec::new(),
            surrogate_y: Vec::new(),
            surrogate: None,
            best_told: None,
            ask_counter: 0,
            finished: false,
        })
    }

    pub fn rung_budgets(&self) -> Vec<usize> {
        self.rungs.iter().map(|r| r.budget).collect()
    }

    pub fn max_budget(&self) -> usize {
        self.rungs.last().map(|r| r.budget).unwrap_or(1)
    }

    /// Marks the run's stop criterion as reached; further asks are an error.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    fn rung0_budget(&self) -> usize {
        self.rungs.first().map(|r| r.budget).unwrap_or(1)
    }

    fn direction(&self) -> Direction {
        self.settings.objective.direction
    }

    /// Next suggestion: initialization first, then rung promotions (highest
    /// rung first), then a fresh rung-0 proposal.
    pub fn ask(&mut self) -> Result<Suggestion> {
        if self.finished {
            return Err(Error::State("ask after the stop criterion".into()));
        }
        self.ask_counter += 1;

        if let Some(config) = self.init_queue.pop_front() {
            let budget = self.rung0_budget();
            self.outstanding.insert((config.id(), budget));
            self.proposed.insert(config.id());
            return Ok(Suggestion {
                config,
                budget,
                is_initialization: true,
            });
        }

        if let Some(s) = self.promotion() {
            return Ok(s);
        }

        self.fresh_proposal()
    }

    /// ASHA-style promotion: from the highest rung downward, promote the
    /// best unpromoted completion while the top-(1/eta) quota is unmet.
    fn promotion(&mut self) -> Option<Suggestion> {
        let eta = self.settings.eta;
        let direction = self.direction();
        for r in (0..self.rungs.len().saturating_sub(1)).rev() {
            let n = self.rungs[r].completed.len();
            if n < eta {
                continue;
            }
            let quota = n.div_ceil(eta);
            if self.rungs[r].promoted.len() >= quota {
                continue;
            }
            // rank completions: best score first, completion order breaks ties
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let (_, sa, _) = &self.rungs[r].completed[a];
                let (_, sb, _) = &self.rungs[r].completed[b];
                if direction.better(*sa, *sb) {
                    std::cmp::Ordering::Less
                } else if direction.better(*sb, *sa) {
                    std::cmp::Ordering::Greater
                } else {
                    a.cmp(&b)
                }
            });
            let next_budget = self.rungs[r + 1].budget;
            for &i in order.iter().take(quota) {
                let (id, _, ref config) = self.rungs[r].completed[i];
                if self.rungs[r].promoted.contains(&id) {
                    continue;
                }
                let config = config.clone();
                self.rungs[r].promoted.insert(id);
                self.outstanding.insert((id, next_budget));
                return Some(Suggestion {
                    config,
                    budget: next_budget,
                    is_initialization: false,
                });
            }
        }
        None
    }

    fn fresh_proposal(&mut self) -> Result<Suggestion> {
        let budget = self.rung0_budget();
        let config = match (self.settings.kind, &self.surrogate) {
            (OptimizerKind::ForestBo, Some(_)) => self.propose_by_ei()?,
            _ => self.propose_random()?,
        };
        self.outstanding.insert((config.id(), budget));
        self.proposed.insert(config.id());
        Ok(Suggestion {
            config,
            budget,
            is_initialization: false,
        })
    }

    fn propose_random(&mut self) -> Result<Configuration> {
        // draw batches until an unseen config id turns up
        for attempt in 0..64u64 {
            let seed = derive_seed(self.seed, "propose", &[self.ask_counter, attempt]);
            let batch = self.space.sample_random(seed, 16)?;
            if let Some(cfg) = batch.into_iter().find(|cfg| !self.proposed.contains(&cfg.id())) {
                return Ok(cfg);
            }
        }
        Err(Error::State(
            "could not draw an unseen configuration from the space".into(),
        ))
    }

    /// Maximize EI over a seeded random candidate pool, scoring candidates
    /// at the maximum-fidelity budget feature.
    fn propose_by_ei(&mut self) -> Result<Configuration> {
        let surrogate = self.surrogate.as_ref().expect("checked by caller");
        let best = self.best_told.ok_or_else(|| {
            Error::State("surrogate exists but no score was told".into())
        })?;
        let seed = derive_seed(self.seed, "candidates", &[self.ask_counter]);
        let candidates = self.space.sample_random(seed, self.settings.candidate_pool)?;
        let direction = self.direction();

        let mut encoded: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
        for cfg in &candidates {
            let mut x: Vec<f64> = self.space.encode(cfg)?;
            x.push(1.0); // normalized budget: score at full fidelity
            encoded.push(x);
        }
        let preds = surrogate.predict_batch(&encoded)?;

        let mut best_idx: Option<usize> = None;
        let mut best_ei = f64::NEG_INFINITY;
        for (i, (mean, sd)) in preds.iter().enumerate() {
            if self.proposed.contains(&candidates[i].id()) {
                continue;
            }
            let ei = expected_improvement(*mean, *sd, best, direction);
            if ei > best_ei {
                best_ei = ei;
                best_idx = Some(i);
            }
        }
        match best_idx {
            Some(i) => Ok(candidates.into_iter().nth(i).expect("index in range")),
            // every candidate was already proposed; fall back to random
            None => self.propose_random(),
        }
    }

    /// Report a completed evaluation. The config must have been asked at
    /// this budget and not told yet; out-of-order tells are fine.
    pub fn tell(&mut self, config: &Configuration, budget: usize, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::Validation("score must be finite".into()));
        }
        let key = (config.id(), budget);
        if self.told.contains(&key) {
            return Err(Error::Protocol(format!(
                "(config {:016x}, budget {budget}) was already told",
                config.id()
            )));
        }
        if !self.outstanding.remove(&key) {
            return Err(Error::Protocol(format!(
                "(config {:016x}, budget {budget}) was never asked",
                config.id()
            )));
        }
        self.told.insert(key);

        let rung = self
            .rungs
            .iter_mut()
            .find(|r| r.budget == budget)
            .ok_or_else(|| Error::Protocol(format!("budget {budget} is not a rung")))?;
        rung.completed.push((config.id(), score, config.clone()));

        self.best_told = Some(match self.best_told {
            None => score,
            Some(b) if self.direction().better(score, b) => score,
            Some(b) => b,
        });

        if self.settings.kind == OptimizerKind::ForestBo {
            let mut x: Vec<f64> = self.space.encode(config)?;
            x.push(budget as f64 / self.max_budget() as f64);
            self.surrogate_x.push(x);
            self.surrogate_y.push(score);
            let model = ForestModel::fit(
                &self.surrogate_x,
                &self.surrogate_y,
                &self.settings.surrogate,
                derive_seed(self.seed, "surrogate", &[]),
            )?;
            self.surrogate = Some(model);
        }
        Ok(())
    }

    pub fn surrogate_rows(&self) -> usize {
        self.surrogate_y.len()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }
}
