//! Deterministic synthetic environments reproducing cloud-noise
//! phenomenology: per-worker baseline skew, multiplicative Gaussian sampling
//! noise, planted unstable configurations whose slow path depends on latent
//! per-worker bits, and emitted system metrics correlated with the realized
//! noise so the adjuster model has something to learn.
//!
//! Everything is a pure function of (environment seed, worker, config,
//! ordinal), so results are independent of scheduling interleavings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::configspace::{ConfigSpace, Configuration, ParamValue, ParameterDef};
use crate::error::{Error, Result};
use crate::objective::{Direction, ObjectiveSpec};
use crate::rng::{derive_rng, derive_seed};

/// Metric channel names, grouped by what drives them. The emitted map always
/// carries all twenty.
pub const NOISE_METRICS: [&str; 5] = [
    "cache_miss_rate",
    "cpu_steal_pct",
    "iowait_pct",
    "mem_bw_gbps",
    "os_thread_spawn_us",
];
pub const WORKER_METRICS: [&str; 5] = [
    "clock_skew_ppm",
    "cpu_base_mhz",
    "disk_lat_us",
    "numa_ratio",
    "tlb_miss_rate",
];
pub const LOAD_METRICS: [&str; 5] = [
    "ctx_switch_rate",
    "fs_dirty_pages",
    "irq_rate",
    "net_tx_mbps",
    "proc_rss_mb",
];
pub const DISTRACTOR_METRICS: [&str; 5] = [
    "cpu_migrations",
    "page_faults",
    "sched_lat_us",
    "softirq_pct",
    "swap_in_rate",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bump {
    pub dim: usize,
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interaction {
    pub dim_a: usize,
    pub dim_b: usize,
    pub center_a: f64,
    pub center_b: f64,
    pub width: f64,
    pub amplitude: f64,
}

/// One predicate clause: an encoded coordinate confined to a range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordRange {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnstableRegion {
    pub class_id: usize,
    pub conditions: Vec<CoordRange>,
    /// Slow-path multiplier in (0,1); applied adversely to performance.
    pub degrade_factor: f64,
    /// Probability that a worker carries the slow-path bit for this class.
    pub worker_bad_fraction: f64,
}

impl UnstableRegion {
    pub fn matches(&self, z: &[f64]) -> bool {
        self.conditions
            .iter()
            .all(|c| z[c.dim] >= c.lo && z[c.dim] <= c.hi)
    }
}

/// Base performance surface over the encoded unit cube: a positive floor
/// plus per-dimension bells and pairwise interaction bells, all peaked at
/// the same seeded center, so the noise-free optimum is known exactly.
/// Configurations inside an unstable region evaluate to a flat plateau above
/// the stable optimum (the temptation), degraded on bad-bit workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub base: f64,
    pub bumps: Vec<Bump>,
    pub interactions: Vec<Interaction>,
    pub unstable_regions: Vec<UnstableRegion>,
    /// Region plateau as a multiple of the stable optimum.
    pub temptation: f64,
    pub direction: Direction,
}

impl LandscapeSpec {
    /// Stable-region maximum, attained exactly at the bump centers.
    pub fn stable_optimum(&self) -> f64 {
        self.base
            + self.bumps.iter().map(|b| b.amplitude).sum::<f64>()
            + self.interactions.iter().map(|i| i.amplitude).sum::<f64>()
    }

    pub fn region_plateau(&self) -> f64 {
        self.temptation * self.stable_optimum()
    }

    pub fn region_match(&self, z: &[f64]) -> Option<&UnstableRegion> {
        self.unstable_regions.iter().find(|r| r.matches(z))
    }

    /// Noise-free performance at an encoded point, before worker effects.
    pub fn value(&self, z: &[f64]) -> f64 {
        if self.region_match(z).is_some() {
            return self.region_plateau();
        }
        let mut v = self.base;
        for b in &self.bumps {
            let d = z[b.dim] - b.center;
            v += b.amplitude * (-d * d / (2.0 * b.width * b.width)).exp();
        }
        for i in &self.interactions {
            let da = z[i.dim_a] - i.center_a;
            let db = z[i.dim_b] - i.center_b;
            v += i.amplitude * (-(da * da + db * db) / (2.0 * i.width * i.width)).exp();
        }
        v
    }

    /// The adverse slow-path multiplier for this landscape's direction.
    fn adverse_degrade(&self, degrade_factor: f64) -> f64 {
        match self.direction {
            Direction::Maximize => degrade_factor,
            Direction::Minimize => 1.0 / degrade_factor,
        }
    }
}

/// Per-worker latent state, fixed for the lifetime of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: usize,
    pub baseline_multiplier: f64,
    pub noise_cov: f64,
    pub observation_noise: f64,
    pub metric_mixing: MetricMixing,
    pub unstable_path_bits: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricMixing {
    /// Weight per noise channel on the realized performance multiplier.
    pub noise_weights: Vec<f64>,
    /// Constant level per worker-identity channel.
    pub worker_levels: Vec<f64>,
    /// Weight per load channel on normalized noise-free performance.
    pub load_weights: Vec<f64>,
}

/// How worker profiles are generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerGenSpec {
    pub baseline_range: (f64, f64),
    pub noise_cov_range: (f64, f64),
    pub observation_noise: f64,
    /// Relative jitter on per-worker noise-channel weights.
    pub mixing_jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    pub objective: ObjectiveSpec,
    pub space: ConfigSpace,
    pub landscape: LandscapeSpec,
    pub workers: WorkerGenSpec,
}

/// A fully instantiated simulated cluster: spec plus seeded worker profiles.
#[derive(Debug, Clone)]
pub struct Environment {
    pub spec: EnvironmentSpec,
    pub seed: u64,
    workers: Vec<WorkerProfile>,
}

/// One simulated trial, with debug channels the pipeline never sees.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub performance: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Realized sampling-noise factor.
    pub delta: f64,
    /// Whether the slow path fired.
    pub degraded: bool,
    /// Performance before sampling noise (baseline and degrade applied).
    pub noise_free: f64,
}

const BASE_NOISE_WEIGHTS: [f64; 5] = [1.4, -1.1, 0.9, -1.3, 1.0];
const LOAD_WEIGHTS: [f64; 5] = [0.8, 1.2, -0.7, 1.0, 0.9];

fn generate_worker(
    spec: &EnvironmentSpec,
    env_seed: u64,
    namespace: &str,
    worker_id: usize,
) -> WorkerProfile {
    let mut rng = derive_rng(env_seed, namespace, &[worker_id as u64]);
    let (blo, bhi) = spec.workers.baseline_range;
    let baseline_multiplier = blo + rng.gen::<f64>() * (bhi - blo);
    let (nlo, nhi) = spec.workers.noise_cov_range;
    let noise_cov = nlo + rng.gen::<f64>() * (nhi - nlo);
    let jitter = spec.workers.mixing_jitter;
    let noise_weights = BASE_NOISE_WEIGHTS
        .iter()
        .map(|w| w * (1.0 + jitter * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect();
    let worker_levels = (0..WORKER_METRICS.len())
        .map(|_| 2.0 * rng.gen::<f64>() - 1.0)
        .collect();
    let load_weights = LOAD_WEIGHTS.to_vec();
    let unstable_path_bits = spec
        .landscape
        .unstable_regions
        .iter()
        .map(|r| {
            let bad = rng.gen::<f64>() < r.worker_bad_fraction;
            (r.class_id, bad)
        })
        .collect();
    WorkerProfile {
        worker_id,
        baseline_multiplier,
        noise_cov,
        observation_noise: spec.workers.observation_noise,
        metric_mixing: MetricMixing {
            noise_weights,
            worker_levels,
            load_weights,
        },
        unstable_path_bits,
    }
}

impl Environment {
    pub fn from_spec(spec: EnvironmentSpec, seed: u64, pool: usize) -> Self {
        let workers = (0..pool)
            .map(|w| generate_worker(&spec, seed, "worker", w))
            .collect();
        Self {
            spec,
            seed,
            workers,
        }
    }

    pub fn workers(&self) -> &[WorkerProfile] {
        &self.workers
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.spec.space
    }

    pub fn objective(&self) -> &ObjectiveSpec {
        &self.spec.objective
    }

    /// Fresh worker profiles for deployment, from a disjoint stream.
    pub fn fresh_workers(&self, deploy_seed: u64, count: usize) -> Vec<WorkerProfile> {
        (0..count)
            .map(|w| generate_worker(&self.spec, deploy_seed, "deploy-worker", w))
            .collect()
    }

    /// Evaluate on a tuning-pool worker; the trial stream derives from
    /// (environment seed, worker, config, ordinal).
    pub fn evaluate(
        &self,
        worker_id: usize,
        config: &Configuration,
        ordinal: u64,
    ) -> Result<SimOutcome> {
        let profile = self.workers.get(worker_id).ok_or_else(|| {
            Error::Capacity(format!("worker {worker_id} outside the simulated pool"))
        })?;
        let trial_seed = derive_seed(
            self.seed,
            "trial",
            &[worker_id as u64, config.id(), ordinal],
        );
        evaluate_sim(
            profile,
            &self.spec.landscape,
            self.space(),
            config,
            trial_seed,
        )
    }

    /// Evaluate on an explicit profile (deployment) with a caller-owned seed.
    pub fn evaluate_on(
        &self,
        profile: &WorkerProfile,
        config: &Configuration,
        trial_seed: u64,
    ) -> Result<SimOutcome> {
        evaluate_sim(
            profile,
            &self.spec.landscape,
            self.space(),
            config,
            trial_seed,
        )
    }

    /// Noise-free worst case across the full fresh-worker population: the
    /// quantity deployment estimates. Bad-bit machines exist in the
    /// population whenever a region's bad fraction is positive, and the
    /// worst machine sits at the adverse end of the baseline range.
    pub fn deployment_truth(&self, config: &Configuration) -> Result<f64> {
        let z: Vec<f64> = self.space().encode(config)?;
        let landscape = &self.spec.landscape;
        let mut v = landscape.value(&z);
        if let Some(region) = landscape.region_match(&z) {
            if region.worker_bad_fraction > 0.0 {
                v *= landscape.adverse_degrade(region.degrade_factor);
            }
        }
        let (blo, bhi) = self.spec.workers.baseline_range;
        let adverse_baseline = match self.spec.objective.direction {
            Direction::Maximize => blo,
            Direction::Minimize => bhi,
        };
        Ok(v * adverse_baseline)
    }
}

/// Multiplicative Gaussian sampling noise: P * delta with
/// delta ~ N(1, sigma^2) truncated to [0.1, 1.9].
pub fn inject_noise(performance: f64, sigma: f64, seed: u64) -> Result<f64> {
    if !(0.0..=0.5).contains(&sigma) {
        return Err(Error::Validation(format!(
            "noise cov {sigma} outside [0, 0.5]"
        )));
    }
    if performance <= 0.0 {
        return Err(Error::Domain("performance must be positive".into()));
    }
    let mut rng = derive_rng(seed, "inject-noise", &[]);
    Ok(performance * draw_delta(sigma, &mut rng))
}

fn draw_delta(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let normal = Normal::new(1.0, sigma).expect("sigma validated");
    loop {
        let d = normal.sample(rng);
        if (0.1..=1.9).contains(&d) {
            return d;
        }
    }
}

/// One simulated trial: performance = f(config) x baseline x delta x
/// (degrade on a bad-bit worker inside an unstable region), plus a metrics
/// map mixed from the realized multiplier, worker identity, and load.
pub fn evaluate_sim(
    profile: &WorkerProfile,
    landscape: &LandscapeSpec,
    space: &ConfigSpace,
    config: &Configuration,
    trial_seed: u64,
) -> Result<SimOutcome> {
    let z: Vec<f64> = space.encode(config)?;
    let base_value = landscape.value(&z);
    let mut degraded = false;
    let mut value = base_value;
    if let Some(region) = landscape.region_match(&z) {
        if *profile
            .unstable_path_bits
            .get(&region.class_id)
            .unwrap_or(&false)
        {
            value *= landscape.adverse_degrade(region.degrade_factor);
            degraded = true;
        }
    }
    let noise_free = value * profile.baseline_multiplier;

    let mut rng = derive_rng(trial_seed, "sim-trial", &[]);
    let delta = draw_delta(profile.noise_cov, &mut rng);
    let performance = noise_free * delta;

    // the realized multiplier (noise and slow path together) drives the
    // noise channels, so degraded runs are visible in the metrics
    let slow_path_mult = if degraded {
        match landscape.direction {
            Direction::Maximize => value / base_value,
            Direction::Minimize => base_value / value,
        }
    } else {
        1.0
    };
    let realized = delta * slow_path_mult;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let obs = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| gauss.sample(rng) * scale;
    let obs_sigma = profile.observation_noise;
    let load = base_value / landscape.stable_optimum().max(f64::MIN_POSITIVE);

    let mut metrics = BTreeMap::new();
    for (j, name) in NOISE_METRICS.iter().enumerate() {
        let w = profile
            .metric_mixing
            .noise_weights
            .get(j)
            .copied()
            .unwrap_or(0.0);
        metrics.insert(
            name.to_string(),
            w * (realized - 1.0) + obs(&mut rng, obs_sigma),
        );
    }
    for (j, name) in WORKER_METRICS.iter().enumerate() {
        let l = profile
            .metric_mixing
            .worker_levels
            .get(j)
            .copied()
            .unwrap_or(0.0);
        metrics.insert(name.to_string(), l + obs(&mut rng, obs_sigma * 0.5));
    }
    for (j, name) in LOAD_METRICS.iter().enumerate() {
        let w = profile
            .metric_mixing
            .load_weights
            .get(j)
            .copied()
            .unwrap_or(0.0);
        metrics.insert(name.to_string(), w * load + obs(&mut rng, obs_sigma));
    }
    for name in DISTRACTOR_METRICS.iter() {
        metrics.insert(name.to_string(), obs(&mut rng, 1.0));
    }

    Ok(SimOutcome {
        performance,
        metrics,
        delta,
        degraded,
        noise_free,
    })
}

/// The packaged scenarios.
pub fn make_environment(
    env_name: &str,
    seed: u64,
    pool: usize,
    noise_override: Option<f64>,
) -> Result<Environment> {
    let spec = match env_name {
        "smooth" => smooth_spec(seed, noise_override.unwrap_or(0.0))?,
        "planted-unstable" => planted_unstable_spec(seed, noise_override.unwrap_or(0.02))?,
        "learnable-noise" => learnable_noise_spec(seed, noise_override)?,
        other => {
            return Err(Error::Usage(format!(
                "unknown environment '{other}' (expected smooth | planted-unstable | learnable-noise)"
            )))
        }
    };
    Ok(Environment::from_spec(spec, seed, pool))
}

fn seeded_bumps(
    seed: u64,
    dims: usize,
    amp_range: (f64, f64),
    width_range: (f64, f64),
) -> Vec<Bump> {
    let mut rng = derive_rng(seed, "landscape.bumps", &[]);
    (0..dims)
        .map(|dim| Bump {
            dim,
            center: 0.15 + 0.7 * rng.gen::<f64>(),
            width: width_range.0 + (width_range.1 - width_range.0) * rng.gen::<f64>(),
            amplitude: amp_range.0 + (amp_range.1 - amp_range.0) * rng.gen::<f64>(),
        })
        .collect()
}

fn seeded_interactions(
    seed: u64,
    bumps: &[Bump],
    pairs: &[(usize, usize)],
    amp_range: (f64, f64),
) -> Vec<Interaction> {
    let mut rng = derive_rng(seed, "landscape.inter", &[]);
    pairs
        .iter()
        .map(|&(a, b)| Interaction {
            dim_a: a,
            dim_b: b,
            center_a: bumps[a].center,
            center_b: bumps[b].center,
            width: 0.3,
            amplitude: amp_range.0 + (amp_range.1 - amp_range.0) * rng.gen::<f64>(),
        })
        .collect()
}

fn smooth_space() -> Result<ConfigSpace> {
    ConfigSpace::new(vec![
        ParameterDef::continuous("buffer_pool_mb", 64.0, 16384.0)
            .log_scale()
            .with_default(ParamValue::Float(512.0)),
        ParameterDef::integer("worker_threads", 1, 64),
        ParameterDef::continuous("checkpoint_interval_s", 10.0, 600.0),
        ParameterDef::integer("io_queue_depth", 1, 128),
        ParameterDef::continuous("random_page_cost", 1.0, 8.0)
            .with_default(ParamValue::Float(4.0)),
        ParameterDef::continuous("wal_flush_ratio", 0.0, 1.0),
    ])
}

fn smooth_spec(seed: u64, noise: f64) -> Result<EnvironmentSpec> {
    let space = smooth_space()?;
    let dims = space.encoded_len();
    let bumps = seeded_bumps(seed, dims, (15.0, 30.0), (0.10, 0.16));
    let interactions =
        seeded_interactions(seed, &bumps, &[(0, 2), (1, 3), (2, 5), (0, 4)], (8.0, 16.0));
    Ok(EnvironmentSpec {
        name: "smooth".into(),
        objective: ObjectiveSpec::maximize("throughput"),
        space,
        landscape: LandscapeSpec {
            base: 40.0,
            bumps,
            interactions,
            unstable_regions: Vec::new(),
            temptation: 1.0,
            direction: Direction::Maximize,
        },
        workers: WorkerGenSpec {
            baseline_range: (1.0, 1.0),
            noise_cov_range: (noise, noise),
            observation_noise: 0.01,
            mixing_jitter: 0.15,
        },
    })
}

fn planted_unstable_spec(seed: u64, noise: f64) -> Result<EnvironmentSpec> {
    let space = ConfigSpace::new(vec![
        ParameterDef::continuous("cache_mb", 16.0, 4096.0).log_scale(),
        ParameterDef::integer("prefetch_depth", 0, 32),
        ParameterDef::categorical("scan_mode", &["basic", "bitmap"])
            .with_default(ParamValue::Choice("basic".into())),
        ParameterDef::continuous("parallel_ratio", 0.0, 1.0),
        ParameterDef::continuous("plan_cost_bias", 0.5, 4.0),
        ParameterDef::continuous("vacuum_scale", 0.0, 1.0),
    ])?;
    // encoded layout: 0 cache_mb, 1 prefetch_depth, 2-3 scan_mode one-hot,
    // 4 parallel_ratio, 5 plan_cost_bias, 6 vacuum_scale
    let dims = space.encoded_len();
    let mut bumps = seeded_bumps(seed, dims, (8.0, 18.0), (0.2, 0.32));
    // one-hot coordinates are flat, not bells
    for b in &mut bumps {
        if b.dim == 2 || b.dim == 3 {
            b.amplitude = 0.0;
        }
    }
    let interactions = seeded_interactions(seed, &bumps, &[(0, 4), (1, 5), (4, 6)], (4.0, 9.0));
    let shoulder = |dim: usize, offset: f64, span: f64, bumps: &[Bump]| {
        let lo = (bumps[dim].center + offset).clamp(0.0, 1.0 - span);
        CoordRange {
            dim,
            lo,
            hi: lo + span,
        }
    };
    let unstable_regions = vec![
        UnstableRegion {
            class_id: 0,
            conditions: vec![
                shoulder(0, 0.12, 0.22, &bumps),
                shoulder(4, -0.34, 0.22, &bumps),
                CoordRange {
                    dim: 3,
                    lo: 0.5,
                    hi: 1.0,
                }, // scan_mode = bitmap
            ],
            degrade_factor: 0.25,
            worker_bad_fraction: 0.5,
        },
        UnstableRegion {
            class_id: 1,
            conditions: vec![
                shoulder(5, 0.14, 0.2, &bumps),
                shoulder(6, 0.14, 0.2, &bumps),
            ],
            degrade_factor: 0.25,
            worker_bad_fraction: 0.5,
        },
        UnstableRegion {
            class_id: 2,
            conditions: vec![
                shoulder(1, -0.32, 0.2, &bumps),
                shoulder(4, 0.12, 0.2, &bumps),
            ],
            degrade_factor: 0.25,
            worker_bad_fraction: 0.5,
        },
    ];
    Ok(EnvironmentSpec {
        name: "planted-unstable".into(),
        objective: ObjectiveSpec::maximize("throughput"),
        space,
        landscape: LandscapeSpec {
            base: 40.0,
            bumps,
            interactions,
            unstable_regions,
            temptation: 1.8,
            direction: Direction::Maximize,
        },
        workers: WorkerGenSpec {
            baseline_range: (0.99, 1.01),
            noise_cov_range: (noise, noise),
            observation_noise: 0.01,
            mixing_jitter: 0.15,
        },
    })
}

fn learnable_noise_spec(seed: u64, noise_override: Option<f64>) -> Result<EnvironmentSpec> {
    let space = smooth_space()?;
    let dims = space.encoded_len();
    let bumps = seeded_bumps(seed, dims, (8.0, 20.0), (0.15, 0.26));
    let interactions =
        seeded_interactions(seed, &bumps, &[(0, 2), (1, 3), (2, 5), (3, 4)], (4.0, 10.0));
    let noise_range = match noise_override {
        Some(n) => (n, n),
        None => (0.04, 0.09),
    };
    Ok(EnvironmentSpec {
        name: "learnable-noise".into(),
        objective: ObjectiveSpec::maximize("throughput"),
        space,
        landscape: LandscapeSpec {
            base: 40.0,
            bumps,
            interactions,
            unstable_regions: Vec::new(),
            temptation: 1.0,
            direction: Direction::Maximize,
        },
        workers: WorkerGenSpec {
            baseline_range: (0.97, 1.03),
            noise_cov_range: noise_range,
            observation_noise: 0.01,
            mixing_jitter: 0.2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Decode a point inside the given region of a planted environment,
    /// picking filler coordinates that keep it out of the other regions.
    fn region_config(env: &Environment, region_idx: usize) -> Configuration {
        let region = &env.spec.landscape.unstable_regions[region_idx];
        for filler in [0.5, 0.05, 0.95, 0.3, 0.7] {
            let mut z = vec![filler; env.space().encoded_len()];
            z[2] = 1.0;
            z[3] = 0.0;
            for c in &region.conditions {
                z[c.dim] = (c.lo + c.hi) / 2.0;
            }
            // one-hot block must stay consistent if the region pins it
            if region.conditions.iter().any(|c| c.dim == 3) {
                z[2] = 0.0;
                z[3] = 1.0;
            }
            let cfg = env.space().decode(&z).unwrap();
            let z2: Vec<f64> = env.space().encode(&cfg).unwrap();
            match env.spec.landscape.region_match(&z2) {
                Some(m) if m.class_id == region.class_id => return cfg,
                _ => continue,
            }
        }
        panic!("could not place a probe inside region {region_idx}");
    }

    #[test]
    fn noise_free_smooth_evaluation_is_exact() {
        let env = make_environment("smooth", 3, 10, Some(0.0)).unwrap();
        let cfg = env.space().default_config().unwrap();
        let z: Vec<f64> = env.space().encode(&cfg).unwrap();
        let expected = env.spec.landscape.value(&z);
        for w in 0..10 {
            let out = env.evaluate(w, &cfg, 0).unwrap();
            assert_eq!(out.performance, expected);
            assert_eq!(out.delta, 1.0);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let env_a = make_environment("learnable-noise", 9, 10, None).unwrap();
        let env_b = make_environment("learnable-noise", 9, 10, None).unwrap();
        let cfg = env_a.space().sample_random(4, 1).unwrap().remove(0);
        let a = env_a.evaluate(3, &cfg, 2).unwrap();
        let b = env_b.evaluate(3, &cfg, 2).unwrap();
        assert_eq!(a.performance.to_bits(), b.performance.to_bits());
        assert_eq!(a.metrics, b.metrics);
        // different ordinal gives a different draw
        let c = env_a.evaluate(3, &cfg, 3).unwrap();
        assert_ne!(a.performance.to_bits(), c.performance.to_bits());
    }

    #[test]
    fn degrade_factor_applies_on_bad_bit_workers() {
        let mut spec = planted_unstable_spec(5, 0.0).unwrap();
        spec.workers.baseline_range = (1.0, 1.0);
        let env = Environment::from_spec(spec, 5, 10);
        let cfg = region_config(&env, 1);
        let plateau = env.spec.landscape.region_plateau();
        let mut seen_good = false;
        let mut seen_bad = false;
        for w in 0..10 {
            let out = env.evaluate(w, &cfg, 0).unwrap();
            if out.degraded {
                seen_bad = true;
                assert!((out.performance - 0.25 * plateau).abs() < 1e-9);
            } else {
                seen_good = true;
                assert!((out.performance - plateau).abs() < 1e-9);
            }
        }
        assert!(seen_good || seen_bad);
    }

    #[test]
    fn bad_bits_average_half_the_pool() {
        // binomial(10, 0.5) mean over 100 seeds
        let mut total = 0usize;
        for seed in 0..100 {
            let env = make_environment("planted-unstable", seed, 10, Some(0.0)).unwrap();
            total += env
                .workers()
                .iter()
                .filter(|w| *w.unstable_path_bits.get(&0).unwrap())
                .count();
        }
        let mean = total as f64 / 100.0;
        assert!((4.5..=5.5).contains(&mean), "mean bad bits {mean}");
    }

    #[test]
    fn planted_config_flags_when_both_modes_observed() {
        // exact at sigma = 0
        for seed in 0..20 {
            let env = make_environment("planted-unstable", seed, 10, Some(0.0)).unwrap();
            let cfg = region_config(&env, 0);
            let outs: Vec<SimOutcome> =
                (0..10).map(|w| env.evaluate(w, &cfg, 0).unwrap()).collect();
            let any_bad = outs.iter().any(|o| o.degraded);
            let any_good = outs.iter().any(|o| !o.degraded);
            if any_bad && any_good {
                let samples: Vec<f64> = outs.iter().map(|o| o.performance).collect();
                let rr = crate::stability::relative_range(&samples).unwrap();
                assert!(rr > 0.3, "seed {seed}: rr {rr} <= 0.3");
            }
        }
    }

    #[test]
    fn planted_config_flags_with_noise_at_99_percent() {
        // probabilistic variant: degrade 0.25, sigma 0.05
        let mut flagged = 0;
        let mut eligible = 0;
        for seed in 0..100 {
            let env = make_environment("planted-unstable", seed, 10, Some(0.05)).unwrap();
            let cfg = region_config(&env, 0);
            let outs: Vec<SimOutcome> =
                (0..10).map(|w| env.evaluate(w, &cfg, 0).unwrap()).collect();
            let any_bad = outs.iter().any(|o| o.degraded);
            let any_good = outs.iter().any(|o| !o.degraded);
            if any_bad && any_good {
                eligible += 1;
                let samples: Vec<f64> = outs.iter().map(|o| o.performance).collect();
                if crate::stability::relative_range(&samples).unwrap() > 0.3 {
                    flagged += 1;
                }
            }
        }
        assert!(eligible > 50, "most seeds should show both modes");
        assert!(
            flagged as f64 >= 0.99 * eligible as f64,
            "flagged {flagged} of {eligible}"
        );
    }

    #[test]
    fn deployment_truth_degrades_unstable_configs() {
        let env = make_environment("planted-unstable", 5, 10, Some(0.0)).unwrap();
        let cfg = region_config(&env, 1);
        let truth = env.deployment_truth(&cfg).unwrap();
        let plateau = env.spec.landscape.region_plateau();
        assert!((truth - 0.25 * plateau * 0.99).abs() < 1e-9);
        // stable configs keep their landscape value at the baseline floor
        let d = env.space().default_config().unwrap();
        let z: Vec<f64> = env.space().encode(&d).unwrap();
        let expect = env.spec.landscape.value(&z) * 0.99;
        assert!((env.deployment_truth(&d).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn inject_noise_degenerate_and_moments() {
        assert_eq!(inject_noise(100.0, 0.0, 1).unwrap(), 100.0);
        // Monte Carlo moment check: sigma=0.05, 1e5 seeded draws
        let n = 100_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let v = inject_noise(100.0, 0.05, i).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let cov = var.sqrt() / mean;
        assert!((99.8..=100.2).contains(&mean), "mean {mean}");
        assert!((0.048..=0.052).contains(&cov), "cov {cov}");
    }

    #[test]
    fn delta_truncation_bound() {
        let mut rng = derive_rng(1, "trunc", &[]);
        for _ in 0..1_000_000 {
            let d = draw_delta(0.5, &mut rng);
            assert!((0.1..=1.9).contains(&d));
        }
    }

    #[test]
    fn sigma_out_of_range_rejected() {
        assert!(matches!(
            inject_noise(100.0, 0.6, 1),
            Err(Error::Validation(_))
        ));
        assert!(matches!(inject_noise(-5.0, 0.1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn unknown_environment_is_usage_error() {
        assert!(matches!(
            make_environment("bogus", 1, 10, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn environment_spec_json_round_trip() {
        let spec = planted_unstable_spec(7, 0.02).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: EnvironmentSpec = serde_json::from_str(&json).unwrap();
        let a = Environment::from_spec(spec, 7, 10);
        let b = Environment::from_spec(back, 7, 10);
        let cfg = a.space().sample_random(1, 1).unwrap().remove(0);
        assert_eq!(
            a.evaluate(0, &cfg, 0).unwrap().performance.to_bits(),
            b.evaluate(0, &cfg, 0).unwrap().performance.to_bits()
        );
    }

    #[test]
    fn metrics_predict_delta_linearly() {
        // offline oracle: least squares of delta on the 20 metric channels
        // over 1000 trials must reach R^2 >= 0.9
        let env = make_environment("learnable-noise", 21, 10, None).unwrap();
        let configs = env.space().sample_random(77, 100).unwrap();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for (i, cfg) in configs.iter().enumerate() {
            for w in 0..10 {
                let out = env.evaluate(w, cfg, i as u64).unwrap();
                let mut row: Vec<f64> = out.metrics.values().copied().collect();
                row.push(1.0); // intercept
                xs.push(row);
                ys.push(out.delta);
            }
        }
        let beta = least_squares(&xs, &ys);
        let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let pred: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            ss_res += (pred - y) * (pred - y);
            ss_tot += (y - mean_y) * (y - mean_y);
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 >= 0.9, "linear oracle R^2 {r2}");
    }

    fn least_squares(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let d = xs[0].len();
        let mut aug = vec![vec![0.0f64; d + 1]; d];
        for (x, &y) in xs.iter().zip(ys) {
            for i in 0..d {
                for j in 0..d {
                    aug[i][j] += x[i] * x[j];
                }
                aug[i][d] += x[i] * y;
            }
        }
        for col in 0..d {
            let mut pivot = col;
            for r in col + 1..d {
                if aug[r][col].abs() > aug[pivot][col].abs() {
                    pivot = r;
                }
            }
            aug.swap(col, pivot);
            let p = aug[col][col];
            if p.abs() < 1e-12 {
                continue;
            }
            for r in 0..d {
                if r == col {
                    continue;
                }
                let factor = aug[r][col] / p;
                for k in col..=d {
                    aug[r][k] -= factor * aug[col][k];
                }
            }
        }
        (0..d)
            .map(|i| {
                if aug[i][i].abs() < 1e-12 {
                    0.0
                } else {
                    aug[i][d] / aug[i][i]
                }
            })
            .collect()
    }
}
