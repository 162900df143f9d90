//! Post-hoc statistics: convergence curves, time-to-optimal ratios,
//! dispersion summaries, detection probability, minimal cluster sizing, and
//! the deployment-evaluation protocol (best config on fresh workers).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::configspace::Configuration;
use crate::error::{Error, Result};
use crate::objective::Direction;
use crate::rng::{derive_rng, derive_seed};
use crate::runner::TellEvent;
use crate::scalar::{c, mean, population_stddev, Scalar};
use crate::simulator::Environment;
use crate::stability::relative_range;

/// Coefficient of variation: population stddev over mean.
pub fn cov<T: Scalar>(samples: &[T]) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Domain("cov of an empty sample set".into()));
    }
    let m = mean(samples);
    let scale: T = samples.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    if scale == T::zero() || m.abs() < c::<T>(1e-12) * scale {
        return Err(Error::Degenerate("mean too close to zero for cov".into()));
    }
    Ok(population_stddev(samples) / m.abs())
}

/// Best-so-far trajectory over tell iterations. Values are the running
/// extremum of the selected signal, so curves are monotone in the run's
/// objective direction by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    pub points: Vec<f64>,
    pub seed: u64,
    pub mode: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveSignal {
    /// Noise-free worst-case deployment performance (simulation only).
    DeploymentTruth,
    /// The scores the optimizer was actually told.
    Reported,
}

impl ConvergenceCurve {
    pub fn from_tells(
        tells: &[TellEvent],
        signal: CurveSignal,
        direction: Direction,
        seed: u64,
        mode: &str,
    ) -> Result<Self> {
        let mut points = Vec::with_capacity(tells.len());
        let mut best: Option<f64> = None;
        for t in tells {
            let v = match signal {
                CurveSignal::Reported => t.reported,
                CurveSignal::DeploymentTruth => t.truth.ok_or_else(|| {
                    Error::State("deployment truth unavailable for this run".into())
                })?,
            };
            best = Some(match best {
                None => v,
                Some(b) if direction.better(v, b) => v,
                Some(b) => b,
            });
            points.push(best.expect("set above"));
        }
        Ok(Self {
            points,
            seed,
            mode: mode.to_string(),
        })
    }

    pub fn final_best(&self) -> Option<f64> {
        self.points.last().copied()
    }
}

/// Mean of several curves, truncated to the shortest.
pub fn mean_curve(curves: &[ConvergenceCurve]) -> Vec<f64> {
    let n = curves.iter().map(|c| c.points.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| curves.iter().map(|c| c.points[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TimeToOptimal {
    /// first-hit(b) / first-hit(a), both 1-based iterations.
    Ratio { ratio: f64, hit_a: usize, hit_b: usize },
    /// Curve `b` never reached the target within its horizon.
    Unbounded { hit_a: Option<usize>, max_iteration: usize },
}

/// Slow-down of curve `b` relative to curve `a` in reaching
/// `target_fraction` of `a`'s final best.
pub fn time_to_optimal(
    curve_a: &[f64],
    curve_b: &[f64],
    target_fraction: f64,
    direction: Direction,
) -> Result<TimeToOptimal> {
    if curve_a.is_empty() || curve_b.is_empty() {
        return Err(Error::Domain("empty convergence curve".into()));
    }
    let final_a = *curve_a.last().expect("non-empty");
    let target = match direction {
        Direction::Maximize => final_a * target_fraction,
        Direction::Minimize => final_a / target_fraction,
    };
    let reached = |v: f64| match direction {
        Direction::Maximize => v >= target,
        Direction::Minimize => v <= target,
    };
    let hit_a = curve_a.iter().position(|&v| reached(v)).map(|i| i + 1);
    let hit_b = curve_b.iter().position(|&v| reached(v)).map(|i| i + 1);
    match (hit_a, hit_b) {
        (Some(a), Some(b)) => Ok(TimeToOptimal::Ratio {
            ratio: b as f64 / a as f64,
            hit_a: a,
            hit_b: b,
        }),
        (a, _) => Ok(TimeToOptimal::Unbounded {
            hit_a: a,
            max_iteration: curve_b.len(),
        }),
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        result = result * (n - i) as u128 / (i + 1) as u128;
    }
    result
}

/// Probability that sampling `n_sampled` distinct workers out of `pool`
/// (uniformly, without replacement) observes at least one bad and at least
/// one good worker. The relative-range detector is blind unless both
/// behaviors appear in the sample.
pub fn detection_probability(n_sampled: usize, pool: usize, bad_workers: usize) -> Result<f64> {
    if n_sampled < 1 || n_sampled > pool {
        return Err(Error::Domain(format!(
            "sample size {n_sampled} outside 1..={pool}"
        )));
    }
    if bad_workers > pool {
        return Err(Error::Domain("bad workers exceed the pool".into()));
    }
    if pool > 128 {
        return Err(Error::Domain("pool too large for exact binomials".into()));
    }
    let total = binomial(pool, n_sampled);
    let all_bad = binomial(bad_workers, n_sampled);
    let all_good = binomial(pool - bad_workers, n_sampled);
    Ok((total - all_bad - all_good) as f64 / total as f64)
}

/// Detection probability when the full cluster of size `n` evaluates the
/// config and each worker carries the bad bit independently with
/// probability `frac`: 1 - frac^n - (1-frac)^n.
pub fn full_cluster_detection(n: usize, frac: f64) -> f64 {
    1.0 - frac.powi(n as i32) - (1.0 - frac).powi(n as i32)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSizeResult {
    /// Smallest pool size meeting the confidence target, if any.
    pub minimal_n: Option<usize>,
    /// Closed-form all-detected probability at each pool size tried.
    pub closed_form: Vec<(usize, f64)>,
    /// Monte Carlo estimate at the minimal size.
    pub monte_carlo: Option<f64>,
    pub replicates: usize,
}

/// Smallest cluster size detecting every unstable configuration a run
/// encounters with the requested confidence. Each of the
/// `n_unstable_per_run` configs draws its bad-worker fraction uniformly
/// from `profiles`; per-worker bits are independent, and a config is
/// detected when the cluster realizes both behaviors.
pub fn min_cluster_size(
    profiles: &[f64],
    n_unstable_per_run: usize,
    confidence: f64,
    seed: u64,
    replicates: usize,
) -> Result<ClusterSizeResult> {
    if profiles.is_empty() {
        return Err(Error::Domain("no instability profiles given".into()));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(Error::Domain("confidence must lie in (0,1)".into()));
    }
    if n_unstable_per_run < 1 {
        return Err(Error::Domain("need at least one unstable config".into()));
    }
    if replicates < 100_000 {
        return Err(Error::Domain("use at least 1e5 Monte Carlo replicates".into()));
    }
    // a fraction of 0 or 1 means the config never shows both behaviors
    if profiles.iter().any(|&f| f <= 0.0 || f >= 1.0) {
        return Ok(ClusterSizeResult {
            minimal_n: None,
            closed_form: Vec::new(),
            monte_carlo: None,
            replicates,
        });
    }

    let mut closed_form = Vec::new();
    let mut minimal_n = None;
    for n in 2..=64usize {
        let single: f64 =
            profiles.iter().map(|&f| full_cluster_detection(n, f)).sum::<f64>() / profiles.len() as f64;
        let all = single.powi(n_unstable_per_run as i32);
        closed_form.push((n, all));
        if all >= confidence {
            minimal_n = Some(n);
            break;
        }
    }

    let monte_carlo = minimal_n.map(|n| {
        let mut rng = derive_rng(seed, "cluster-size.mc", &[]);
        let mut detected_all = 0usize;
        for _ in 0..replicates {
            let mut ok = true;
            for _ in 0..n_unstable_per_run {
                let frac = profiles[rng.gen_range(0..profiles.len())];
                let mut bad = 0usize;
                for _ in 0..n {
                    if rng.gen::<f64>() < frac {
                        bad += 1;
                    }
                }
                if bad == 0 || bad == n {
                    ok = false;
                    break;
                }
            }
            if ok {
                detected_all += 1;
            }
        }
        detected_all as f64 / replicates as f64
    });

    Ok(ClusterSizeResult {
        minimal_n,
        closed_form,
        monte_carlo,
        replicates,
    })
}

/// Deployment of one configuration onto fresh workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub config_id: u64,
    /// (worker index, performance) per replicate.
    pub performances: Vec<(usize, f64)>,
    pub mean: f64,
    pub stddev: f64,
    pub cov: f64,
    pub relative_range: f64,
    pub crashed: usize,
}

/// Evaluate a configuration on fresh workers drawn from a seed disjoint
/// from tuning. Replicates cycle through the fresh pool.
pub fn deployment_eval(
    env: &Environment,
    config: &Configuration,
    fresh_workers: usize,
    replicates: usize,
    deploy_seed: u64,
) -> Result<DeploymentReport> {
    if fresh_workers == 0 || replicates == 0 {
        return Err(Error::Domain("deployment needs workers and replicates".into()));
    }
    let profiles = env.fresh_workers(deploy_seed, fresh_workers);
    let mut performances = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let w = r % fresh_workers;
        let trial_seed = derive_seed(
            deploy_seed,
            "deploy-trial",
            &[w as u64, config.id(), (r / fresh_workers) as u64],
        );
        let out = env.evaluate_on(&profiles[w], config, trial_seed)?;
        performances.push((w, out.performance));
    }
    let values: Vec<f64> = performances.iter().map(|&(_, p)| p).collect();
    Ok(DeploymentReport {
        config_id: config.id(),
        mean: mean(&values),
        stddev: population_stddev(&values),
        cov: cov(&values)?,
        relative_range: relative_range(&values)?,
        crashed: 0,
        performances,
    })
}

pub fn write_curve_csv(path: &Path, curves: &[ConvergenceCurve]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,best_so_far,seed,mode")?;
    for curve in curves {
        for (i, v) in curve.points.iter().enumerate() {
            writeln!(f, "{},{},{},{}", i + 1, v, curve.seed, curve.mode)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_deploy_csv(path: &Path, reports: &[DeploymentReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "config_id,worker,performance")?;
    for report in reports {
        for (worker, perf) in &report.performances {
            writeln!(f, "{},{},{}", report.config_id, worker, perf)?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cov_values() {
        assert_eq!(cov::<f64>(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((cov::<f64>(&[90.0, 110.0]).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(cov::<f64>(&[]), Err(Error::Domain(_))));
        // scale invariance
        let xs = [3.0, 5.5, 9.25, 4.0];
        let scaled: Vec<f64> = xs.iter().map(|x| x * 7.5).collect();
        assert!((cov(&xs).unwrap() - cov(&scaled).unwrap()).abs() < 1e-12);
    }

    fn tell(iteration: u64, reported: f64, truth: f64) -> TellEvent {
        TellEvent {
            iteration,
            config_id: iteration,
            budget: 1,
            reported,
            relative_range: 0.0,
            is_unstable: false,
            model_rows: 0,
            truth: Some(truth),
        }
    }

    #[test]
    fn curves_are_monotone_running_extrema() {
        let tells = vec![
            tell(1, 5.0, 4.0),
            tell(2, 3.0, 9.0),
            tell(3, 8.0, 2.0),
            tell(4, 7.0, 1.0),
        ];
        let c = ConvergenceCurve::from_tells(
            &tells,
            CurveSignal::Reported,
            Direction::Maximize,
            0,
            "tuna",
        )
        .unwrap();
        assert_eq!(c.points, vec![5.0, 5.0, 8.0, 8.0]);
        let t = ConvergenceCurve::from_tells(
            &tells,
            CurveSignal::DeploymentTruth,
            Direction::Maximize,
            0,
            "tuna",
        )
        .unwrap();
        assert_eq!(t.points, vec![4.0, 9.0, 9.0, 9.0]);
        assert!(t.points.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn time_to_optimal_cases() {
        let a: Vec<f64> = (1..=100).map(|i| (i as f64).min(40.0) / 40.0).collect();
        // identical curves
        match time_to_optimal(&a, &a, 0.95, Direction::Maximize).unwrap() {
            TimeToOptimal::Ratio { ratio, .. } => assert_eq!(ratio, 1.0),
            _ => panic!("expected ratio"),
        }
        // a hits at 40, b at 100 -> 2.5
        let fast: Vec<f64> = (1..=100)
            .map(|i| if i >= 40 { 1.0 } else { 0.0 })
            .collect();
        let slow: Vec<f64> = (1..=100)
            .map(|i| if i >= 100 { 1.0 } else { 0.0 })
            .collect();
        match time_to_optimal(&fast, &slow, 0.95, Direction::Maximize).unwrap() {
            TimeToOptimal::Ratio { ratio, hit_a, hit_b } => {
                assert_eq!(ratio, 2.5);
                assert_eq!((hit_a, hit_b), (40, 100));
            }
            _ => panic!("expected ratio"),
        }
        // b never reaches -> unbounded marker
        let never: Vec<f64> = vec![0.5; 100];
        match time_to_optimal(&fast, &never, 0.95, Direction::Maximize).unwrap() {
            TimeToOptimal::Unbounded { hit_a, max_iteration } => {
                assert_eq!(hit_a, Some(40));
                assert_eq!(max_iteration, 100);
            }
            _ => panic!("expected unbounded"),
        }
    }

    #[test]
    fn detection_probability_closed_form() {
        // one sample can never reveal a range
        for bad in 0..=10 {
            assert_eq!(detection_probability(1, 10, bad).unwrap(), 0.0);
        }
        // pool=10, bad=5, n=2: 1 - 20/45 = 5/9
        let p = detection_probability(2, 10, 5).unwrap();
        assert_eq!(p, 25.0 / 45.0);
        // nothing to detect
        assert_eq!(detection_probability(5, 10, 0).unwrap(), 0.0);
        assert_eq!(detection_probability(5, 10, 10).unwrap(), 0.0);
        // full pool with a genuine split always detects
        assert_eq!(detection_probability(10, 10, 5).unwrap(), 1.0);
        assert!(matches!(
            detection_probability(0, 10, 5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            detection_probability(11, 10, 5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn detection_probability_matches_enumeration() {
        // exhaustive subset enumeration for pool = 10, bad = 5
        let pool = 10;
        let bad = 5;
        for n in 1..=pool {
            let mut both = 0u64;
            let mut total = 0u64;
            for mask in 0u32..(1 << pool) {
                if mask.count_ones() as usize != n {
                    continue;
                }
                total += 1;
                let bad_count = (mask & 0b11111).count_ones();
                let good_count = n as u32 - bad_count;
                if bad_count > 0 && good_count > 0 {
                    both += 1;
                }
            }
            let enumerated = both as f64 / total as f64;
            assert_eq!(
                detection_probability(n, pool, bad).unwrap(),
                enumerated,
                "n = {n}"
            );
        }
    }

    #[test]
    fn detection_probability_monotone_in_sample_size() {
        for bad in 1..10 {
            let mut last = 0.0;
            for n in 1..=10 {
                let p = detection_probability(n, 10, bad).unwrap();
                assert!(p >= last - 1e-15);
                last = p;
            }
            assert_eq!(last, 1.0);
        }
    }

    #[test]
    fn min_cluster_size_brute_force_agreement() {
        // frac 0.5, one unstable config per run: 1 - 2 (1/2)^n >= 0.95
        // brute force over n gives n = 6
        let result = min_cluster_size(&[0.5], 1, 0.95, 7, 100_000).unwrap();
        let brute = (2..=64)
            .find(|&n| full_cluster_detection(n, 0.5) >= 0.95)
            .unwrap();
        assert_eq!(result.minimal_n, Some(brute));
        assert_eq!(brute, 6);
        // Monte Carlo agrees with the closed form within 1e-2
        let mc = result.monte_carlo.unwrap();
        let cf = full_cluster_detection(6, 0.5);
        assert!((mc - cf).abs() < 1e-2, "mc {mc} vs closed form {cf}");
    }

    #[test]
    fn min_cluster_size_mc_at_ten_matches_closed_form() {
        // frac 0.5, N = 10: closed form 1 - 2/1024
        let cf = full_cluster_detection(10, 0.5);
        assert!((cf - (1.0 - 2.0 / 1024.0)).abs() < 1e-15);
        let mut rng = derive_rng(3, "mc10", &[]);
        let mut hit = 0;
        let n = 100_000;
        for _ in 0..n {
            let bad = (0..10).filter(|_| rng.gen::<f64>() < 0.5).count();
            if bad > 0 && bad < 10 {
                hit += 1;
            }
        }
        assert!((hit as f64 / n as f64 - cf).abs() < 1e-2);
    }

    #[test]
    fn min_cluster_size_low_confidence_and_degenerate() {
        let r = min_cluster_size(&[0.5], 1, 1e-9, 7, 100_000).unwrap();
        assert_eq!(r.minimal_n, Some(2));
        let r = min_cluster_size(&[0.0, 0.5], 1, 0.95, 7, 100_000).unwrap();
        assert_eq!(r.minimal_n, None);
        let r = min_cluster_size(&[1.0], 1, 0.95, 7, 100_000).unwrap();
        assert_eq!(r.minimal_n, None);
        assert!(min_cluster_size(&[], 1, 0.5, 7, 100_000).is_err());
        assert!(min_cluster_size(&[0.5], 1, 1.5, 7, 100_000).is_err());
        assert!(min_cluster_size(&[0.5], 0, 0.5, 7, 100_000).is_err());
        assert!(min_cluster_size(&[0.5], 1, 0.5, 7, 10).is_err());
    }

    #[test]
    fn deployment_on_noise_free_smooth_env_has_zero_spread() {
        let env = crate::simulator::make_environment("smooth", 5, 10, Some(0.0)).unwrap();
        let cfg = env.space().default_config().unwrap();
        let report = deployment_eval(&env, &cfg, 10, 10, 99).unwrap();
        assert_eq!(report.stddev, 0.0);
        assert_eq!(report.cov, 0.0);
        assert_eq!(report.relative_range, 0.0);
        assert_eq!(report.crashed, 0);
        assert_eq!(report.performances.len(), 10);
    }

    #[test]
    fn deployment_of_planted_config_shows_huge_range() {
        // oracle: with g good and b bad fresh workers (g,b >= 1) and
        // baselines ~1, relative range = (f - 0.25 f)/mean per the realized
        // split; for a 5/5 split that is 0.75/0.625 = 1.2
        let env =
            crate::simulator::make_environment("planted-unstable", 11, 10, Some(0.0)).unwrap();
        let region = &env.spec.landscape.unstable_regions[1];
        let mut z = vec![0.5; env.space().encoded_len()];
        for c in &region.conditions {
            z[c.dim] = (c.lo + c.hi) / 2.0;
        }
        z[2] = 1.0;
        z[3] = 0.0;
        let cfg = env.space().decode(&z).unwrap();
        let report = deployment_eval(&env, &cfg, 10, 10, 42).unwrap();

        let profiles = env.fresh_workers(42, 10);
        let bad = profiles
            .iter()
            .filter(|p| *p.unstable_path_bits.get(&region.class_id).unwrap())
            .count();
        if bad > 0 && bad < 10 {
            let f = env.spec.landscape.region_plateau();
            let perfs: Vec<f64> = report.performances.iter().map(|&(_, p)| p).collect();
            let expect_rr = {
                let max = perfs.iter().cloned().fold(f64::MIN, f64::max);
                let min = perfs.iter().cloned().fold(f64::MAX, f64::min);
                (max - min) / (perfs.iter().sum::<f64>() / perfs.len() as f64)
            };
            assert!((report.relative_range - expect_rr).abs() < 1e-12);
            assert!(report.relative_range > 0.3);
            // sanity: the two modes sit at f and 0.25 f up to baseline skew
            let hi = perfs.iter().cloned().fold(f64::MIN, f64::max);
            assert!((hi / f - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn deployment_cov_tracks_injected_noise() {
        // stable config, sigma = 0.05: mean per-seed CoV near 0.05
        let mut covs = Vec::new();
        for seed in 0..100u64 {
            let env = crate::simulator::make_environment("smooth", 5, 10, Some(0.05)).unwrap();
            let cfg = env.space().default_config().unwrap();
            let report = deployment_eval(&env, &cfg, 10, 10, seed).unwrap();
            covs.push(report.cov);
        }
        let mean_cov = mean(&covs);
        assert!(
            (0.03..=0.07).contains(&mean_cov),
            "mean deployment cov {mean_cov}"
        );
    }

    #[test]
    fn csv_writers_produce_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let curve = ConvergenceCurve {
            points: vec![1.0, 2.0],
            seed: 3,
            mode: "tuna".into(),
        };
        let path = dir.path().join("curve.csv");
        write_curve_csv(&path, &[curve]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "iteration,best_so_far,seed,mode\n1,1,3,tuna\n2,2,3,tuna\n"
        );
    }
}
