// temporary calibration probes; run with --ignored --nocapture
use std::sync::Arc;

use rayon::prelude::*;
use tuna_core::analysis::{mean_curve, time_to_optimal, ConvergenceCurve, CurveSignal, TimeToOptimal};
use tuna_core::catalog::Catalog;
use tuna_core::cluster::TrialBackend;
use tuna_core::objective::Direction;
use tuna_core::optimizer::{OptimizerKind, RunMode};
use tuna_core::runner::{run_tuning, RunOutput, RunSettings};
use tuna_core::simulator::make_environment;

fn run(mode: RunMode, seed: u64, trials: usize, env_name: &str, noise: Option<f64>, detector: bool, model: bool) -> RunOutput {
    let env = Arc::new(make_environment(env_name, seed, 10, noise).unwrap());
    let space = env.space().clone();
    let objective = env.objective().clone();
    let mut settings = RunSettings::new(mode, seed, trials);
    settings.detector_enabled = detector;
    settings.model_enabled = model;
    settings.optimizer = OptimizerKind::ForestBo;
    run_tuning(&space, TrialBackend::Simulated(env), objective, &settings, Catalog::in_memory()).unwrap()
}

#[test]
#[ignore]
fn probe_noise_slows_convergence() {
    let seeds: Vec<u64> = (0..12).collect();
    let start = std::time::Instant::now();
    let mut means = Vec::new();
    for sigma in [0.0, 0.05, 0.10] {
        let curves: Vec<ConvergenceCurve> = seeds
            .par_iter()
            .map(|&seed| {
                let out = run(RunMode::Traditional, seed, 100, "smooth", Some(sigma), true, true);
                ConvergenceCurve::from_tells(&out.tells, CurveSignal::DeploymentTruth, Direction::Maximize, seed, "traditional").unwrap()
            })
            .collect();
        let m = mean_curve(&curves);
        println!(
            "sigma {sigma}: len {} at25 {:.2} at50 {:.2} at100 {:.2}",
            m.len(), m[24], m[49], m[m.len() - 1]
        );
        means.push(m);
    }
    // optimum reference
    let env = make_environment("smooth", 0, 10, Some(0.0)).unwrap();
    let opt = env.spec.landscape.stable_optimum();
    println!("stable optimum  {opt:.2}");
    println!("elapsed {:?}", start.elapsed());
    for frac in [0.9, 0.95] {
        match time_to_optimal(&means[0], &means[1], frac, Direction::Maximize).unwrap() {
            TimeToOptimal::Ratio { ratio, hit_a, hit_b } => println!("frac {frac}: tto(0.05 vs 0) = {ratio:.2} ({hit_a} -> {hit_b})"),
            TimeToOptimal::Unbounded { hit_a, max_iteration } => println!("frac {frac}: unbounded (a hit {hit_a:?}, max {max_iteration})"),
        }
    }
    println!(
        "final means: {:.2} {:.2} {:.2}",
        means[0].last().unwrap(), means[1].last().unwrap(), means[2].last().unwrap()
    );
}

#[test]
#[ignore]
fn probe_planted_unstable() {
    let seeds: Vec<u64> = (0..8).collect();
    let start = std::time::Instant::now();
    for (label, detector) in [("tuna", true), ("no-detector", false)] {
        let results: Vec<(bool, f64, f64)> = seeds
            .par_iter()
            .map(|&seed| {
                let out = run(RunMode::Tuna, seed, 300, "planted-unstable", None, detector, true);
                let env = make_environment("planted-unstable", seed, 10, None).unwrap();
                let best = out.best.as_ref().expect("best config");
                let cfg = env.space().configuration(&best.values).unwrap();
                let z: Vec<f64> = env.space().encode(&cfg).unwrap();
                let unstable = env.spec.landscape.region_match(&z).is_some();
                let truth = env.deployment_truth(&cfg).unwrap();
                (unstable, best.reported_score, truth)
            })
            .collect();
        let frac_unstable = results.iter().filter(|r| r.0).count() as f64 / results.len() as f64;
        println!("{label}: unstable-best fraction {frac_unstable:.2}");
        for (i, r) in results.iter().enumerate() {
            println!("  seed {i}: unstable {} reported {:.1} truth {:.1}", r.0, r.1, r.2);
        }
    }
    println!("elapsed {:?}", start.elapsed());
}

#[test]
#[ignore]
fn probe_model_ablation() {
    let seeds: Vec<u64> = (0..6).collect();
    let start = std::time::Instant::now();
    let results: Vec<(f64, f64, usize, usize)> = seeds
        .par_iter()
        .map(|&seed| {
            let env = make_environment("learnable-noise", seed, 10, None).unwrap();
            let with = run(RunMode::Tuna, seed, 500, "learnable-noise", None, true, true);
            let without = run(RunMode::Tuna, seed, 500, "learnable-noise", None, true, false);
            let err = |out: &RunOutput| {
                let half = out.tells.len() / 2;
                let mut es = Vec::new();
                for t in &out.tells[half..] {
                    let values = out.catalog.config_values(t.config_id).unwrap();
                    let cfg = env.space().configuration(values).unwrap();
                    let z: Vec<f64> = env.space().encode(&cfg).unwrap();
                    let f = env.spec.landscape.value(&z);
                    es.push((t.reported - f).abs() / f);
                }
                es.iter().sum::<f64>() / es.len() as f64
            };
            // convergence comparison
            let curve_with = ConvergenceCurve::from_tells(&with.tells, CurveSignal::DeploymentTruth, Direction::Maximize, seed, "with").unwrap();
            let curve_without = ConvergenceCurve::from_tells(&without.tells, CurveSignal::DeploymentTruth, Direction::Maximize, seed, "without").unwrap();
            let target = curve_without.final_best().unwrap();
            let hit_with = curve_with.points.iter().position(|&v| v >= target).map(|i| i + 1);
            let hit_without = curve_without.points.iter().position(|&v| v >= target).map(|i| i + 1);
            (err(&with), err(&without), hit_with.unwrap_or(usize::MAX), hit_without.unwrap_or(usize::MAX))
        })
        .collect();
    for (i, (ew, ewo, hw, hwo)) in results.iter().enumerate() {
        println!(
            "seed {i}: err with {ew:.4} without {ewo:.4} ratio {:.2} | hit with {hw} without {hwo} faster {}",
            ew / ewo, hw < hwo
        );
    }
    let faster = results.iter().filter(|r| r.2 < r.3).count();
    println!("faster on {faster}/{} seeds", results.len());
    println!("elapsed {:?}", start.elapsed());
}
