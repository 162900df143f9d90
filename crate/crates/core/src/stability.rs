//! Unstable-configuration detection and worst-case aggregation.
//!
//! A configuration's multi-worker performance samples are summarized by the
//! relative range (max - min) / mean. Anything strictly above the threshold
//! (default 30%) is classified unstable, gets the adverse penalty, and is
//! reported to the optimizer from its worst-case sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Direction;
use crate::scalar::{c, mean, Scalar};

pub const DEFAULT_THRESHOLD: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict<T> {
    pub config_id: u64,
    pub relative_range: T,
    pub is_unstable: bool,
    pub threshold_used: T,
}

/// How multi-worker samples collapse into the single reported score.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregationPolicy<T> {
    pub direction: Direction,
    pub penalty_factor: T,
}

impl<T: Scalar> AggregationPolicy<T> {
    /// Worst-case aggregation with the default penalty: halve for maximize,
    /// double for minimize.
    pub fn worst_case(direction: Direction) -> Self {
        let penalty_factor = match direction {
            Direction::Maximize => c::<T>(0.5),
            Direction::Minimize => c::<T>(2.0),
        };
        Self {
            direction,
            penalty_factor,
        }
    }

    fn validate(&self) -> Result<()> {
        let adverse = match self.direction {
            Direction::Maximize => self.penalty_factor < T::one(),
            Direction::Minimize => self.penalty_factor > T::one(),
        };
        if !adverse || self.penalty_factor <= T::zero() {
            return Err(Error::Validation(
                "penalty factor must move scores in the adverse direction".into(),
            ));
        }
        Ok(())
    }
}

/// (max - min) / mean over samples of one sign.
pub fn relative_range<T: Scalar>(samples: &[T]) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Domain("relative range of an empty sample set".into()));
    }
    let mut min = samples[0];
    let mut max = samples[0];
    let mut abs_max = T::zero();
    for &s in samples {
        if !s.is_finite() {
            return Err(Error::Validation("non-finite sample".into()));
        }
        if s < min {
            min = s;
        }
        if s > max {
            max = s;
        }
        if s.abs() > abs_max {
            abs_max = s.abs();
        }
    }
    if min < T::zero() && max > T::zero() {
        return Err(Error::Domain(
            "samples must share one sign for a relative range".into(),
        ));
    }
    let m = mean(samples);
    if abs_max == T::zero() || m.abs() < c::<T>(1e-12) * abs_max {
        return Err(Error::Degenerate(
            "sample mean too close to zero for a relative range".into(),
        ));
    }
    Ok((max - min) / m.abs())
}

/// Classify a configuration. Unstable iff the relative range strictly
/// exceeds the threshold; a single sample is always stable.
pub fn classify<T: Scalar>(
    config_id: u64,
    samples: &[T],
    threshold: T,
) -> Result<StabilityVerdict<T>> {
    let rr = relative_range(samples)?;
    Ok(StabilityVerdict {
        config_id,
        relative_range: rr,
        is_unstable: rr > threshold,
        threshold_used: threshold,
    })
}

/// The canonical penalty: halve the score for maximize, double for minimize.
pub fn apply_penalty<T: Scalar>(score: T, direction: Direction) -> T {
    match direction {
        Direction::Maximize => score / c::<T>(2.0),
        Direction::Minimize => score * c::<T>(2.0),
    }
}

/// Worst-case sample in the policy direction; the penalty factor applies to
/// that value when the verdict is unstable.
pub fn aggregate<T: Scalar>(
    samples: &[T],
    verdict: &StabilityVerdict<T>,
    policy: &AggregationPolicy<T>,
) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot aggregate zero samples".into()));
    }
    policy.validate()?;
    let worst = match policy.direction {
        Direction::Maximize => samples.iter().copied().fold(T::infinity(), T::min),
        Direction::Minimize => samples.iter().copied().fold(T::neg_infinity(), T::max),
    };
    if verdict.is_unstable {
        Ok(worst * policy.penalty_factor)
    } else {
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stable_verdict() -> StabilityVerdict<f64> {
        StabilityVerdict {
            config_id: 0,
            relative_range: 0.0,
            is_unstable: false,
            threshold_used: DEFAULT_THRESHOLD,
        }
    }

    fn unstable_verdict() -> StabilityVerdict<f64> {
        StabilityVerdict {
            is_unstable: true,
            relative_range: 1.0,
            ..stable_verdict()
        }
    }

    #[test]
    fn pipeline_example_range() {
        let rr = relative_range::<f64>(&[500.0, 450.0, 530.0]).unwrap();
        assert!((rr - 0.162).abs() < 0.0005, "relative range {rr}");
        let v = classify(1, &[500.0, 450.0, 530.0], 0.30).unwrap();
        assert!(!v.is_unstable);
    }

    #[test]
    fn zero_range_and_simple_ratio() {
        assert_eq!(relative_range::<f64>(&[7.0, 7.0, 7.0]).unwrap(), 0.0);
        let rr = relative_range::<f64>(&[100.0, 140.0]).unwrap();
        assert!((rr - 40.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn classify_is_strict_at_threshold() {
        // {100, 140}: rr = 1/3 > 0.30 -> unstable
        assert!(classify(0, &[100.0, 140.0], 0.30).unwrap().is_unstable);
        // rr exactly 0.30: {85, 115} -> range 30, mean 100
        let v = classify(0, &[85.0, 115.0], 0.30).unwrap();
        assert_eq!(v.relative_range, 0.3);
        assert!(!v.is_unstable, "equality at the threshold stays stable");
    }

    #[test]
    fn single_sample_is_stable() {
        let v = classify(0, &[42.0], 0.30).unwrap();
        assert_eq!(v.relative_range, 0.0);
        assert!(!v.is_unstable);
    }

    #[test]
    fn range_errors() {
        assert!(matches!(
            relative_range::<f64>(&[]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            relative_range(&[1.0, -1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            relative_range(&[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            relative_range(&[f64::NAN, 1.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn penalty_is_halving_or_doubling() {
        assert_eq!(apply_penalty(1000.0, Direction::Maximize), 500.0);
        assert_eq!(apply_penalty(60.0, Direction::Minimize), 120.0);
        // compositional
        let twice = apply_penalty(apply_penalty(1000.0, Direction::Maximize), Direction::Maximize);
        assert_eq!(twice, 250.0);
    }

    #[test]
    fn aggregate_examples() {
        let max_policy = AggregationPolicy::worst_case(Direction::Maximize);
        let min_policy = AggregationPolicy::worst_case(Direction::Minimize);
        let agg = aggregate(&[460.0, 500.0, 520.0], &stable_verdict(), &max_policy).unwrap();
        assert_eq!(agg, 460.0);
        let agg = aggregate(&[1000.0, 400.0], &unstable_verdict(), &max_policy).unwrap();
        assert_eq!(agg, 200.0);
        let agg = aggregate(&[70.0, 94.0], &stable_verdict(), &min_policy).unwrap();
        assert_eq!(agg, 94.0);
        assert!(matches!(
            aggregate::<f64>(&[], &stable_verdict(), &max_policy),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stable_aggregate_is_a_member() {
        let policy = AggregationPolicy::worst_case(Direction::Maximize);
        let samples = [3.25, 9.5, 4.75];
        let agg = aggregate(&samples, &stable_verdict(), &policy).unwrap();
        assert!(samples.contains(&agg));
    }

    #[test]
    fn interior_sample_at_or_above_mean_never_flips_to_unstable() {
        // an interior sample leaves max-min unchanged; one at or above the
        // current mean can only grow the mean, so the ratio cannot rise
        let samples = vec![100.0, 125.0];
        let before = classify(0, &samples, 0.30).unwrap();
        assert!(!before.is_unstable);
        for v in [112.5, 118.0, 124.9] {
            let mut grown = samples.clone();
            grown.push(v);
            let after = classify(0, &grown, 0.30).unwrap();
            assert!(after.relative_range <= before.relative_range + 1e-12);
            assert!(!after.is_unstable);
        }
    }

    proptest! {
        #[test]
        fn relative_range_is_scale_invariant(
            xs in proptest::collection::vec(1e-3..1e6f64, 1..20),
            k in 1e-6..1e6f64,
        ) {
            let rr = relative_range(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
            let rr_scaled = relative_range(&scaled).unwrap();
            prop_assert!((rr - rr_scaled).abs() < 1e-9 * (1.0 + rr));
        }

        #[test]
        fn penalty_is_strictly_adverse(score in 1e-6..1e9f64) {
            prop_assert!(apply_penalty(score, Direction::Maximize) < score);
            prop_assert!(apply_penalty(score, Direction::Minimize) > score);
        }
    }
}
