//! The noise adjuster: a standardize+forest pipeline that predicts each
//! sample's relative error from system metrics plus a one-hot worker
//! encoding, then divides the error out of stable samples before
//! aggregation.
//!
//! The model starts cold (identity) and is rebuilt from scratch every time
//! the training set grows. Nothing carries over between runs.

use std::collections::BTreeMap;

use log::warn;

use crate::catalog::TrainingRow;
use crate::error::{Error, Result};
use crate::forest::{ForestHyperParams, ForestModel, Standardizer};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone)]
pub struct NoiseModelConfig {
    /// Distinct max-budget stable configs required before activation.
    pub activation_min_configs: usize,
    /// Total rows required before activation.
    pub activation_min_rows: usize,
    /// Optional clamp on the predicted relative error.
    pub guardrail: Option<(f64, f64)>,
    pub forest: ForestHyperParams,
}

impl Default for NoiseModelConfig {
    fn default() -> Self {
        Self {
            activation_min_configs: 2,
            activation_min_rows: 20,
            guardrail: None,
            forest: ForestHyperParams::default(),
        }
    }
}

impl NoiseModelConfig {
    pub fn with_guardrail(mut self) -> Self {
        self.guardrail = Some((-0.5, 0.5));
        self
    }
}

struct Fitted<T: Scalar> {
    standardizer: Standardizer<T>,
    forest: ForestModel<T>,
}

pub struct NoiseModel<T: Scalar> {
    metric_vocabulary: Vec<String>,
    worker_vocabulary: Vec<usize>,
    config: NoiseModelConfig,
    seed: u64,
    fitted: Option<Fitted<T>>,
    trained_row_count: usize,
    warned_metrics: std::collections::BTreeSet<String>,
}

impl<T: Scalar> NoiseModel<T> {
    /// A cold model. The metric vocabulary is frozen at construction (the
    /// caller freezes it from the first observed trial); the worker
    /// vocabulary defines the one-hot block, in order.
    pub fn new(
        metric_vocabulary: Vec<String>,
        worker_vocabulary: Vec<usize>,
        config: NoiseModelConfig,
        seed: u64,
    ) -> Self {
        Self {
            metric_vocabulary,
            worker_vocabulary,
            config,
            seed,
            fitted: None,
            trained_row_count: 0,
            warned_metrics: std::collections::BTreeSet::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn trained_row_count(&self) -> usize {
        self.trained_row_count
    }

    pub fn metric_vocabulary(&self) -> &[String] {
        &self.metric_vocabulary
    }

    fn feature_width(&self) -> usize {
        self.metric_vocabulary.len() + self.worker_vocabulary.len()
    }

    fn features(&mut self, metrics: &BTreeMap<String, f64>, worker_id: usize) -> Vec<T> {
        let mut x = Vec::with_capacity(self.feature_width());
        for name in &self.metric_vocabulary {
            x.push(c::<T>(metrics.get(name).copied().unwrap_or(0.0)));
        }
        for name in metrics.keys() {
            if !self.metric_vocabulary.iter().any(|v| v == name)
                && self.warned_metrics.insert(name.clone())
            {
                warn!("metric '{name}' appeared after the vocabulary was frozen; ignoring");
            }
        }
        // unseen workers encode as an all-zero block
        for &w in &self.worker_vocabulary {
            x.push(if w == worker_id { T::one() } else { T::zero() });
        }
        x
    }

    /// Full refit from the given rows. Percent-error targets are computed
    /// against each row's own configuration mean. Stays cold (clearing any
    /// previous fit) while the activation minimum is unmet.
    pub fn train(&mut self, rows: &[TrainingRow]) -> Result<()> {
        let mut groups: BTreeMap<u64, Vec<&TrainingRow>> = BTreeMap::new();
        for row in rows {
            groups.entry(row.config_id).or_default().push(row);
        }
        // a per-config mean needs multiple observations to be meaningful
        groups.retain(|_, g| g.len() >= 2);

        let row_count: usize = groups.values().map(|g| g.len()).sum();
        if groups.len() < self.config.activation_min_configs
            || row_count < self.config.activation_min_rows
        {
            self.fitted = None;
            self.trained_row_count = 0;
            return Ok(());
        }

        let mut x: Vec<Vec<T>> = Vec::with_capacity(row_count);
        let mut y: Vec<T> = Vec::with_capacity(row_count);
        for group in groups.values() {
            let mean: f64 =
                group.iter().map(|r| r.performance).sum::<f64>() / group.len() as f64;
            if mean == 0.0 {
                return Err(Error::Degenerate(
                    "config mean performance is zero in training data".into(),
                ));
            }
            for row in group {
                x.push(self.features(&row.metrics, row.worker_id));
                y.push(c::<T>(row.performance / mean - 1.0));
            }
        }

        let standardizer = Standardizer::fit(&x)?;
        let x_std: Vec<Vec<T>> = x.iter().map(|r| standardizer.transform(r)).collect();
        let forest = ForestModel::fit(&x_std, &y, &self.config.forest, self.seed)?;
        self.fitted = Some(Fitted {
            standardizer,
            forest,
        });
        self.trained_row_count = row_count;
        Ok(())
    }

    /// Predicted relative error for a sample, if the model is active.
    pub fn predict_error(
        &mut self,
        metrics: &BTreeMap<String, f64>,
        worker_id: usize,
    ) -> Result<Option<T>> {
        let x = self.features(metrics, worker_id);
        let Some(fitted) = &self.fitted else {
            return Ok(None);
        };
        let z = fitted.standardizer.transform(&x);
        let mut s = fitted.forest.predict(&z)?;
        if let Some((lo, hi)) = self.config.guardrail {
            s = s.max(c::<T>(lo)).min(c::<T>(hi));
        }
        Ok(Some(s))
    }

    /// De-noise one sample: unstable configurations and the cold state pass
    /// through unchanged, otherwise p / (s + 1).
    pub fn adjust(
        &mut self,
        metrics: &BTreeMap<String, f64>,
        worker_id: usize,
        performance: T,
        is_unstable: bool,
    ) -> Result<T> {
        if !performance.is_finite() {
            return Err(Error::Validation("non-finite performance".into()));
        }
        if is_unstable {
            return Ok(performance);
        }
        match self.predict_error(metrics, worker_id)? {
            None => Ok(performance),
            Some(s) => {
                if s <= c::<T>(-1.0) {
                    return Err(Error::AdjustmentOverflow {
                        predicted: s.to_f64().unwrap_or(f64::NEG_INFINITY),
                    });
                }
                Ok(performance / (s + T::one()))
            }
        }
    }
}
