//! Deterministic regression-forest ensemble with input standardization.
//!
//! Axis-aligned splits chosen by variance reduction, candidate thresholds at
//! midpoints between consecutive distinct sorted feature values. Per-tree RNG
//! streams are derived from (seed, tree index), so fitting is reproducible
//! bit-for-bit regardless of thread scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scalar::{c, Scalar};

/// Per-feature affine normalization. Zero-variance features map to 0.
#[derive(Debug, Clone)]
pub struct Standardizer<T> {
    means: Vec<T>,
    stddevs: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Domain("cannot standardize zero rows".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Validation("ragged feature matrix".into()));
        }
        let n = c::<T>(rows.len() as f64);
        let mut means = vec![T::zero(); width];
        for row in rows {
            for (m, &v) in means.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        for m in &mut means {
            *m = *m / n;
        }
        let mut vars = vec![T::zero(); width];
        for row in rows {
            for j in 0..width {
                let d = row[j] - means[j];
                vars[j] = vars[j] + d * d;
            }
        }
        let stddevs = vars.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Self { means, stddevs })
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, row: &[T]) -> Vec<T> {
        row.iter()
            .zip(self.means.iter().zip(&self.stddevs))
            .map(|(&v, (&m, &s))| {
                if s > T::zero() {
                    (v - m) / s
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    pub fn inverse_transform(&self, row: &[T]) -> Vec<T> {
        row.iter()
            .zip(self.means.iter().zip(&self.stddevs))
            .map(|(&z, (&m, &s))| if s > T::zero() { z * s + m } else { m })
            .collect()
    }
}

/// How many features to consider per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRule {
    All,
    /// ceil(sqrt(d))
    SqrtCeil,
    Fixed(usize),
}

impl FeatureRule {
    fn count(&self, width: usize) -> usize {
        match self {
            FeatureRule::All => width,
            FeatureRule::SqrtCeil => (width as f64).sqrt().ceil() as usize,
            FeatureRule::Fixed(k) => (*k).clamp(1, width),
        }
        .max(1)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForestHyperParams {
    pub tree_count: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub feature_subsample: FeatureRule,
}

impl Default for ForestHyperParams {
    fn default() -> Self {
        Self {
            tree_count: 100,
            min_leaf: 3,
            bootstrap: true,
            feature_subsample: FeatureRule::SqrtCeil,
        }
    }
}

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf(T),
    Split {
        feature: u32,
        threshold: T,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone)]
struct Tree<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    fn predict(&self, x: &[T]) -> T {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestModel<T> {
    trees: Vec<Tree<T>>,
    width: usize,
    hyperparams: ForestHyperParams,
    seed: u64,
}

impl<T: Scalar> ForestModel<T> {
    /// Fit an ensemble. Refitting with the same inputs and seed yields
    /// identical predictions.
    pub fn fit(
        x: &[Vec<T>],
        y: &[T],
        hyperparams: &ForestHyperParams,
        seed: u64,
    ) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::Domain("empty training data".into()));
        }
        if x.len() != y.len() {
            return Err(Error::Validation(format!(
                "row count {} does not match target count {}",
                x.len(),
                y.len()
            )));
        }
        let width = x[0].len();
        if width == 0 {
            return Err(Error::Validation("zero-width feature rows".into()));
        }
        if x.iter().any(|r| r.len() != width) {
            return Err(Error::Validation("ragged feature matrix".into()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite training values".into()));
        }
        if hyperparams.tree_count == 0 || hyperparams.min_leaf == 0 {
            return Err(Error::Validation(
                "tree_count and min_leaf must be >= 1".into(),
            ));
        }

        let flat: Vec<T> = x.iter().flatten().copied().collect();
        let n = y.len();
        let trees: Vec<Tree<T>> = (0..hyperparams.tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = derive_rng(seed, "forest.tree", &[t as u64]);
                let indices: Vec<u32> = if hyperparams.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
                } else {
                    (0..n as u32).collect()
                };
                fit_single_tree(&flat, y, width, indices, hyperparams, &mut rng)
            })
            .collect();

        Ok(Self {
            trees,
            width,
            hyperparams: *hyperparams,
            seed,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hyperparams(&self) -> &ForestHyperParams {
        &self.hyperparams
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_width(&self, x: &[T]) -> Result<()> {
        if x.len() != self.width {
            return Err(Error::Validation(format!(
                "input width {} does not match training width {}",
                x.len(),
                self.width
            )));
        }
        Ok(())
    }

    /// Ensemble prediction: mean of per-tree leaf means. Summation runs over
    /// sorted per-tree values so the result is invariant to tree order.
    pub fn predict(&self, x: &[T]) -> Result<T> {
        Ok(self.predict_with_uncertainty(x)?.0)
    }

    /// Prediction plus the population standard deviation of per-tree values.
    pub fn predict_with_uncertainty(&self, x: &[T]) -> Result<(T, T)> {
        self.check_width(x)?;
        let mut preds: Vec<T> = self.trees.iter().map(|t| t.predict(x)).collect();
        preds.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
        let k = c::<T>(preds.len() as f64);
        let sum: T = preds.iter().copied().sum();
        let mean = sum / k;
        let ss: T = preds.iter().map(|&p| (p - mean) * (p - mean)).sum();
        Ok((mean, (ss / k).sqrt()))
    }

    pub fn predict_batch(&self, xs: &[Vec<T>]) -> Result<Vec<(T, T)>> {
        xs.par_iter()
            .map(|x| self.predict_with_uncertainty(x))
            .collect()
    }
}

struct NodeWork {
    slot: usize,
    start: usize,
    end: usize,
}

fn fit_single_tree<T: Scalar>(
    flat: &[T],
    y: &[T],
    width: usize,
    mut indices: Vec<u32>,
    params: &ForestHyperParams,
    rng: &mut impl Rng,
) -> Tree<T> {
    let mut nodes: Vec<Node<T>> = vec![Node::Leaf(T::zero())];
    let mut work = vec![NodeWork {
        slot: 0,
        start: 0,
        end: indices.len(),
    }];
    let k_features = params.feature_subsample.count(width);
    let mut feat_ids: Vec<u32> = (0..width as u32).collect();
    let mut pairs: Vec<(T, T)> = Vec::with_capacity(indices.len());
    let mut scratch: Vec<u32> = Vec::with_capacity(indices.len());

    while let Some(NodeWork { slot, start, end }) = work.pop() {
        let m = end - start;
        let mut sum = T::zero();
        let mut sumsq = T::zero();
        for &i in &indices[start..end] {
            let v = y[i as usize];
            sum = sum + v;
            sumsq = sumsq + v * v;
        }
        let mean = sum / c::<T>(m as f64);
        let node_sse = sumsq - sum * sum / c::<T>(m as f64);

        if m < 2 * params.min_leaf || node_sse <= T::epsilon() * sumsq.abs() {
            nodes[slot] = Node::Leaf(mean);
            continue;
        }

        // scan a random permutation of features, stopping once k of them
        // offered at least one usable split; features without a valid
        // candidate (constant here, or min_leaf-infeasible) don't count
        for j in (1..width).rev() {
            let pick = rng.gen_range(0..=j);
            feat_ids.swap(j, pick);
        }

        let parent_score = sum * sum / c::<T>(m as f64);
        let mut best_gain = T::zero();
        let mut best: Option<(u32, T)> = None;
        let mut examined = 0usize;
        for &f in feat_ids.iter() {
            if examined >= k_features {
                break;
            }
            pairs.clear();
            pairs.extend(
                indices[start..end]
                    .iter()
                    .map(|&i| (flat[i as usize * width + f as usize], y[i as usize])),
            );
            pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));

            let mut left_sum = T::zero();
            let mut usable = false;
            for p in 1..m {
                left_sum = left_sum + pairs[p - 1].1;
                if pairs[p - 1].0 >= pairs[p].0 {
                    continue; // only split between distinct values
                }
                if p < params.min_leaf || m - p < params.min_leaf {
                    continue;
                }
                usable = true;
                let right_sum = sum - left_sum;
                let pl = c::<T>(p as f64);
                let pr = c::<T>((m - p) as f64);
                // maximizing this is equivalent to maximizing SSE reduction
                let score = left_sum * left_sum / pl + right_sum * right_sum / pr;
                let gain = score - parent_score;
                if gain > best_gain {
                    best_gain = gain;
                    let mut thr = (pairs[p - 1].0 + pairs[p].0) / c::<T>(2.0);
                    // adjacent floats can round the midpoint up to the right
                    // value, which would empty the right child
                    if thr >= pairs[p].0 {
                        thr = pairs[p - 1].0;
                    }
                    best = Some((f, thr));
                }
            }
            if usable {
                examined += 1;
            }
        }

        let Some((feature, threshold)) = best else {
            nodes[slot] = Node::Leaf(mean);
            continue;
        };

        // stable partition of the index segment by the chosen split
        scratch.clear();
        let mut write = start;
        for read in start..end {
            let i = indices[read];
            if flat[i as usize * width + feature as usize] <= threshold {
                indices[write] = i;
                write += 1;
            } else {
                scratch.push(i);
            }
        }
        let split_at = write;
        indices[split_at..end].copy_from_slice(&scratch);
        debug_assert!(split_at > start && split_at < end);

        let left = nodes.len() as u32;
        nodes.push(Node::Leaf(T::zero()));
        let right = nodes.len() as u32;
        nodes.push(Node::Leaf(T::zero()));
        nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        work.push(NodeWork {
            slot: right as usize,
            start: split_at,
            end,
        });
        work.push(NodeWork {
            slot: left as usize,
            start,
            end: split_at,
        });
    }

    Tree { nodes }
}
