//! Linear pairwise ranking model trained by SGD on an elastic-net regularized
//! hinge loss.
//!
//! The objective over `m` instances is
//! `sum_i max(1 - y_i <w, x_i>, 0) + l1 * |w|_1 + l2 * |w|_2^2`.
//! SGD visits one instance per step and charges `1/m` of the regularizer on
//! each step, so a full pass descends the objective above.
//!
//! Regularization is applied lazily: a sparse coordinate only pays its
//! accumulated L2 decay and L1 penalty when an instance next touches it (or
//! when training finishes). L1 uses the cumulative-penalty scheme, which clips
//! at zero and therefore yields exact zeros.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Layout, Modality, MultimodalVector, SparseVector};
use crate::error::{Error, Result};
use crate::pairgen::{DiffVector, PairwiseInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial step size.
    pub learning_rate: f64,
    /// Step size at step `t` is `learning_rate / (1 + lr_decay * t)`.
    pub lr_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            lr_decay: 1e-4,
            lambda1: 0.0,
            lambda2: 1e-6,
            epochs: 5,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.lr_decay, self.lambda1, self.lambda2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite training parameter".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.lr_decay < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig(
                "lr_decay, lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, step: u64) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * step as f64)
    }
}

/// Weight vector laid out like the modality's feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub sparse: SparseVector,
    pub dense: Vec<f64>,
}

impl LinearWeights {
    pub fn zeros(layout: Layout) -> Self {
        LinearWeights {
            sparse: SparseVector::empty(layout.sparse_dim),
            dense: vec![0.0; layout.dense_dim],
        }
    }

    /// From a flat `[sparse.., dense..]` array.
    pub fn from_flat(layout: Layout, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), layout.logical_dim());
        let entries = flat[..layout.sparse_dim]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        LinearWeights {
            sparse: SparseVector::from_sorted_unchecked(layout.sparse_dim, entries),
            dense: flat[layout.sparse_dim..].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = vec![0.0; self.sparse.dim()];
        for &(i, v) in self.sparse.entries() {
            flat[i] = v;
        }
        flat.extend_from_slice(&self.dense);
        flat
    }

    pub fn layout(&self) -> Layout {
        Layout {
            sparse_dim: self.sparse.dim(),
            dense_dim: self.dense.len(),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.sparse.l1_norm() + self.dense.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn squared_norm(&self) -> f64 {
        self.sparse.squared_norm() + self.dense.iter().map(|v| v * v).sum::<f64>()
    }

    fn sparse_dot(&self, x: &SparseVector) -> f64 {
        if x.nnz() < self.sparse.nnz() {
            x.entries().iter().map(|&(i, v)| v * self.sparse.get(i)).sum()
        } else {
            self.sparse.dot(x)
        }
    }

    fn dense_dot(&self, x: &[f64]) -> f64 {
        self.dense.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    fn check(&self, layout: Layout) -> Result<()> {
        if self.layout() != layout {
            return Err(Error::LayoutMismatch(format!(
                "weights {:?} vs features {:?}",
                self.layout(),
                layout
            )));
        }
        Ok(())
    }

    pub fn dot_diff(&self, x: &DiffVector) -> Result<f64> {
        self.check(x.layout())?;
        Ok(self.sparse_dot(&x.sparse) + self.dense_dot(&x.dense))
    }

    pub fn dot_doc(&self, d: &MultimodalVector) -> Result<f64> {
        self.check(d.layout())?;
        Ok(self.sparse_dot(&d.text) + self.dense_dot(d.dense()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_objective: f64,
    pub instance_count: usize,
}

/// A trained per-query ranking function.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryModel {
    pub query: String,
    pub modality: Modality,
    pub weights: LinearWeights,
    pub train_config: TrainConfig,
    pub train_stats: TrainStats,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    query: String,
    modality: Modality,
    config: TrainConfig,
    train_stats: TrainStats,
    sparse_dim: usize,
    sparse: Vec<(usize, f64)>,
    dense: Vec<f64>,
}

impl QueryModel {
    pub fn layout(&self) -> Layout {
        self.weights.layout()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            query: self.query.clone(),
            modality: self.modality,
            config: self.train_config.clone(),
            train_stats: self.train_stats.clone(),
            sparse_dim: self.weights.sparse.dim(),
            sparse: self.weights.sparse.entries().to_vec(),
            dense: self.weights.dense.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let sparse = SparseVector::from_entries(file.sparse_dim, file.sparse)?;
        let weights = LinearWeights {
            sparse,
            dense: file.dense,
        };
        if !weights.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("model contains non-finite weights".into()));
        }
        Ok(QueryModel {
            query: file.query,
            modality: file.modality,
            weights,
            train_config: file.config,
            train_stats: file.train_stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn objective(&self, instances: &[PairwiseInstance]) -> Result<f64> {
        objective(
            &self.weights,
            instances,
            self.train_config.lambda1,
            self.train_config.lambda2,
        )
    }
}

/// Regularized hinge objective. Squared L2 term.
pub fn objective(
    weights: &LinearWeights,
    instances: &[PairwiseInstance],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let mut hinge = 0.0;
    for inst in instances {
        let margin = inst.y.sign() * weights.dot_diff(&inst.x)?;
        hinge += (1.0 - margin).max(0.0);
    }
    Ok(hinge + lambda1 * weights.l1_norm() + lambda2 * weights.squared_norm())
}

/// Subgradient of [`objective`] as a flat `[sparse.., dense..]` vector.
/// Uses `sign(0) = 0` for the L1 term and treats margin exactly 1 as satisfied.
pub fn objective_gradient(
    weights: &LinearWeights,
    instances: &[PairwiseInstance],
    lambda1: f64,
    lambda2: f64,
) -> Result<Vec<f64>> {
    let layout = weights.layout();
    let w = weights.to_flat();
    let mut grad: Vec<f64> = w
        .iter()
        .map(|&v| {
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            lambda1 * sign + 2.0 * lambda2 * v
        })
        .collect();
    for inst in instances {
        let y = inst.y.sign();
        if y * weights.dot_diff(&inst.x)? < 1.0 {
            for &(i, v) in inst.x.sparse.entries() {
                grad[i] -= y * v;
            }
            for (k, v) in inst.x.dense.iter().enumerate() {
                grad[layout.sparse_dim + k] -= y * v;
            }
        }
    }
    Ok(grad)
}

/// Per-coordinate state for lazily applied regularization.
struct LazyRegularizer {
    /// Cumulative `ln(1 - 2 * eta * l2)` since the last zeroing event.
    log_decay: f64,
    /// Number of steps whose decay factor was `<= 0` (wiping all weights).
    zero_events: u64,
    /// Cumulative L1 penalty available to every coordinate.
    l1_budget: f64,
    last_log_decay: Vec<f64>,
    last_zero_events: Vec<u64>,
    l1_applied: Vec<f64>,
}

impl LazyRegularizer {
    fn new(dim: usize) -> Self {
        LazyRegularizer {
            log_decay: 0.0,
            zero_events: 0,
            l1_budget: 0.0,
            last_log_decay: vec![0.0; dim],
            last_zero_events: vec![0; dim],
            l1_applied: vec![0.0; dim],
        }
    }

    fn catch_up(&mut self, w: &mut [f64], j: usize) {
        if self.last_zero_events[j] != self.zero_events {
            w[j] = 0.0;
            self.last_zero_events[j] = self.zero_events;
        } else if self.last_log_decay[j] != self.log_decay {
            w[j] *= (self.log_decay - self.last_log_decay[j]).exp();
        }
        self.last_log_decay[j] = self.log_decay;

        let z = w[j];
        if z > 0.0 {
            w[j] = (z - (self.l1_budget + self.l1_applied[j])).max(0.0);
        } else if z < 0.0 {
            w[j] = (z + (self.l1_budget - self.l1_applied[j])).min(0.0);
        }
        self.l1_applied[j] += w[j] - z;
    }

    fn accrue(&mut self, eta: f64, l1: f64, l2: f64) {
        let factor = 1.0 - 2.0 * eta * l2;
        if factor > 0.0 {
            self.log_decay += factor.ln();
        } else {
            self.zero_events += 1;
            self.log_decay = 0.0;
        }
        self.l1_budget += eta * l1;
    }
}

fn common_layout(instances: &[PairwiseInstance]) -> Result<Layout> {
    let first = instances.first().ok_or(Error::EmptyInstances)?.x.layout();
    if let Some(bad) = instances.iter().find(|i| i.x.layout() != first) {
        return Err(Error::LayoutMismatch(format!(
            "instance layouts differ: {:?} vs {:?}",
            first,
            bad.x.layout()
        )));
    }
    Ok(first)
}

/// Trains a query model from `w = 0` by SGD over the instances.
pub fn train_sgd(
    instances: &[PairwiseInstance],
    modality: Modality,
    config: &TrainConfig,
) -> Result<QueryModel> {
    config.validate()?;
    let layout = common_layout(instances)?;
    let m = instances.len() as f64;
    let (l1, l2) = (config.lambda1 / m, config.lambda2 / m);
    let dim = layout.logical_dim();
    let offset = layout.sparse_dim;

    let mut w = vec![0.0; dim];
    let mut reg = LazyRegularizer::new(dim);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step: u64 = 0;

    for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for &idx in &order {
            let inst = &instances[idx];
            let eta = config.step_size(step);
            let y = inst.y.sign();

            let mut dot = 0.0;
            for &(j, v) in inst.x.sparse.entries() {
                reg.catch_up(&mut w, j);
                dot += w[j] * v;
            }
            for (k, v) in inst.x.dense.iter().enumerate() {
                reg.catch_up(&mut w, offset + k);
                dot += w[offset + k] * v;
            }

            if y * dot < 1.0 {
                let scale = eta * y;
                for &(j, v) in inst.x.sparse.entries() {
                    w[j] += scale * v;
                    if !w[j].is_finite() {
                        return Err(Error::Divergence { step });
                    }
                }
                for (k, v) in inst.x.dense.iter().enumerate() {
                    w[offset + k] += scale * v;
                    if !w[offset + k].is_finite() {
                        return Err(Error::Divergence { step });
                    }
                }
            }
            reg.accrue(eta, l1, l2);
            step += 1;
        }
    }
    for j in 0..dim {
        reg.catch_up(&mut w, j);
    }
    if let Some(bad) = w.iter().position(|v| !v.is_finite()) {
        log::error!("coordinate {bad} diverged");
        return Err(Error::Divergence { step });
    }

    let weights = LinearWeights::from_flat(layout, &w);
    let final_objective = objective(&weights, instances, config.lambda1, config.lambda2)?;
    Ok(QueryModel {
        query: instances[0].query.clone(),
        modality,
        weights,
        train_config: config.clone(),
        train_stats: TrainStats {
            epochs_run: config.epochs,
            steps: step,
            final_objective,
            instance_count: instances.len(),
        },
    })
}

/// `f(d) = <w, d>`.
pub fn score(model: &QueryModel, d: &MultimodalVector) -> Result<f64> {
    if d.modality != model.modality {
        return Err(Error::LayoutMismatch(format!(
            "{} model cannot score a {} vector",
            model.modality, d.modality
        )));
    }
    model.weights.dot_doc(d)
}

/// Sorts by score descending, breaking ties by ascending listing id.
pub fn rank<S: AsRef<str>>(
    model: &QueryModel,
    docs: &[(S, MultimodalVector)],
) -> Result<Vec<(String, f64)>> {
    let mut scored = docs
        .iter()
        .map(|(id, d)| Ok((id.as_ref().to_string(), score(model, d)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_ranking(&mut scored);
    Ok(scored)
}

pub(crate) fn sort_ranking(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Fraction of instances with `y <w, x> <= 0`; ties count as errors.
pub fn pairwise_error(weights: &LinearWeights, instances: &[PairwiseInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyInstances);
    }
    let mut wrong = 0usize;
    for inst in instances {
        if inst.y.sign() * weights.dot_diff(&inst.x)? <= 0.0 {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / instances.len() as f64)
}
