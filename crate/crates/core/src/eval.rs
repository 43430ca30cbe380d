//! Meta-test evaluation on the original graph.

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{encode_propagated, EncoderParams, Propagation};
use crate::error::{CptError, Result};
use crate::graph::{normalize_adjacency, ClassId, Graph, NodeId};
use crate::meta::{evaluate_episode, proto_episode_loss, LearnerKind, MetaConfig};
use crate::rng::{self, SeedTree};
use crate::sampler::{EpisodeShape, EpisodeTask, TaskSampler};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Population standard deviation of the per-task accuracies.
    pub std_dev: f64,
    pub per_task: Vec<f64>,
    pub num_tasks: usize,
    pub shape: EpisodeShape,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_accuracies(per_task: Vec<f64>, shape: EpisodeShape, seed: u64) -> Self {
        let (mean_accuracy, std_dev) = mean_std(&per_task);
        Self {
            mean_accuracy,
            std_dev,
            num_tasks: per_task.len(),
            per_task,
            shape,
            seed,
        }
    }
}

/// Arithmetic mean and population standard deviation; `(0, 0)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Meta-test episodes for `seed`. The same seed yields the same tasks for
/// every model, so compared models face identical test tasks.
pub fn test_tasks(
    graph: &Graph,
    pool: &[ClassId],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
) -> Result<Vec<EpisodeTask>> {
    let sampler = TaskSampler::new(graph);
    sampler.check_pool(pool, shape)?;
    let mut rng = SeedTree::new(seed).stream(rng::EVAL, 0);
    (0..num_tasks)
        .map(|_| sampler.sample(pool, shape, &mut rng))
        .collect()
}

/// Query predictions `(node, predicted, true)` for every task, in order.
fn predict(
    params: &EncoderParams,
    graph: &Graph,
    tasks: &[EpisodeTask],
    meta: &MetaConfig,
) -> Result<Vec<Vec<(NodeId, usize, usize)>>> {
    let prop = Propagation::new(normalize_adjacency(graph), graph.features())?;
    match meta.learner {
        LearnerKind::Prototypical => {
            // frozen weights: one forward pass serves every episode
            let (emb, _) = encode_propagated(&prop, params)?;
            tasks
                .par_iter()
                .map(|t| proto_episode_loss(emb.view(), t).map(|h| h.predictions))
                .collect()
        }
        LearnerKind::Fomaml => tasks
            .par_iter()
            .map(|t| evaluate_episode(&prop, params, t, meta).map(|(_, _, p)| p))
            .collect(),
    }
}

/// Average accuracy over `num_tasks` episodes drawn from `pool`.
pub fn meta_test(
    params: &EncoderParams,
    graph: &Graph,
    pool: &[ClassId],
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
    meta: &MetaConfig,
) -> Result<EvalReport> {
    let tasks = test_tasks(graph, pool, shape, num_tasks, seed)?;
    let predictions = predict(params, graph, &tasks, meta)?;
    let per_task = predictions
        .iter()
        .map(|p| p.iter().filter(|(_, a, b)| a == b).count() as f64 / p.len() as f64)
        .collect();
    Ok(EvalReport::from_accuracies(per_task, shape, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeBin {
    /// Inclusive lower degree bound.
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open last bin.
    pub hi: Option<usize>,
    pub correct: usize,
    pub total: usize,
}

impl DegreeBin {
    /// `None` when no query node fell in this bin.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) if hi == self.lo + 1 => format!("{}", self.lo),
            Some(hi) => format!("{}-{}", self.lo, hi - 1),
            None => format!("{}+", self.lo),
        }
    }
}

pub const DEFAULT_DEGREE_BINS: [usize; 5] = [0, 2, 4, 8, 16];

/// Accuracy of meta-test query predictions grouped by the clean-graph
/// degree of the query node. `bins` are the increasing lower bounds,
/// starting at 0; the last bin is open-ended.
pub fn degree_binned_accuracy(
    params: &EncoderParams,
    graph: &Graph,
    pool: &[ClassId],
    shape: EpisodeShape,
    num_tasks: usize,
    bins: &[usize],
    seed: u64,
    meta: &MetaConfig,
) -> Result<Vec<DegreeBin>> {
    if bins.first() != Some(&0) || bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CptError::Config(format!(
            "degree bins must be strictly increasing and start at 0, got {bins:?}"
        )));
    }
    let mut table: Vec<DegreeBin> = bins
        .iter()
        .enumerate()
        .map(|(i, &lo)| DegreeBin {
            lo,
            hi: bins.get(i + 1).copied(),
            correct: 0,
            total: 0,
        })
        .collect();
    let tasks = test_tasks(graph, pool, shape, num_tasks, seed)?;
    for task_predictions in predict(params, graph, &tasks, meta)? {
        for (node, predicted, truth) in task_predictions {
            let degree = graph.degree(node)?;
            let idx = bins.partition_point(|&lo| lo <= degree) - 1;
            table[idx].total += 1;
            if predicted == truth {
                table[idx].correct += 1;
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        assert_eq!(mean_std(&[0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!((m, s), (0.5, 0.5));
    }

    #[test]
    fn bin_labels() {
        let b = |lo, hi| DegreeBin { lo, hi, correct: 0, total: 0 };
        assert_eq!(b(0, Some(2)).label(), "0-1");
        assert_eq!(b(3, Some(4)).label(), "3");
        assert_eq!(b(16, None).label(), "16+");
        assert_eq!(b(16, None).accuracy(), None);
    }
}
