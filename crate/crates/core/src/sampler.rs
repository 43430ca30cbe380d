//! N-way K-shot episode construction.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{CptError, Result};
use crate::graph::{ClassId, Graph, NodeId};

/// Episode shape: `n_way` classes, `k_shot` support and `r_query` query
/// nodes per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, k_shot: usize, r_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            r_query,
        }
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.r_query
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.r_query == 0 {
            return Err(CptError::Config(format!(
                "episode shape needs n_way >= 2 and k_shot, r_query >= 1; got {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.r_query
            )));
        }
        Ok(())
    }
}

/// One episode. Local label `j` refers to `class_list[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTask {
    pub class_list: Vec<ClassId>,
    pub support: Vec<(NodeId, usize)>,
    pub query: Vec<(NodeId, usize)>,
}

impl EpisodeTask {
    pub fn n_way(&self) -> usize {
        self.class_list.len()
    }

    pub fn support_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.support.iter().map(|&(n, _)| n)
    }

    pub fn query_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.query.iter().map(|&(n, _)| n)
    }
}

/// Samples episodes from a fixed graph, caching the per-class node lists.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    by_class: BTreeMap<ClassId, Vec<NodeId>>,
}

impl TaskSampler {
    pub fn new(graph: &Graph) -> Self {
        Self {
            by_class: graph.nodes_by_class(),
        }
    }

    /// Checks up front that every class in `pool` can fill an episode.
    pub fn check_pool(&self, pool: &[ClassId], shape: EpisodeShape) -> Result<()> {
        shape.validate()?;
        let pool = dedup(pool);
        if pool.len() < shape.n_way {
            return Err(CptError::Config(format!(
                "class pool of size {} cannot supply {}-way tasks",
                pool.len(),
                shape.n_way
            )));
        }
        for &c in &pool {
            self.class_nodes(c, shape)?;
        }
        Ok(())
    }

    fn class_nodes(&self, class: ClassId, shape: EpisodeShape) -> Result<&[NodeId]> {
        let need = shape.k_shot + shape.r_query;
        let nodes = self.by_class.get(&class).map_or(&[][..], Vec::as_slice);
        if nodes.len() < need {
            return Err(CptError::Data(format!(
                "class {class} has {} labeled nodes, episode needs {need}",
                nodes.len()
            )));
        }
        Ok(nodes)
    }

    pub fn sample(
        &self,
        pool: &[ClassId],
        shape: EpisodeShape,
        rng: &mut impl rand::Rng,
    ) -> Result<EpisodeTask> {
        shape.validate()?;
        let pool = dedup(pool);
        if pool.len() < shape.n_way {
            return Err(CptError::Config(format!(
                "class pool of size {} cannot supply {}-way tasks",
                pool.len(),
                shape.n_way
            )));
        }
        let class_list: Vec<ClassId> = index::sample(rng, pool.len(), shape.n_way)
            .into_iter()
            .map(|i| pool[i])
            .collect();

        let mut support = Vec::with_capacity(shape.support_len());
        let mut query = Vec::with_capacity(shape.query_len());
        for (local, &class) in class_list.iter().enumerate() {
            let nodes = self.class_nodes(class, shape)?;
            let picks = index::sample(rng, nodes.len(), shape.k_shot + shape.r_query);
            for (i, pick) in picks.into_iter().enumerate() {
                let entry = (nodes[pick], local);
                if i < shape.k_shot {
                    support.push(entry);
                } else {
                    query.push(entry);
                }
            }
        }
        Ok(EpisodeTask {
            class_list,
            support,
            query,
        })
    }
}

fn dedup(pool: &[ClassId]) -> Vec<ClassId> {
    let mut v = pool.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// One-off sampling; prefer [`TaskSampler`] in loops.
pub fn sample_task(
    graph: &Graph,
    pool: &[ClassId],
    shape: EpisodeShape,
    rng: &mut impl rand::Rng,
) -> Result<EpisodeTask> {
    TaskSampler::new(graph).sample(pool, shape, rng)
}
