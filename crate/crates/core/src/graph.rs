//! Attributed undirected graphs, the symmetric-normalized propagation
//! operator, and edge dropping.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array2, ArrayView2};

use crate::error::{CptError, Result};

pub type NodeId = usize;
pub type ClassId = usize;

/// Immutable attributed graph.
///
/// Edges are undirected and stored once, smaller endpoint first. Self-loops
/// never appear here; they are added inside [`NormalizedAdjacency`].
/// Unlabeled nodes carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(NodeId, NodeId)>,
    features: Array2<f64>,
    labels: Vec<Option<ClassId>>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Builds a graph, rejecting anything that violates the invariants.
    pub fn new(
        edges: Vec<(NodeId, NodeId)>,
        features: Array2<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Result<Self> {
        let num_nodes = features.nrows();
        if labels.len() != num_nodes {
            return Err(CptError::Consistency(format!(
                "{} feature rows but {} labels",
                num_nodes,
                labels.len()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= b {
                return Err(CptError::Input(format!(
                    "edge ({a}, {b}) is not canonical or is a self-loop"
                )));
            }
            if b >= num_nodes {
                return Err(CptError::Input(format!(
                    "edge ({a}, {b}) references a node >= {num_nodes}"
                )));
            }
            if !seen.insert((a, b)) {
                return Err(CptError::Input(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self::from_valid_parts(num_nodes, edges, features, labels))
    }

    /// Canonicalizes arbitrary pairs, silently dropping self-loops and
    /// duplicates. Returns the graph and the number of discarded pairs.
    pub fn from_raw_pairs(
        pairs: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: Array2<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Result<(Self, usize)> {
        let mut seen = HashSet::new();
        let mut edges = Vec::new();
        let mut discarded = 0;
        for (a, b) in pairs {
            if a == b {
                discarded += 1;
                continue;
            }
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                edges.push(e);
            } else {
                discarded += 1;
            }
        }
        Ok((Self::new(edges, features, labels)?, discarded))
    }

    fn from_valid_parts(
        num_nodes: usize,
        edges: Vec<(NodeId, NodeId)>,
        features: Array2<f64>,
        labels: Vec<Option<ClassId>>,
    ) -> Self {
        let mut degrees = vec![0; num_nodes];
        for &(a, b) in &edges {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        Self {
            num_nodes,
            edges,
            features,
            labels,
            degrees,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[Option<ClassId>] {
        &self.labels
    }

    /// Number of edges incident to `node`.
    pub fn degree(&self, node: NodeId) -> Result<usize> {
        self.degrees.get(node).copied().ok_or_else(|| {
            CptError::Input(format!(
                "node {node} out of range for a graph with {} nodes",
                self.num_nodes
            ))
        })
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes == 0 {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / self.num_nodes as f64
    }

    /// Distinct class ids present among labeled nodes, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        self.labels
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Labeled nodes grouped by class, each list in ascending node order.
    pub fn nodes_by_class(&self) -> BTreeMap<ClassId, Vec<NodeId>> {
        let mut map: BTreeMap<ClassId, Vec<NodeId>> = BTreeMap::new();
        for (node, label) in self.labels.iter().enumerate() {
            if let Some(c) = label {
                map.entry(*c).or_default().push(node);
            }
        }
        map
    }

    /// Same nodes, features and labels with a different (valid) edge list.
    fn with_edges(&self, edges: Vec<(NodeId, NodeId)>) -> Self {
        Self::from_valid_parts(
            self.num_nodes,
            edges,
            self.features.clone(),
            self.labels.clone(),
        )
    }
}

/// Removes exactly `round(beta * |E|)` undirected edges chosen uniformly
/// without replacement. Surviving edges keep their original order.
pub fn drop_edges(graph: &Graph, beta: f64, rng: &mut impl rand::Rng) -> Result<Graph> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CptError::Input(format!(
            "drop ratio {beta} outside [0, 1]"
        )));
    }
    let total = graph.num_edges();
    let remove = drop_count(total, beta);
    if remove == 0 {
        return Ok(graph.clone());
    }
    let mut dropped = vec![false; total];
    for i in rand::seq::index::sample(rng, total, remove) {
        dropped[i] = true;
    }
    let kept = graph
        .edges
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(&e, _)| e)
        .collect();
    Ok(graph.with_edges(kept))
}

/// Number of edges [`drop_edges`] removes from a graph with `total` edges.
pub fn drop_count(total: usize, beta: f64) -> usize {
    ((beta * total as f64).round() as usize).min(total)
}

/// Symmetric-normalized adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`,
/// stored in compressed sparse row form with column indices sorted per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    indptr: Vec<usize>,
    indices: Vec<NodeId>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let mut rows: Vec<Vec<NodeId>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in graph.edges() {
            rows[a].push(b);
            rows[b].push(a);
        }
        let deg = graph.degrees();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n + 2 * graph.num_edges());
        let mut values = Vec::with_capacity(n + 2 * graph.num_edges());
        indptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            for j in row {
                indices.push(j);
                values.push(if i == j {
                    1.0 / (deg[i] + 1) as f64
                } else {
                    1.0 / (((deg[i] + 1) * (deg[j] + 1)) as f64).sqrt()
                });
            }
            indptr.push(indices.len());
        }
        Self {
            indptr,
            indices,
            values,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entry at `(i, j)`, zero when absent.
    pub fn get(&self, i: NodeId, j: NodeId) -> f64 {
        let row = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        match row.binary_search(&j) {
            Ok(k) => self.values[self.indptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(column, value)` over the stored entries of row `i`.
    pub fn row(&self, i: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Sparse-dense product `self * rhs`. Rows are reduced in stored column
    /// order, so results are reproducible bit for bit.
    pub fn matmul(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.num_nodes();
        if rhs.nrows() != n {
            return Err(CptError::Input(format!(
                "cannot propagate a {}-row matrix over {n} nodes",
                rhs.nrows()
            )));
        }
        let mut out = Array2::zeros((n, rhs.ncols()));
        for (i, mut out_row) in out.outer_iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                out_row.scaled_add(v, &rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut dense = Array2::zeros((n, n));
        for i in 0..n {
            for (j, v) in self.row(i) {
                dense[[i, j]] = v;
            }
        }
        dense
    }
}

pub fn normalize_adjacency(graph: &Graph) -> NormalizedAdjacency {
    NormalizedAdjacency::new(graph)
}

/// Disjoint base / validation / novel class sets.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassSplit {
    pub base: Vec<ClassId>,
    pub validation: Vec<ClassId>,
    pub novel: Vec<ClassId>,
}

impl ClassSplit {
    pub fn new(base: Vec<ClassId>, validation: Vec<ClassId>, novel: Vec<ClassId>) -> Result<Self> {
        let split = Self {
            base,
            validation,
            novel,
        };
        let mut seen = BTreeSet::new();
        for c in split.all() {
            if !seen.insert(c) {
                return Err(CptError::Input(format!(
                    "class {c} appears in more than one split set"
                )));
            }
        }
        Ok(split)
    }

    fn all(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.base
            .iter()
            .chain(&self.validation)
            .chain(&self.novel)
            .copied()
    }

    /// Checks that every class observed in `graph` belongs to exactly one set.
    pub fn check_covers(&self, graph: &Graph) -> Result<()> {
        let assigned: BTreeSet<ClassId> = self.all().collect();
        match graph.classes().into_iter().find(|c| !assigned.contains(c)) {
            Some(c) => Err(CptError::Consistency(format!(
                "class {c} is not assigned to any split set"
            ))),
            None => Ok(()),
        }
    }
}

/// Uniform random partition of the graph's classes into sets of the given
/// sizes.
pub fn split_classes(
    graph: &Graph,
    counts: (usize, usize, usize),
    rng: &mut impl rand::Rng,
) -> Result<ClassSplit> {
    let mut classes = graph.classes();
    let (n_base, n_val, n_novel) = counts;
    if n_base + n_val + n_novel != classes.len() {
        return Err(CptError::Input(format!(
            "split counts {n_base}+{n_val}+{n_novel} do not match {} classes",
            classes.len()
        )));
    }
    // Fisher-Yates; kept explicit so the draw order is fixed across rand versions.
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let mut take = |n: usize| {
        let mut set: Vec<ClassId> = classes.drain(..n).collect();
        set.sort_unstable();
        set
    };
    let base = take(n_base);
    let validation = take(n_val);
    let novel = take(n_novel);
    ClassSplit::new(base, validation, novel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn path3() -> Graph {
        Graph::new(vec![(0, 1), (1, 2)], Array2::zeros((3, 2)), vec![Some(0); 3]).unwrap()
    }

    #[test]
    fn degree_queries() {
        let edgeless = Graph::new(vec![], Array2::zeros((4, 1)), vec![None; 4]).unwrap();
        assert_eq!(edgeless.degree(3).unwrap(), 0);
        let g = path3();
        assert_eq!(g.degree(1).unwrap(), 2);
        assert_eq!(g.degree(0).unwrap(), 1);
        assert!(matches!(g.degree(3), Err(CptError::Input(_))));
    }

    #[test]
    fn cora_full_mean_degree() {
        // 19,793 nodes / 65,311 edges.
        let mean: f64 = 2.0 * 65311.0 / 19793.0;
        assert!((mean - 6.60).abs() < 5e-3);
    }

    #[test]
    fn rejects_invalid_edges() {
        let f = Array2::zeros((3, 1));
        assert!(Graph::new(vec![(1, 1)], f.clone(), vec![None; 3]).is_err());
        assert!(Graph::new(vec![(1, 0)], f.clone(), vec![None; 3]).is_err());
        assert!(Graph::new(vec![(0, 3)], f.clone(), vec![None; 3]).is_err());
        assert!(Graph::new(vec![(0, 1), (0, 1)], f.clone(), vec![None; 3]).is_err());
        assert!(matches!(
            Graph::new(vec![], f, vec![None; 2]),
            Err(CptError::Consistency(_))
        ));
    }

    #[test]
    fn raw_pairs_are_canonicalized() {
        let (g, discarded) =
            Graph::from_raw_pairs(vec![(1, 0), (0, 1), (2, 2)], Array2::zeros((3, 1)), vec![None; 3])
                .unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(discarded, 2);
    }

    #[test]
    fn normalization_small_cases() {
        let single = Graph::new(vec![], Array2::zeros((1, 1)), vec![None]).unwrap();
        assert_eq!(normalize_adjacency(&single).to_dense(), array![[1.0]]);

        let pair = Graph::new(vec![(0, 1)], Array2::zeros((2, 1)), vec![None; 2]).unwrap();
        assert_eq!(
            normalize_adjacency(&pair).to_dense(),
            array![[0.5, 0.5], [0.5, 0.5]]
        );
    }

    #[test]
    fn diagonal_survives_full_drop() {
        let g = path3();
        let dropped = drop_edges(&g, 1.0, &mut seeded(1)).unwrap();
        assert_eq!(dropped.num_edges(), 0);
        let adj = normalize_adjacency(&dropped);
        for i in 0..3 {
            assert_eq!(adj.get(i, i), 1.0);
        }
    }

    #[test]
    fn drop_edges_rejects_bad_ratio() {
        let g = path3();
        assert!(drop_edges(&g, -0.1, &mut seeded(0)).is_err());
        assert!(drop_edges(&g, 1.5, &mut seeded(0)).is_err());
        assert!(drop_edges(&g, f64::NAN, &mut seeded(0)).is_err());
    }

    #[test]
    fn drop_edges_leaves_input_untouched() {
        let g = path3();
        let before = g.clone();
        let _ = drop_edges(&g, 0.5, &mut seeded(3)).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn split_degenerate_and_mismatch() {
        let labels = (0..12).map(|i| Some(i % 4)).collect();
        let g = Graph::new(vec![], Array2::zeros((12, 1)), labels).unwrap();
        let s = split_classes(&g, (4, 0, 0), &mut seeded(0)).unwrap();
        assert_eq!(s.base, vec![0, 1, 2, 3]);
        assert!(s.validation.is_empty() && s.novel.is_empty());
        assert!(matches!(
            split_classes(&g, (2, 1, 0), &mut seeded(0)),
            Err(CptError::Input(_))
        ));
    }

    #[test]
    fn split_rejects_overlap() {
        assert!(ClassSplit::new(vec![0, 1], vec![1], vec![2]).is_err());
    }
}
