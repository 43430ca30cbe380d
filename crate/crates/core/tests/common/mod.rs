#![allow(dead_code)]

use cpt_core::rng::seeded;
use cpt_core::{Graph, SbmSpec};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Erdős–Rényi graph with standard-normal features and no labels.
pub fn random_graph(num_nodes: usize, feature_dim: usize, p: f64, seed: u64) -> Graph {
    let mut rng = seeded(seed);
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in (i + 1)..num_nodes {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let features = Array2::from_shape_simple_fn((num_nodes, feature_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    Graph::new(edges, features, vec![None; num_nodes]).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

pub fn sbm(num_classes: usize, nodes_per_class: usize, seed: u64) -> Graph {
    cpt_core::generate_sbm(&SbmSpec {
        num_classes,
        nodes_per_class,
        intra_p: 0.2,
        inter_p: 0.01,
        feature_dim: num_classes,
        feature_noise: 0.5,
        seed,
    })
    .unwrap()
}

/// `D^{-1/2} (A + I) D^{-1/2}` computed densely from the edge list.
pub fn dense_normalized(graph: &Graph) -> Array2<f64> {
    let n = graph.num_nodes();
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in graph.edges() {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let d: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
}

pub fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
