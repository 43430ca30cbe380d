//! On-disk dataset formats and the synthetic stochastic-block-model
//! benchmark.
//!
//! A dataset is three files:
//!
//! * edges: text, one `u<TAB>v` pair of base-10 node ids per line; lines
//!   starting with `#` are comments.
//! * features: little-endian binary, two `u64` (num_nodes, feature_dim)
//!   followed by `num_nodes * feature_dim` row-major `f32`.
//! * labels: text, one base-10 class id per line (line i is node i), `-1`
//!   for unlabeled nodes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};
use crate::graph::{ClassId, Graph, NodeId};
use crate::rng::seeded;

pub const EDGE_FILE: &str = "edges.txt";
pub const FEATURE_FILE: &str = "features.bin";
pub const LABEL_FILE: &str = "labels.txt";

/// Paths of the three files making up one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl DatasetPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            edges: dir.join(EDGE_FILE),
            features: dir.join(FEATURE_FILE),
            labels: dir.join(LABEL_FILE),
        }
    }

    pub fn exist(&self) -> bool {
        self.edges.is_file() && self.features.is_file() && self.labels.is_file()
    }
}

/// Graph plus what was discarded while reading it.
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: Graph,
    /// Self-loops and repeated pairs (in either direction) dropped from the
    /// edge file.
    pub discarded_edges: usize,
}

pub fn load_graph(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Graph> {
    load_graph_detailed(edge_path, feature_path, label_path).map(|l| l.graph)
}

pub fn load_graph_detailed(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
) -> Result<LoadedGraph> {
    let features = read_features(feature_path)?;
    let labels = read_labels(label_path)?;
    if labels.len() != features.nrows() {
        return Err(CptError::Consistency(format!(
            "{} has {} feature rows but {} has {} labels",
            feature_path.display(),
            features.nrows(),
            label_path.display(),
            labels.len()
        )));
    }
    let pairs = read_edges(edge_path)?;
    let n = features.nrows();
    if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= n || *b >= n) {
        return Err(CptError::Consistency(format!(
            "{} references edge ({a}, {b}) but there are only {n} nodes",
            edge_path.display()
        )));
    }
    let (graph, discarded_edges) = Graph::from_raw_pairs(pairs, features, labels)?;
    if discarded_edges > 0 {
        log::warn!(
            "{}: dropped {discarded_edges} self-loop or duplicate edge lines",
            edge_path.display()
        );
    }
    Ok(LoadedGraph {
        graph,
        discarded_edges,
    })
}

pub fn save_graph(graph: &Graph, paths: &DatasetPaths) -> Result<()> {
    write_edges(graph, &paths.edges)?;
    write_features(graph, &paths.features)?;
    write_labels(graph, &paths.labels)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CptError::io(format!("opening {}", path.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CptError::io(format!("creating {}", path.display()), e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CptError {
    CptError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_edges(path: &Path) -> Result<Vec<(NodeId, NodeId)>> {
    let mut pairs = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CptError::io(format!("reading {}", path.display()), e))?;
        let line_no = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim_end_matches('\r').split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(path, line_no, "expected two tab-separated node ids"));
        };
        let parse = |s: &str| {
            s.parse::<NodeId>()
                .map_err(|_| parse_err(path, line_no, format!("bad node id {s:?}")))
        };
        pairs.push((parse(a)?, parse(b)?));
    }
    Ok(pairs)
}

pub fn read_labels(path: &Path) -> Result<Vec<Option<ClassId>>> {
    let mut labels = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CptError::io(format!("reading {}", path.display()), e))?;
        let text = line.trim();
        let value: i64 = text
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad class id {text:?}")))?;
        labels.push(match value {
            -1 => None,
            v if v >= 0 => Some(v as ClassId),
            v => return Err(parse_err(path, idx + 1, format!("negative class id {v}"))),
        });
    }
    Ok(labels)
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut reader = open(path)?;
    let io = |e| CptError::io(format!("reading {}", path.display()), e);
    let mut word = [0u8; 8];
    reader.read_exact(&mut word).map_err(io)?;
    let rows = u64::from_le_bytes(word) as usize;
    reader.read_exact(&mut word).map_err(io)?;
    let cols = u64::from_le_bytes(word) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| CptError::Consistency(format!("{}: header overflows", path.display())))?;
    let mut bytes = Vec::with_capacity(count * 4);
    reader.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != count * 4 {
        return Err(CptError::Consistency(format!(
            "{}: header declares {rows}x{cols} floats but body holds {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| CptError::Internal(format!("feature reshape: {e}")))
}

fn write_edges(graph: &Graph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CptError::io(format!("writing {}", path.display()), e);
    for &(a, b) in graph.edges() {
        writeln!(w, "{a}\t{b}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Features are stored as `f32`; values that are not exactly representable
/// are rounded.
fn write_features(graph: &Graph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CptError::io(format!("writing {}", path.display()), e);
    let x = graph.features();
    w.write_all(&(x.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(x.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in x.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_labels(graph: &Graph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| CptError::io(format!("writing {}", path.display()), e);
    for label in graph.labels() {
        match label {
            Some(c) => writeln!(w, "{c}"),
            None => writeln!(w, "-1"),
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Planted-partition random graph with noisy one-hot features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    #[serde(default = "default_noise")]
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    1.0
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.inter_p && self.inter_p < self.intra_p && self.intra_p <= 1.0) {
            return Err(CptError::Config(format!(
                "need 0 <= inter_p < intra_p <= 1, got inter_p={} intra_p={}",
                self.inter_p, self.intra_p
            )));
        }
        if self.feature_dim == 0 {
            return Err(CptError::Config("feature_dim must be at least 1".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(CptError::Config(format!(
                "feature_noise must be finite and nonnegative, got {}",
                self.feature_noise
            )));
        }
        Ok(())
    }
}

/// Samples a stochastic block model.
///
/// Node `i` belongs to block `i / nodes_per_class`. Every unordered pair is
/// an edge with probability `intra_p` inside a block and `inter_p` across
/// blocks. Node features are the one-hot vector of `block % feature_dim`
/// plus Gaussian noise with standard deviation `feature_noise`, rounded to
/// `f32` so they survive the feature file format exactly.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.num_classes * spec.nodes_per_class;
    let block = |i: usize| i / spec.nodes_per_class;
    let mut rng = seeded(spec.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block(i) == block(j) {
                spec.intra_p
            } else {
                spec.inter_p
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let noise = Normal::new(0.0, spec.feature_noise)
        .map_err(|e| CptError::Config(format!("feature noise: {e}")))?;
    let mut features = Array2::zeros((n, spec.feature_dim));
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            let signal = if k == block(i) % spec.feature_dim { 1.0 } else { 0.0 };
            *v = f64::from((signal + noise.sample(&mut rng)) as f32);
        }
    }
    let labels = (0..n).map(|i| Some(block(i))).collect();
    Graph::new(edges, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn spec(classes: usize, per: usize, intra: f64, inter: f64, seed: u64) -> SbmSpec {
        SbmSpec {
            num_classes: classes,
            nodes_per_class: per,
            intra_p: intra,
            inter_p: inter,
            feature_dim: 4,
            feature_noise: 1.0,
            seed,
        }
    }

    #[test]
    fn two_disjoint_triangles() {
        let g = generate_sbm(&spec(2, 3, 1.0, 0.0, 0)).unwrap();
        assert_eq!(
            g.edges(),
            &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        );
    }

    #[test]
    fn sbm_is_deterministic() {
        let s = spec(3, 10, 0.4, 0.05, 9);
        assert_eq!(generate_sbm(&s).unwrap(), generate_sbm(&s).unwrap());
    }

    #[test]
    fn sbm_rejects_bad_spec() {
        assert!(generate_sbm(&spec(2, 3, 0.1, 0.1, 0)).is_err());
        assert!(generate_sbm(&spec(2, 3, 1.1, 0.0, 0)).is_err());
        let mut s = spec(2, 3, 0.5, 0.0, 0);
        s.feature_dim = 0;
        assert!(generate_sbm(&s).is_err());
    }

    #[test]
    fn minimal_file_set() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        fs::write(&paths.edges, "0\t1\n").unwrap();
        fs::write(&paths.labels, "0\n1\n").unwrap();
        let mut bytes = Vec::new();
        bytes.extend(2u64.to_le_bytes());
        bytes.extend(1u64.to_le_bytes());
        bytes.extend(0.5f32.to_le_bytes());
        bytes.extend((-1.5f32).to_le_bytes());
        fs::write(&paths.features, bytes).unwrap();
        let g = load_graph(&paths.edges, &paths.features, &paths.labels).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.features()[[1, 0]], -1.5);
    }

    #[test]
    fn both_directions_and_comments_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let g = generate_sbm(&spec(1, 2, 1.0, 0.0, 0)).unwrap();
        save_graph(&g, &paths).unwrap();
        fs::write(&paths.edges, "# header\n1\t0\n0\t1\n1\t1\n").unwrap();
        let loaded = load_graph_detailed(&paths.edges, &paths.features, &paths.labels).unwrap();
        assert_eq!(loaded.graph.edges(), &[(0, 1)]);
        assert_eq!(loaded.discarded_edges, 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let g = generate_sbm(&spec(1, 3, 1.0, 0.0, 0)).unwrap();
        save_graph(&g, &paths).unwrap();

        fs::write(&paths.edges, "0\t1\n0 2\n").unwrap();
        match load_graph(&paths.edges, &paths.features, &paths.labels) {
            Err(CptError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&paths.edges, "0\t1\n").unwrap();
        fs::write(&paths.labels, "0\nx\n0\n").unwrap();
        match load_graph(&paths.edges, &paths.features, &paths.labels) {
            Err(CptError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn node_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let g = generate_sbm(&spec(1, 3, 1.0, 0.0, 0)).unwrap();
        save_graph(&g, &paths).unwrap();
        fs::write(&paths.labels, "0\n0\n").unwrap();
        assert!(matches!(
            load_graph(&paths.edges, &paths.features, &paths.labels),
            Err(CptError::Consistency(_))
        ));
        fs::write(&paths.labels, "0\n0\n0\n").unwrap();
        fs::write(&paths.edges, "0\t7\n").unwrap();
        assert!(matches!(
            load_graph(&paths.edges, &paths.features, &paths.labels),
            Err(CptError::Consistency(_))
        ));
    }

    #[test]
    fn unlabeled_sentinel_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let g = Graph::new(vec![(0, 2)], Array2::zeros((3, 1)), vec![Some(4), None, Some(0)])
            .unwrap();
        save_graph(&g, &paths).unwrap();
        assert_eq!(fs::read_to_string(&paths.labels).unwrap(), "4\n-1\n0\n");
        let back = load_graph(&paths.edges, &paths.features, &paths.labels).unwrap();
        assert_eq!(back, g);
    }
}
