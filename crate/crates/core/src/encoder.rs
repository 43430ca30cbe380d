//! Two-layer graph-convolutional encoder with hand-written gradients.
//!
//! Forward pass: `E = Â · relu(Â · X · W1) · W2`, no biases. The relu
//! derivative at exactly zero is taken to be zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{CptError, Result};
use crate::graph::NormalizedAdjacency;

/// Encoder weights `W1` (feature_dim x hidden_dim) and `W2`
/// (hidden_dim x embed_dim). Also used as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl EncoderParams {
    pub fn new(w1: Array2<f64>, w2: Array2<f64>) -> Result<Self> {
        if w1.ncols() != w2.nrows() {
            return Err(CptError::Input(format!(
                "W1 is {}x{} but W2 is {}x{}",
                w1.nrows(),
                w1.ncols(),
                w2.nrows(),
                w2.ncols()
            )));
        }
        let params = Self { w1, w2 };
        if !params.is_finite() {
            return Err(CptError::Numerical("non-finite encoder weight".into()));
        }
        Ok(params)
    }

    pub fn zeros(feature_dim: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((feature_dim, hidden_dim)),
            w2: Array2::zeros((hidden_dim, embed_dim)),
        }
    }

    /// Glorot-uniform initialization: `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, W1 drawn before W2.
    pub fn glorot(
        feature_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
        };
        let w1 = layer(feature_dim, hidden_dim);
        let w2 = layer(hidden_dim, embed_dim);
        Self { w1, w2 }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.w1.dim() == other.w1.dim() && self.w2.dim() == other.w2.dim()
    }

    /// `self - step * direction`, as a new value.
    pub fn sub_scaled(&self, direction: &Self, step: f64) -> Result<Self> {
        if !self.same_shape(direction) {
            return Err(CptError::Input("gradient shape does not match parameters".into()));
        }
        let mut out = self.clone();
        out.w1.scaled_add(-step, &direction.w1);
        out.w2.scaled_add(-step, &direction.w2);
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            w1: &self.w1 * factor,
            w2: &self.w2 * factor,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1 += &other.w1;
        self.w2 += &other.w2;
    }

    /// W1 then W2, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1.iter().chain(self.w2.iter()).copied().collect()
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(CptError::Input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let (a, b) = flat.split_at(self.w1.len());
        let shape = |dim: (usize, usize), v: &[f64]| {
            Array2::from_shape_vec(dim, v.to_vec())
                .map_err(|e| CptError::Internal(format!("reshape: {e}")))
        };
        Ok(Self {
            w1: shape(self.w1.dim(), a)?,
            w2: shape(self.w2.dim(), b)?,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.w1
            .iter()
            .zip(other.w1.iter())
            .chain(self.w2.iter().zip(other.w2.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalized adjacency together with the propagated input `Â X`, which
/// does not depend on the weights and is reused across forward passes.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub adj: NormalizedAdjacency,
    pub propagated_features: Array2<f64>,
}

impl Propagation {
    pub fn new(adj: NormalizedAdjacency, features: ArrayView2<'_, f64>) -> Result<Self> {
        let propagated_features = adj.matmul(features)?;
        Ok(Self {
            adj,
            propagated_features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.num_nodes()
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `Â X W1`, before the relu.
    pub pre_activation: Array2<f64>,
    /// `Â relu(Â X W1)`.
    pub propagated_hidden: Array2<f64>,
}

impl ForwardCache {
    /// Sign pattern of the hidden pre-activations; a finite-difference probe
    /// is only meaningful when it does not change this pattern.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre_activation.iter().map(|&v| v > 0.0).collect()
    }
}

pub fn encode(
    adj: &NormalizedAdjacency,
    features: ArrayView2<'_, f64>,
    params: &EncoderParams,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_features(features, params)?;
    let prop = Propagation::new(adj.clone(), features)?;
    encode_propagated(&prop, params)
}

fn check_features(features: ArrayView2<'_, f64>, params: &EncoderParams) -> Result<()> {
    if features.ncols() != params.feature_dim() {
        return Err(CptError::Input(format!(
            "features have {} columns but W1 expects {}",
            features.ncols(),
            params.feature_dim()
        )));
    }
    Ok(())
}

pub fn encode_propagated(
    prop: &Propagation,
    params: &EncoderParams,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_features(prop.propagated_features.view(), params)?;
    if params.w1.ncols() != params.w2.nrows() {
        return Err(CptError::Input("W1/W2 inner dimensions differ".into()));
    }
    let pre_activation = prop.propagated_features.dot(&params.w1);
    let hidden = pre_activation.mapv(|v| v.max(0.0));
    let propagated_hidden = prop.adj.matmul(hidden.view())?;
    let embeddings = propagated_hidden.dot(&params.w2);
    Ok((
        embeddings,
        ForwardCache {
            pre_activation,
            propagated_hidden,
        },
    ))
}

/// Reverse-mode gradients of `sum(grad_embeddings ⊙ E)` with respect to W1
/// and W2. Uses `Âᵀ = Â`.
pub fn encode_backward(
    grad_embeddings: ArrayView2<'_, f64>,
    cache: &ForwardCache,
    prop: &Propagation,
    params: &EncoderParams,
) -> Result<EncoderParams> {
    let n = prop.num_nodes();
    if grad_embeddings.dim() != (n, params.embed_dim()) {
        return Err(CptError::Input(format!(
            "embedding gradient is {:?}, expected ({n}, {})",
            grad_embeddings.dim(),
            params.embed_dim()
        )));
    }
    if cache.pre_activation.dim() != (n, params.hidden_dim())
        || cache.propagated_hidden.dim() != (n, params.hidden_dim())
    {
        return Err(CptError::Internal(
            "forward cache does not match parameters".into(),
        ));
    }
    let grad_w2 = cache.propagated_hidden.t().dot(&grad_embeddings);
    let grad_prop_hidden = grad_embeddings.dot(&params.w2.t());
    let mut grad_pre = prop.adj.matmul(grad_prop_hidden.view())?;
    Zip::from(&mut grad_pre)
        .and(&cache.pre_activation)
        .for_each(|g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
    let grad_w1 = prop.propagated_features.t().dot(&grad_pre);
    Ok(EncoderParams {
        w1: grad_w1,
        w2: grad_w2,
    })
}

/// Inverted feature dropout: zeroes each entry with probability `rate` and
/// rescales survivors by `1 / (1 - rate)`.
pub fn dropout_features(
    features: ArrayView2<'_, f64>,
    rate: f64,
    rng: &mut impl rand::Rng,
) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CptError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(features.mapv(|v| if rng.random::<f64>() < rate { 0.0 } else { v * keep }))
}

/// Checkpoint flag: the encoder output is read directly as class logits.
pub const FLAG_LOGIT_HEAD: u64 = 1;

/// Writes the little-endian checkpoint: four `u64` (feature_dim,
/// hidden_dim, embed_dim, flags), then W1 and W2 as row-major `f64`.
pub fn save_checkpoint(params: &EncoderParams, flags: u64, path: &Path) -> Result<()> {
    let io = |e| CptError::io(format!("writing {}", path.display()), e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for word in [
        params.feature_dim() as u64,
        params.hidden_dim() as u64,
        params.embed_dim() as u64,
        flags,
    ] {
        w.write_all(&word.to_le_bytes()).map_err(io)?;
    }
    for v in params.w1.iter().chain(params.w2.iter()) {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, u64)> {
    let io = |e| CptError::io(format!("reading {}", path.display()), e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut header = [0u64; 4];
    let mut word = [0u8; 8];
    for h in header.iter_mut() {
        r.read_exact(&mut word).map_err(io)?;
        *h = u64::from_le_bytes(word);
    }
    let [f, h, e, flags] = header.map(|v| v as usize);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    let expected = (f * h + h * e) * 8;
    if bytes.len() != expected {
        return Err(CptError::Consistency(format!(
            "{}: header declares {f}x{h} + {h}x{e} weights, body has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let template = EncoderParams::zeros(f, h, e);
    Ok((template.from_flat_like(&values)?, flags as u64))
}
