//! Episode losses and parameter updates.
//!
//! Two learners share the encoder:
//!
//! * `Prototypical`: class prototypes are mean support embeddings and
//!   query logits are negative squared Euclidean distances to them. There
//!   is no inner loop; the query loss gradient is applied directly.
//! * `Fomaml`: the encoder output is read as class logits (embed_dim must
//!   equal n_way). An inner descent step on the support loss produces
//!   adapted weights, and the query loss gradient at the adapted weights is
//!   applied to the original ones (first-order approximation).
//!
//! Loss is the cross-entropy summed over query nodes.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_backward, encode_propagated, EncoderParams, Propagation};
use crate::error::{CptError, Result};
use crate::graph::NodeId;
use crate::sampler::EpisodeTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Prototypical,
    Fomaml,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Prototypical => "prototypical",
            LearnerKind::Fomaml => "fomaml",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = CptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototypical" => Ok(LearnerKind::Prototypical),
            "fomaml" => Ok(LearnerKind::Fomaml),
            other => Err(CptError::Config(format!("unknown learner {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (task) learning rate.
    pub alpha1: f64,
    /// Outer (meta) learning rate.
    pub alpha2: f64,
    pub learner: LearnerKind,
    pub inner_steps: usize,
    /// Multiplier on the episode loss.
    pub loss_weight: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 0.005,
            learner: LearnerKind::Prototypical,
            inner_steps: 1,
            loss_weight: 1.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return Err(CptError::Config(format!(
                "learning rates must be positive, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.loss_weight.is_finite() && self.loss_weight >= 0.0) {
            return Err(CptError::Config(format!(
                "loss weight must be finite and nonnegative, got {}",
                self.loss_weight
            )));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs(logits: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CptError::Numerical("non-finite logit".into()));
    }
    let mut probs = logits.to_owned();
    for mut row in probs.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(probs)
}

/// Summed cross-entropy `-Σ_i log Z[i, y_i]` and its gradient with respect
/// to the logits, `Z - Y`.
pub fn cross_entropy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(probs, labels)?;
    let mut grad = probs.to_owned();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].ln();
        grad[[i, y]] -= 1.0;
    }
    Ok((loss, grad))
}

fn check_labels(matrix: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != matrix.nrows() {
        return Err(CptError::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            matrix.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= matrix.ncols()) {
        return Err(CptError::Input(format!(
            "label {bad} out of range for {} classes",
            matrix.ncols()
        )));
    }
    Ok(())
}

/// Same loss as `cross_entropy(softmax_probs(logits))` but evaluated through
/// log-sum-exp, so a confidently wrong prediction yields a large finite
/// loss instead of `inf`.
pub fn softmax_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let probs = softmax_probs(logits)?;
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
    }
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    Ok((loss, grad))
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(matrix: ArrayView2<'_, f64>) -> Vec<usize> {
    matrix
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Loss, accuracy and embedding gradient of one episode head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f64,
    pub accuracy: f64,
    /// Gradient with respect to the full embedding matrix (zero rows for
    /// nodes outside the episode).
    pub grad_embeddings: Array2<f64>,
    /// Per query: (node, predicted local label, true local label).
    pub predictions: Vec<(NodeId, usize, usize)>,
}

impl HeadOutput {
    fn correct(&self) -> usize {
        self.predictions.iter().filter(|(_, p, y)| p == y).count()
    }
}

/// Per-class mean of support embeddings, one row per local label.
pub fn prototypes(embeddings: ArrayView2<'_, f64>, task: &EpisodeTask) -> Result<Array2<f64>> {
    let n = task.n_way();
    let mut protos = Array2::zeros((n, embeddings.ncols()));
    let mut counts = vec![0usize; n];
    for &(node, label) in &task.support {
        check_node(embeddings, node)?;
        protos.row_mut(label).scaled_add(1.0, &embeddings.row(node));
        counts[label] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(CptError::Internal(format!(
                "local class {j} has no support nodes"
            )));
        }
        protos.row_mut(j).mapv_inplace(|v| v / c as f64);
    }
    Ok(protos)
}

fn check_node(embeddings: ArrayView2<'_, f64>, node: NodeId) -> Result<()> {
    if node >= embeddings.nrows() {
        return Err(CptError::Input(format!(
            "episode node {node} outside the {}-row embedding matrix",
            embeddings.nrows()
        )));
    }
    Ok(())
}

/// Prototypical head: logits are `-||e_q - p_j||²`.
pub fn proto_episode_loss(embeddings: ArrayView2<'_, f64>, task: &EpisodeTask) -> Result<HeadOutput> {
    let protos = prototypes(embeddings, task)?;
    let n = task.n_way();
    let q = task.query.len();
    let mut logits = Array2::zeros((q, n));
    for (i, &(node, _)) in task.query.iter().enumerate() {
        check_node(embeddings, node)?;
        let e = embeddings.row(node);
        for j in 0..n {
            let d = &e - &protos.row(j);
            logits[[i, j]] = -d.dot(&d);
        }
    }
    let labels: Vec<usize> = task.query.iter().map(|&(_, y)| y).collect();
    let (loss, grad_logits) = softmax_cross_entropy(logits.view(), &labels)?;

    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut grad_protos = Array2::<f64>::zeros(protos.raw_dim());
    for (i, &(node, _)) in task.query.iter().enumerate() {
        let e = embeddings.row(node);
        for j in 0..n {
            let g = grad_logits[[i, j]];
            if g == 0.0 {
                continue;
            }
            let diff = &e - &protos.row(j);
            // d(-|e-p|²)/de = -2(e-p), d/dp = 2(e-p)
            grad.row_mut(node).scaled_add(-2.0 * g, &diff);
            grad_protos.row_mut(j).scaled_add(2.0 * g, &diff);
        }
    }
    let mut counts = vec![0usize; n];
    for &(_, label) in &task.support {
        counts[label] += 1;
    }
    for &(node, label) in &task.support {
        grad.row_mut(node)
            .scaled_add(1.0 / counts[label] as f64, &grad_protos.row(label));
    }

    let predicted = argmax_rows(logits.view());
    finish(loss, grad, task, &predicted)
}

fn finish(
    loss: f64,
    grad_embeddings: Array2<f64>,
    task: &EpisodeTask,
    predicted: &[usize],
) -> Result<HeadOutput> {
    let predictions: Vec<_> = task
        .query
        .iter()
        .zip(predicted)
        .map(|(&(node, y), &p)| (node, p, y))
        .collect();
    let mut out = HeadOutput {
        loss,
        accuracy: 0.0,
        grad_embeddings,
        predictions,
    };
    out.accuracy = out.correct() as f64 / task.query.len().max(1) as f64;
    Ok(out)
}

/// Logit head: row `e_v` of the embedding matrix is the logit vector of node
/// `v`. Returns the summed loss over `nodes` and its embedding gradient.
pub fn logit_loss(
    embeddings: ArrayView2<'_, f64>,
    nodes: &[(NodeId, usize)],
) -> Result<(f64, Array2<f64>, Vec<usize>)> {
    let mut logits = Array2::zeros((nodes.len(), embeddings.ncols()));
    for (i, &(node, _)) in nodes.iter().enumerate() {
        check_node(embeddings, node)?;
        logits.row_mut(i).assign(&embeddings.row(node));
    }
    let labels: Vec<usize> = nodes.iter().map(|&(_, y)| y).collect();
    let (loss, grad_logits) = softmax_cross_entropy(logits.view(), &labels)?;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    for (i, &(node, _)) in nodes.iter().enumerate() {
        grad.row_mut(node).scaled_add(1.0, &grad_logits.row(i));
    }
    Ok((loss, grad, argmax_rows(logits.view())))
}

/// Logit head evaluated on the query set of `task`. Only the first
/// `n_way` output columns are read, so an encoder trained for wider
/// episodes can still be validated on narrower ones.
pub fn logit_episode_loss(embeddings: ArrayView2<'_, f64>, task: &EpisodeTask) -> Result<HeadOutput> {
    let n = task.n_way();
    let (loss, grad, predicted) = logit_loss(logit_columns(embeddings, n)?, &task.query)?;
    finish(loss, widen(grad, embeddings.ncols()), task, &predicted)
}

fn logit_columns(embeddings: ArrayView2<'_, f64>, n_way: usize) -> Result<ArrayView2<'_, f64>> {
    if embeddings.ncols() < n_way {
        return Err(CptError::Config(format!(
            "logit head needs embed_dim >= n_way, got {} < {n_way}",
            embeddings.ncols()
        )));
    }
    Ok(embeddings.slice_move(ndarray::s![.., ..n_way]))
}

fn widen(grad: Array2<f64>, cols: usize) -> Array2<f64> {
    if grad.ncols() == cols {
        return grad;
    }
    let mut out = Array2::zeros((grad.nrows(), cols));
    out.slice_mut(ndarray::s![.., ..grad.ncols()]).assign(&grad);
    out
}

/// One descent step `θ' = θ - alpha1 * grad`; the input is left untouched.
pub fn inner_step(params: &EncoderParams, grad: &EncoderParams, alpha1: f64) -> Result<EncoderParams> {
    params.sub_scaled(grad, alpha1)
}

/// `θ - alpha2 * Σ_i grad_i`, where each `grad_i` was evaluated at that
/// task's adapted weights.
pub fn outer_step(
    params: &EncoderParams,
    grads: &[EncoderParams],
    alpha2: f64,
) -> Result<EncoderParams> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| CptError::Input("outer step needs at least one task gradient".into()))?;
    let mut total = first.clone();
    for g in rest {
        if !g.same_shape(first) {
            return Err(CptError::Input("task gradients differ in shape".into()));
        }
        total.add_assign(g);
    }
    params.sub_scaled(&total, alpha2)
}

/// Result of running one episode through a learner.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    /// Query loss (at the adapted weights for FOMAML), before the loss weight.
    pub loss: f64,
    pub accuracy: f64,
    /// Gradient of the weighted query loss, to be applied to the original
    /// weights.
    pub grad: EncoderParams,
    pub predictions: Vec<(NodeId, usize, usize)>,
}

/// Adapts `params` to the support set of `task` with `inner_steps`
/// descent steps on the logit-head support loss.
pub fn adapt(
    prop: &Propagation,
    params: &EncoderParams,
    task: &EpisodeTask,
    cfg: &MetaConfig,
) -> Result<EncoderParams> {
    let mut adapted = params.clone();
    for _ in 0..cfg.inner_steps {
        let (emb, cache) = encode_propagated(prop, &adapted)?;
        let (_, grad_emb, _) = logit_loss(logit_columns(emb.view(), task.n_way())?, &task.support)?;
        let grad_emb = widen(grad_emb, emb.ncols());
        let grad = encode_backward(grad_emb.view(), &cache, prop, &adapted)?;
        adapted = inner_step(&adapted, &grad, cfg.alpha1)?;
    }
    Ok(adapted)
}

/// Forward and backward pass of one training episode.
pub fn episode_gradient(
    prop: &Propagation,
    params: &EncoderParams,
    task: &EpisodeTask,
    cfg: &MetaConfig,
) -> Result<EpisodeOutcome> {
    let at = match cfg.learner {
        LearnerKind::Prototypical => params.clone(),
        LearnerKind::Fomaml => adapt(prop, params, task, cfg)?,
    };
    let (emb, cache) = encode_propagated(prop, &at)?;
    let head = match cfg.learner {
        LearnerKind::Prototypical => proto_episode_loss(emb.view(), task)?,
        LearnerKind::Fomaml => logit_episode_loss(emb.view(), task)?,
    };
    let weighted = head.grad_embeddings * cfg.loss_weight;
    let grad = encode_backward(weighted.view(), &cache, prop, &at)?;
    if !head.loss.is_finite() || !grad.is_finite() {
        return Err(CptError::Numerical(format!(
            "episode loss diverged ({})",
            head.loss
        )));
    }
    Ok(EpisodeOutcome {
        loss: head.loss,
        accuracy: head.accuracy,
        grad,
        predictions: head.predictions,
    })
}

/// Inference on one episode with frozen weights. FOMAML adapts a private
/// copy on the support set first; the adaptation is discarded.
pub fn evaluate_episode(
    prop: &Propagation,
    params: &EncoderParams,
    task: &EpisodeTask,
    cfg: &MetaConfig,
) -> Result<(f64, f64, Vec<(NodeId, usize, usize)>)> {
    let head = match cfg.learner {
        LearnerKind::Prototypical => {
            let (emb, _) = encode_propagated(prop, params)?;
            proto_episode_loss(emb.view(), task)?
        }
        LearnerKind::Fomaml => {
            let adapted = adapt(prop, params, task, cfg)?;
            let (emb, _) = encode_propagated(prop, &adapted)?;
            logit_episode_loss(emb.view(), task)?
        }
    };
    Ok((head.loss, head.accuracy, head.predictions))
}
