//! Central-difference gradient checking.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use crate::encoder::{encode_backward, encode_propagated, EncoderParams, Propagation};
use crate::error::{CptError, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::meta::{logit_episode_loss, proto_episode_loss, LearnerKind};
use crate::sampler::EpisodeTask;

/// Denominator floor of the relative error. Entries smaller than this are
/// compared absolutely: finite differences of a loss in the hundreds cannot
/// resolve derivatives much below 1e-10, and near-zero entries would
/// otherwise report pure rounding noise as relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Identifies the smooth piece containing `theta`, for piecewise-smooth
    /// objectives. Probes landing in a different piece are skipped.
    fn region(&self, _theta: &[f64]) -> Result<Option<Vec<bool>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose probes crossed a kink.
    pub skipped: usize,
}

/// Step that keeps the fourth-order stencil below 1e-4 relative error on
/// losses in the hundreds while staying well inside one relu piece.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Compares the analytic gradient with the fourth-order central difference
/// `(8(f(θ+ε) - f(θ-ε)) - (f(θ+2ε) - f(θ-2ε))) / 12ε` for every
/// coordinate and reports the worst relative error
/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`. The plain two-point
/// difference loses too many digits to cancellation when the loss is large
/// and a gradient entry is small.
pub fn grad_check(objective: &impl Objective, theta: &[f64], epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(CptError::Input(format!("step {epsilon} must be positive")));
    }
    let analytic = objective.gradient(theta)?;
    if analytic.len() != theta.len() {
        return Err(CptError::Internal("gradient length differs from parameters".into()));
    }
    let region = objective.region(theta)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let mut values = [0.0; 4];
        let mut crossed = false;
        for (slot, offset) in [1.0, -1.0, 2.0, -2.0].into_iter().enumerate() {
            probe[i] = theta[i] + offset * epsilon;
            crossed |= region.is_some() && objective.region(&probe)? != region;
            values[slot] = objective.value(&probe)?;
        }
        probe[i] = theta[i];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CptError::Numerical(format!(
                "non-finite loss probing coordinate {i}"
            )));
        }
        if crossed {
            report.skipped += 1;
            continue;
        }
        let [plus, minus, plus2, minus2] = values;
        let numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Encoder followed by an episode head, as a function of the flattened
/// encoder weights.
#[derive(Debug, Clone)]
pub struct EpisodeObjective {
    pub prop: Propagation,
    pub task: EpisodeTask,
    pub template: EncoderParams,
    pub learner: LearnerKind,
}

impl EpisodeObjective {
    fn forward(&self, theta: &[f64]) -> Result<(EncoderParams, Array2<f64>, crate::encoder::ForwardCache)> {
        let params = self.template.from_flat_like(theta)?;
        let (emb, cache) = encode_propagated(&self.prop, &params)?;
        Ok((params, emb, cache))
    }

    fn head(&self, emb: &Array2<f64>) -> Result<crate::meta::HeadOutput> {
        match self.learner {
            LearnerKind::Prototypical => proto_episode_loss(emb.view(), &self.task),
            LearnerKind::Fomaml => logit_episode_loss(emb.view(), &self.task),
        }
    }
}

impl Objective for EpisodeObjective {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        let (_, emb, _) = self.forward(theta)?;
        Ok(self.head(&emb)?.loss)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (params, emb, cache) = self.forward(theta)?;
        let out = self.head(&emb)?;
        Ok(encode_backward(out.grad_embeddings.view(), &cache, &self.prop, &params)?.to_flat())
    }

    fn region(&self, theta: &[f64]) -> Result<Option<Vec<bool>>> {
        let (_, _, cache) = self.forward(theta)?;
        Ok(Some(cache.activation_pattern()))
    }
}

/// Random small episode problem: 6 to 10 nodes, feature_dim 2 to 8, a
/// random graph, standard-normal features and Glorot weights scaled up so
/// the relu pattern is mixed. Draws where every hidden unit has the same
/// sign or the gradient vanishes are redrawn, since they exercise nothing.
pub fn random_instance(learner: LearnerKind, rng: &mut impl rand::Rng) -> Result<(EpisodeObjective, Vec<f64>)> {
    loop {
        let (objective, theta) = draw_instance(learner, rng)?;
        let pattern = objective.region(&theta)?.unwrap_or_default();
        let mixed = pattern.iter().any(|&on| on) && pattern.iter().any(|&on| !on);
        let live = objective.gradient(&theta)?.iter().any(|g| g.abs() > 1e-6);
        if mixed && live {
            return Ok((objective, theta));
        }
    }
}

fn draw_instance(learner: LearnerKind, rng: &mut impl rand::Rng) -> Result<(EpisodeObjective, Vec<f64>)> {
    let n_way = rng.random_range(2..=3usize);
    let k_shot = rng.random_range(1..=2usize);
    let r_query = rng.random_range(1..=2usize);
    let needed = n_way * (k_shot + r_query);
    let num_nodes = rng.random_range(needed.max(6)..=10usize.max(needed));
    let feature_dim = rng.random_range(2..=8usize);
    let hidden_dim = rng.random_range(2..=6usize);
    let embed_dim = match learner {
        LearnerKind::Prototypical => rng.random_range(2..=4usize),
        LearnerKind::Fomaml => n_way,
    };

    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in (i + 1)..num_nodes {
            if rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let features = Array2::from_shape_simple_fn((num_nodes, feature_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    let graph = Graph::new(edges, features, vec![None; num_nodes])?;

    let mut order: Vec<usize> = (0..num_nodes).collect();
    order.shuffle(rng);
    let mut picks = order.into_iter();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for class in 0..n_way {
        support.extend(picks.by_ref().take(k_shot).map(|n| (n, class)));
        query.extend(picks.by_ref().take(r_query).map(|n| (n, class)));
    }
    let task = EpisodeTask {
        class_list: (0..n_way).collect(),
        support,
        query,
    };

    let params = EncoderParams::glorot(feature_dim, hidden_dim, embed_dim, rng).scale(1.5);
    let prop = Propagation::new(normalize_adjacency(&graph), graph.features())?;
    let theta = params.to_flat();
    Ok((
        EpisodeObjective {
            prop,
            task,
            template: params,
            learner,
        },
        theta,
    ))
}

/// Runs `trials` random instances and returns the worst error seen.
pub fn check_random_instances(
    trials: usize,
    learner: LearnerKind,
    epsilon: f64,
    rng: &mut impl rand::Rng,
) -> Result<Vec<GradCheckReport>> {
    (0..trials)
        .map(|_| {
            let (objective, theta) = random_instance(learner, rng)?;
            grad_check(&objective, &theta, epsilon)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfSquaredNorm;

    impl Objective for HalfSquaredNorm {
        fn value(&self, theta: &[f64]) -> Result<f64> {
            Ok(theta.iter().map(|v| v * v).sum::<f64>() / 2.0)
        }

        fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
            Ok(theta.to_vec())
        }
    }

    struct Wrong;

    impl Objective for Wrong {
        fn value(&self, theta: &[f64]) -> Result<f64> {
            Ok(theta[0] * theta[0])
        }

        fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![theta[0]])
        }
    }

    struct Blowup;

    impl Objective for Blowup {
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(f64::INFINITY)
        }

        fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
            Ok(theta.to_vec())
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(&HalfSquaredNorm, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(&Wrong, &[3.0], 1e-5).unwrap();
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_numerical_error() {
        assert!(matches!(
            grad_check(&Blowup, &[1.0], 1e-5),
            Err(CptError::Numerical(_))
        ));
    }

    #[test]
    fn zero_weights_sit_on_the_relu_kink() {
        let (objective, theta) = random_instance(LearnerKind::Prototypical, &mut crate::rng::seeded(4)).unwrap();
        let zeros = vec![0.0; theta.len()];
        let r = grad_check(&objective, &zeros, 1e-5).unwrap();
        // every W1 probe flips some pre-activation away from zero
        assert!(r.skipped >= objective.template.w1.len());
    }
}
