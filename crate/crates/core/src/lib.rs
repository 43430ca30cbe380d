//! Competence-progressive episodic meta-training for few-shot node
//! classification.
//!
//! A two-layer graph-convolutional encoder is meta-trained on N-way K-shot
//! episodes drawn from base classes. Training runs in two stages: ordinary
//! episodic training on the original graph, then training on graphs whose
//! edges are randomly dropped at a rate that follows a competence
//! schedule, so episodes get harder (more low-degree nodes) as the model
//! improves. Evaluation runs on episodes from disjoint novel classes.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod curriculum;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod meta;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use curriculum::{beta_for_epoch, competence, CompetenceConfig};
pub use data_io::{generate_sbm, load_graph, save_graph, DatasetPaths, SbmSpec};
pub use encoder::{encode, encode_backward, EncoderParams, ForwardCache, Propagation};
pub use error::{CptError, Result};
pub use eval::{degree_binned_accuracy, meta_test, DegreeBin, EvalReport};
pub use experiment::{run_experiment, ExperimentResults};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use graph::{drop_edges, normalize_adjacency, split_classes, ClassSplit, Graph, NormalizedAdjacency};
pub use manifest::Manifest;
pub use meta::{cross_entropy, inner_step, outer_step, proto_episode_loss, softmax_probs, LearnerKind, MetaConfig};
pub use sampler::{sample_task, EpisodeShape, EpisodeTask, TaskSampler};
pub use trainer::{train, train_stage_one, train_stage_two, TrainConfig, TrainState, Variant};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/curriculum.md")]
    mod curriculum {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
