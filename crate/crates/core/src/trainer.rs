//! Two-stage competence-progressive meta-training and its ablations.
//!
//! Every epoch samples one task from the base classes and applies one
//! update. Plain epochs use the original graph. Hardened epochs first drop
//! a fraction `β` of the edges, with `β` read off the competence schedule,
//! and sample the task on the sparser graph. Variants:
//!
//! | variant   | schedule                                        |
//! |-----------|-------------------------------------------------|
//! | `cpt`     | T plain epochs, then T hardened (β rising)      |
//! | `no_ss`   | 2T plain epochs                                 |
//! | `no_fs`   | 2T hardened epochs from a fresh init            |
//! | `reverse` | T hardened epochs with β falling, then T plain  |

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{beta_for_epoch, CompetenceConfig};
use crate::encoder::{dropout_features, EncoderParams, Propagation};
use crate::error::{CptError, Result};
use crate::graph::{drop_count, drop_edges, normalize_adjacency, ClassId, ClassSplit, Graph};
use crate::meta::{episode_gradient, evaluate_episode, outer_step, LearnerKind, MetaConfig};
use crate::rng::{self, Rng, SeedTree};
use crate::sampler::{EpisodeShape, EpisodeTask, TaskSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cpt,
    NoSs,
    NoFs,
    Reverse,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cpt, Variant::NoSs, Variant::NoFs, Variant::Reverse];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cpt => "cpt",
            Variant::NoSs => "no_ss",
            Variant::NoFs => "no_fs",
            Variant::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = CptError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CptError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    /// Epochs per stage (T).
    pub epochs_per_stage: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Train-time feature dropout rate; 0 disables it.
    pub dropout: f64,
    pub weight_decay: f64,
    pub meta: MetaConfig,
    pub curriculum: CompetenceConfig,
    pub seed: u64,
    pub validation_interval: usize,
    /// Number of fixed validation episodes scored at each validation point.
    pub validation_tasks: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 3,
            r_query: 10,
            epochs_per_stage: 2000,
            hidden_dim: 32,
            embed_dim: 16,
            dropout: 0.0,
            weight_decay: 0.0005,
            meta: MetaConfig::default(),
            curriculum: CompetenceConfig::default(),
            seed: 0,
            validation_interval: 50,
            validation_tasks: 20,
            variant: Variant::Cpt,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.n_way, self.k_shot, self.r_query)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        self.meta.validate()?;
        self.curriculum.validate()?;
        if self.validation_interval == 0 {
            return Err(CptError::Config("validation_interval must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(CptError::Config("hidden_dim and embed_dim must be positive".into()));
        }
        if self.meta.learner == LearnerKind::Fomaml && self.embed_dim != self.n_way {
            return Err(CptError::Config(format!(
                "the fomaml learner reads encoder outputs as logits: embed_dim ({}) must equal n_way ({})",
                self.embed_dim, self.n_way
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CptError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CptError::Config(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, feature_dim: usize) -> EncoderParams {
        let mut rng = SeedTree::new(self.seed).stream(rng::INIT, 0);
        EncoderParams::glorot(feature_dim, self.hidden_dim, self.embed_dim, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Tasks on the original graph.
    One,
    /// Tasks on an edge-dropped graph.
    Two,
}

impl Stage {
    pub fn number(&self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across stages.
    pub epoch: usize,
    pub stage: Stage,
    pub beta: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub epoch: usize,
    pub stage: Stage,
    /// Parameters at the best validation accuracy; the final parameters when
    /// no validation ran.
    pub best_params: EncoderParams,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: EncoderParams) -> Self {
        Self {
            best_params: params.clone(),
            params,
            epoch: 0,
            stage: Stage::One,
            best_val_accuracy: None,
            log: Vec::new(),
        }
    }
}

/// How the drop ratio evolves over a stage.
#[derive(Debug, Clone, Copy)]
enum Schedule {
    Plain,
    Rising(CompetenceConfig),
    Falling(CompetenceConfig),
}

/// Everything that stays fixed across the epochs of one run.
struct Trainer<'a> {
    graph: &'a Graph,
    cfg: &'a TrainConfig,
    base: Vec<ClassId>,
    clean: Propagation,
    sampler: TaskSampler,
    sampler_rng: Rng,
    seeds: SeedTree,
    validation: Option<Vec<EpisodeTask>>,
}

impl<'a> Trainer<'a> {
    fn new(graph: &'a Graph, split: &ClassSplit, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        split.check_covers(graph)?;
        let sampler = TaskSampler::new(graph);
        sampler.check_pool(&split.base, cfg.shape())?;
        let seeds = SeedTree::new(cfg.seed);
        let validation = validation_tasks(&sampler, &split.validation, cfg, &seeds)?;
        Ok(Self {
            graph,
            cfg,
            base: split.base.clone(),
            clean: Propagation::new(normalize_adjacency(graph), graph.features())?,
            sampler,
            sampler_rng: seeds.stream(rng::SAMPLER, 0),
            seeds,
            validation,
        })
    }

    fn run_stage(&mut self, state: &mut TrainState, epochs: usize, schedule: Schedule) -> Result<()> {
        state.stage = match schedule {
            Schedule::Plain => Stage::One,
            _ => Stage::Two,
        };
        for t in 1..=epochs {
            let epoch = state.epoch + 1;
            self.epoch(state, t, epochs, schedule)
                .map_err(|e| CptError::Epoch {
                    epoch,
                    source: Box::new(e),
                })?;
        }
        Ok(())
    }

    fn epoch(&mut self, state: &mut TrainState, t: usize, epochs: usize, schedule: Schedule) -> Result<()> {
        let epoch = state.epoch + 1;
        let beta = match schedule {
            Schedule::Plain => 0.0,
            Schedule::Rising(c) => beta_for_epoch(t, &c)?,
            Schedule::Falling(c) => beta_for_epoch(epochs + 1 - t, &c)?,
        };

        let hardened;
        let mut prop = &self.clean;
        if drop_count(self.graph.num_edges(), beta) > 0 {
            let mut rng = self.seeds.stream(rng::DROPEDGE, epoch as u64);
            let dropped = drop_edges(self.graph, beta, &mut rng)?;
            hardened = Propagation::new(normalize_adjacency(&dropped), dropped.features())?;
            prop = &hardened;
        }
        let dropped_features;
        if self.cfg.dropout > 0.0 {
            let mut rng = self.seeds.stream(rng::DROPOUT, epoch as u64);
            let x = dropout_features(self.graph.features(), self.cfg.dropout, &mut rng)?;
            dropped_features = Propagation::new(prop.adj.clone(), x.view())?;
            prop = &dropped_features;
        }

        let task = self
            .sampler
            .sample(&self.base, self.cfg.shape(), &mut self.sampler_rng)?;
        let outcome = episode_gradient(prop, &state.params, &task, &self.cfg.meta)?;
        let lr = self.cfg.meta.alpha2;
        let decayed = state.params.scale(1.0 - lr * self.cfg.weight_decay);
        state.params = outer_step(&decayed, std::slice::from_ref(&outcome.grad), lr)?;
        if !state.params.is_finite() {
            return Err(CptError::Numerical("parameters diverged".into()));
        }
        state.epoch = epoch;

        let mut record = EpochRecord {
            epoch,
            stage: state.stage,
            beta,
            train_loss: outcome.loss,
            val_loss: None,
            val_accuracy: None,
        };
        if epoch % self.cfg.validation_interval == 0 {
            if let Some((loss, acc)) = self.validate(&state.params)? {
                record.val_loss = Some(loss);
                record.val_accuracy = Some(acc);
                if state.best_val_accuracy.is_none_or(|best| acc > best) {
                    state.best_val_accuracy = Some(acc);
                    state.best_params = state.params.clone();
                }
            }
        }
        state.log.push(record);
        Ok(())
    }

    /// Mean query loss and accuracy over the fixed validation episodes, on
    /// the original graph.
    fn validate(&self, params: &EncoderParams) -> Result<Option<(f64, f64)>> {
        let Some(tasks) = &self.validation else {
            return Ok(None);
        };
        let scores = tasks
            .par_iter()
            .map(|task| evaluate_episode(&self.clean, params, task, &self.cfg.meta))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let loss = scores.iter().map(|s| s.0).sum::<f64>() / n;
        let acc = scores.iter().map(|s| s.1).sum::<f64>() / n;
        Ok(Some((loss, acc)))
    }

    fn finish(&self, mut state: TrainState) -> TrainState {
        if state.best_val_accuracy.is_none() {
            state.best_params = state.params.clone();
        }
        state
    }
}

/// Validation episodes are sampled once per run so successive evaluations
/// are comparable. When the validation pool has fewer classes than
/// `n_way`, episodes use every validation class; with fewer than two
/// classes validation is disabled.
fn validation_tasks(
    sampler: &TaskSampler,
    pool: &[ClassId],
    cfg: &TrainConfig,
    seeds: &SeedTree,
) -> Result<Option<Vec<EpisodeTask>>> {
    let n_way = cfg.n_way.min(pool.len());
    if n_way < 2 || cfg.validation_tasks == 0 {
        return Ok(None);
    }
    let shape = EpisodeShape::new(n_way, cfg.k_shot, cfg.r_query);
    sampler.check_pool(pool, shape)?;
    let mut rng = seeds.stream(rng::VALIDATION, 0);
    (0..cfg.validation_tasks)
        .map(|_| sampler.sample(pool, shape, &mut rng))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn curriculum_over(cfg: &TrainConfig, scale: usize) -> CompetenceConfig {
    CompetenceConfig {
        max_iter: cfg.curriculum.max_iter * scale,
        ..cfg.curriculum
    }
}

/// Stage one alone: `T` plain epochs starting from `params`.
pub fn train_stage_one(
    graph: &Graph,
    split: &ClassSplit,
    cfg: &TrainConfig,
    params: EncoderParams,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(graph, split, cfg)?;
    let mut state = TrainState::new(params);
    trainer.run_stage(&mut state, cfg.epochs_per_stage, Schedule::Plain)?;
    Ok(trainer.finish(state))
}

/// Stage two alone: `T` hardened epochs starting from `params`, with the
/// competence clock starting over.
pub fn train_stage_two(
    graph: &Graph,
    split: &ClassSplit,
    cfg: &TrainConfig,
    params: EncoderParams,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(graph, split, cfg)?;
    let mut state = TrainState::new(params);
    trainer.run_stage(&mut state, cfg.epochs_per_stage, Schedule::Rising(cfg.curriculum))?;
    Ok(trainer.finish(state))
}

/// Full training run for `cfg.variant` from a seeded initialization.
pub fn train(graph: &Graph, split: &ClassSplit, cfg: &TrainConfig) -> Result<TrainState> {
    let mut trainer = Trainer::new(graph, split, cfg)?;
    let mut state = TrainState::new(cfg.init_params(graph.feature_dim()));
    let t = cfg.epochs_per_stage;
    match cfg.variant {
        Variant::Cpt => {
            trainer.run_stage(&mut state, t, Schedule::Plain)?;
            trainer.run_stage(&mut state, t, Schedule::Rising(cfg.curriculum))?;
        }
        Variant::NoSs => trainer.run_stage(&mut state, 2 * t, Schedule::Plain)?,
        Variant::NoFs => {
            trainer.run_stage(&mut state, 2 * t, Schedule::Rising(curriculum_over(cfg, 2)))?
        }
        Variant::Reverse => {
            trainer.run_stage(&mut state, t, Schedule::Falling(cfg.curriculum))?;
            trainer.run_stage(&mut state, t, Schedule::Plain)?;
        }
    }
    Ok(trainer.finish(state))
}

pub const METRIC_COLUMNS: [&str; 6] = ["epoch", "stage", "beta", "train_loss", "val_loss", "val_accuracy"];

/// Writes the per-epoch log as CSV. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_metric_log(log: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CptError::Internal(format!("metric log: {e}"));
    w.write_record(METRIC_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.stage.number().to_string(),
            r.beta.to_string(),
            r.train_loss.to_string(),
            opt(r.val_loss),
            opt(r.val_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| CptError::io("flushing metric log", e))
}

pub fn save_metric_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CptError::io(format!("creating {}", path.display()), e))?;
    write_metric_log(log, std::io::BufWriter::new(file))
}

pub fn read_metric_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CptError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |m: String| CptError::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| row.get(k).ok_or_else(|| bad(format!("missing column {k}")));
        let num = |k: usize| -> Result<f64> {
            let s = field(k)?;
            s.parse().map_err(|_| bad(format!("bad number {s:?}")))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            if field(k)?.is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|_| bad("bad epoch".into()))?,
            stage: match field(1)? {
                "1" => Stage::One,
                "2" => Stage::Two,
                s => return Err(bad(format!("bad stage {s:?}"))),
            },
            beta: num(2)?,
            train_loss: num(3)?,
            val_loss: opt(4)?,
            val_accuracy: opt(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_sbm, SbmSpec};

    fn setup(epochs: usize) -> (Graph, ClassSplit, TrainConfig) {
        let graph = generate_sbm(&SbmSpec {
            num_classes: 6,
            nodes_per_class: 15,
            intra_p: 0.3,
            inter_p: 0.02,
            feature_dim: 8,
            feature_noise: 0.5,
            seed: 1,
        })
        .unwrap();
        let split = ClassSplit::new(vec![0, 1, 2], vec![3], vec![4, 5]).unwrap();
        let cfg = TrainConfig {
            n_way: 3,
            k_shot: 2,
            r_query: 3,
            epochs_per_stage: epochs,
            hidden_dim: 8,
            embed_dim: 4,
            curriculum: CompetenceConfig::new(0.1, 2.0, epochs.max(1)).unwrap(),
            validation_interval: 5,
            validation_tasks: 4,
            ..TrainConfig::default()
        };
        (graph, split, cfg)
    }

    #[test]
    fn zero_epochs_leave_params_alone() {
        let (g, s, cfg) = setup(0);
        let p0 = cfg.init_params(g.feature_dim());
        let state = train_stage_one(&g, &s, &cfg, p0.clone()).unwrap();
        assert_eq!(state.params, p0);
        assert!(state.log.is_empty());
    }

    #[test]
    fn validation_disabled_with_one_class() {
        // the split above has a single validation class
        let (g, s, cfg) = setup(10);
        let state = train(&g, &s, &cfg).unwrap();
        assert!(state.best_val_accuracy.is_none());
        assert_eq!(state.best_params, state.params);
        assert!(state.log.iter().all(|r| r.val_loss.is_none()));
    }

    #[test]
    fn fomaml_requires_logit_width() {
        let (g, s, mut cfg) = setup(2);
        cfg.meta.learner = LearnerKind::Fomaml;
        assert!(matches!(train(&g, &s, &cfg), Err(CptError::Config(_))));
        cfg.embed_dim = cfg.n_way;
        let state = train(&g, &s, &cfg).unwrap();
        assert_eq!(state.log.len(), 4);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn too_small_base_pool_fails_early() {
        let (g, _, cfg) = setup(3);
        let split = ClassSplit::new(vec![0, 1], vec![2, 3], vec![4, 5]).unwrap();
        assert!(matches!(train(&g, &split, &cfg), Err(CptError::Config(_))));
    }

    #[test]
    fn metric_log_round_trips() {
        let (g, _, mut cfg) = setup(6);
        let split = ClassSplit::new(vec![0, 1, 2], vec![3, 4], vec![5]).unwrap();
        cfg.n_way = 2;
        let state = train(&g, &split, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_metric_log(&state.log, &path).unwrap();
        assert_eq!(read_metric_log(&path).unwrap(), state.log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,stage,beta,train_loss,val_loss,val_accuracy\n"));
    }
}
