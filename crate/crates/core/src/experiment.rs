//! Grid runner: every (shape, variant, seed) cell is trained, meta-tested
//! on the novel classes, and written to disk.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! manifest.json        resolved manifest
//! results.csv          one row per successful run
//! per_task.csv         every meta-test episode accuracy
//! summary.csv          per (variant, shape): mean and std over seeds
//! degree.csv           degree-binned accuracy per run (if enabled)
//! failures.csv         failed cells, if any
//! runs/<run>/          metrics.csv, best.ckpt, final.ckpt, manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::encoder::{save_checkpoint, EncoderParams, FLAG_LOGIT_HEAD};
use crate::error::{CptError, Result};
use crate::eval::{degree_binned_accuracy, mean_std, meta_test, DegreeBin, EvalReport};
use crate::graph::{ClassSplit, Graph};
use crate::manifest::{CheckpointChoice, Manifest, ShapeSpec};
use crate::meta::LearnerKind;
use crate::sampler::EpisodeShape;
use crate::trainer::{save_metric_log, train, EpochRecord, TrainConfig, Variant};

/// One cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub variant: Variant,
    pub shape: ShapeSpec,
    pub seed: u64,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!(
            "{}-{}way-{}shot-seed{}",
            self.variant, self.shape.n_way, self.shape.k_shot, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub learner: LearnerKind,
    pub report: EvalReport,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<EpochRecord>,
    pub best_params: EncoderParams,
    pub final_params: EncoderParams,
    pub degree: Option<Vec<DegreeBin>>,
}

#[derive(Debug, Clone)]
pub struct RunFailure {
    pub spec: RunSpec,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub learner: LearnerKind,
    pub shape: ShapeSpec,
    pub runs: usize,
    /// Mean over runs of each run's mean accuracy.
    pub mean_accuracy: f64,
    /// Population standard deviation over runs.
    pub std_dev: f64,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResults {
    pub fn summary_for(&self, variant: Variant, shape: ShapeSpec) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.shape == shape)
    }
}

/// Grid cells in output order: shape, then variant, then seed.
pub fn run_specs(manifest: &Manifest) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for shape in manifest.shapes() {
        for &variant in &manifest.variants {
            for i in 0..manifest.num_seeds {
                specs.push(RunSpec {
                    variant,
                    shape,
                    seed: manifest.train.seed + i as u64,
                });
            }
        }
    }
    specs
}

/// Training config of one cell.
pub fn run_config(manifest: &Manifest, spec: &RunSpec) -> TrainConfig {
    let mut cfg = manifest.train.clone();
    cfg.variant = spec.variant;
    cfg.n_way = spec.shape.n_way;
    cfg.k_shot = spec.shape.k_shot;
    cfg.seed = spec.seed;
    if cfg.meta.learner == LearnerKind::Fomaml {
        cfg.embed_dim = cfg.n_way;
    }
    cfg
}

/// Manifest that reproduces exactly one cell.
pub fn run_manifest(manifest: &Manifest, spec: &RunSpec) -> Manifest {
    let mut m = manifest.clone();
    m.train = run_config(manifest, spec);
    m.variants = vec![spec.variant];
    m.eval.shapes = vec![spec.shape];
    m.num_seeds = 1;
    m.jobs = 1;
    m
}

/// Trains one cell and meta-tests the checkpoint named by `eval.checkpoint`.
pub fn run_one(
    graph: &Graph,
    split: &ClassSplit,
    manifest: &Manifest,
    spec: &RunSpec,
) -> Result<RunRecord> {
    let cfg = run_config(manifest, spec);
    let state = train(graph, split, &cfg)?;
    let shape = EpisodeShape::new(cfg.n_way, cfg.k_shot, cfg.r_query);
    let tested = match manifest.eval.checkpoint {
        CheckpointChoice::Final => &state.params,
        CheckpointChoice::Best => &state.best_params,
    };
    let mut per_task = Vec::new();
    for r in 0..manifest.eval.repeats.max(1) {
        let rep = meta_test(
            tested,
            graph,
            &split.novel,
            shape,
            manifest.eval.num_tasks,
            manifest.eval_seed(r),
            &cfg.meta,
        )?;
        per_task.extend(rep.per_task);
    }
    let report = EvalReport::from_accuracies(per_task, shape, manifest.eval_seed(0));
    let degree = match &manifest.eval.degree_bins {
        Some(bins) => Some(degree_binned_accuracy(
            tested,
            graph,
            &split.novel,
            shape,
            manifest.eval.num_tasks,
            bins,
            manifest.eval_seed(0),
            &cfg.meta,
        )?),
        None => None,
    };
    Ok(RunRecord {
        spec: *spec,
        learner: cfg.meta.learner,
        report,
        best_val_accuracy: state.best_val_accuracy,
        log: state.log,
        best_params: state.best_params,
        final_params: state.params,
        degree,
    })
}

/// Runs every cell of the manifest; a failing cell is recorded and the
/// rest continue. With `out_dir`, all artifacts are written there.
pub fn run_experiment(manifest: &Manifest, out_dir: Option<&Path>) -> Result<ExperimentResults> {
    manifest.validate()?;
    let graph = manifest.load_graph()?;
    let split = manifest.class_split(&graph)?;
    let specs = run_specs(manifest);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.jobs)
        .build()
        .map_err(|e| CptError::Internal(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunRecord>> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let record = run_one(&graph, &split, manifest, spec)?;
                if let Some(dir) = out_dir {
                    write_run_dir(&dir.join("runs").join(spec.dir_name()), manifest, &record)?;
                }
                log::info!(
                    "{}: mean accuracy {:.4}",
                    spec.dir_name(),
                    record.report.mean_accuracy
                );
                Ok(record)
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (spec, outcome) in specs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => {
                log::error!("{}: {e}", spec.dir_name());
                failures.push(RunFailure {
                    spec: *spec,
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = summarize(manifest, &runs, &failures);
    let results = ExperimentResults {
        runs,
        failures,
        summary,
    };
    if let Some(dir) = out_dir {
        write_experiment(dir, manifest, &results)?;
    }
    Ok(results)
}

fn summarize(manifest: &Manifest, runs: &[RunRecord], failures: &[RunFailure]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for shape in manifest.shapes() {
        for &variant in &manifest.variants {
            let matching = |s: &RunSpec| s.variant == variant && s.shape == shape;
            let means: Vec<f64> = runs
                .iter()
                .filter(|r| matching(&r.spec))
                .map(|r| r.report.mean_accuracy)
                .collect();
            let (mean_accuracy, std_dev) = mean_std(&means);
            rows.push(SummaryRow {
                variant,
                learner: manifest.train.meta.learner,
                shape,
                runs: means.len(),
                mean_accuracy,
                std_dev,
                failures: failures.iter().filter(|f| matching(&f.spec)).count(),
            });
        }
    }
    rows
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CptError::io(format!("creating {}", dir.display()), e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CptError::Input(format!("{}: {e}", path.display())))
}

fn csv_err(e: impl std::fmt::Display) -> CptError {
    CptError::Internal(format!("csv: {e}"))
}

pub fn write_run_dir(dir: &Path, manifest: &Manifest, record: &RunRecord) -> Result<()> {
    ensure_dir(dir)?;
    run_manifest(manifest, &record.spec).save(&dir.join("manifest.json"))?;
    save_metric_log(&record.log, &dir.join("metrics.csv"))?;
    let flags = match record.learner {
        LearnerKind::Fomaml => FLAG_LOGIT_HEAD,
        LearnerKind::Prototypical => 0,
    };
    save_checkpoint(&record.best_params, flags, &dir.join("best.ckpt"))?;
    save_checkpoint(&record.final_params, flags, &dir.join("final.ckpt"))
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "variant",
    "learner",
    "n_way",
    "k_shot",
    "seed",
    "mean_accuracy",
    "std_dev",
    "num_tasks",
];

pub fn write_results_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULT_COLUMNS).map_err(csv_err)?;
    for r in runs {
        w.write_record([
            r.spec.variant.to_string(),
            r.learner.name().to_string(),
            r.spec.shape.n_way.to_string(),
            r.spec.shape.k_shot.to_string(),
            r.spec.seed.to_string(),
            r.report.mean_accuracy.to_string(),
            r.report.std_dev.to_string(),
            r.report.num_tasks.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CptError::io("flushing results", e))
}

fn write_experiment(dir: &Path, manifest: &Manifest, results: &ExperimentResults) -> Result<()> {
    ensure_dir(dir)?;
    manifest.save(&dir.join("manifest.json"))?;
    write_results_csv(&dir.join("results.csv"), &results.runs)?;

    let mut w = csv_writer(&dir.join("per_task.csv"))?;
    w.write_record(["variant", "n_way", "k_shot", "seed", "task", "accuracy"])
        .map_err(csv_err)?;
    for r in &results.runs {
        for (i, acc) in r.report.per_task.iter().enumerate() {
            w.write_record([
                r.spec.variant.to_string(),
                r.spec.shape.n_way.to_string(),
                r.spec.shape.k_shot.to_string(),
                r.spec.seed.to_string(),
                i.to_string(),
                acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CptError::io("flushing per-task results", e))?;

    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record([
        "variant",
        "learner",
        "n_way",
        "k_shot",
        "runs",
        "mean_accuracy",
        "std_dev",
        "failures",
    ])
    .map_err(csv_err)?;
    for s in &results.summary {
        w.write_record([
            s.variant.to_string(),
            s.learner.name().to_string(),
            s.shape.n_way.to_string(),
            s.shape.k_shot.to_string(),
            s.runs.to_string(),
            s.mean_accuracy.to_string(),
            s.std_dev.to_string(),
            s.failures.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CptError::io("flushing summary", e))?;

    if results.runs.iter().any(|r| r.degree.is_some()) {
        let mut w = csv_writer(&dir.join("degree.csv"))?;
        w.write_record(["variant", "n_way", "k_shot", "seed", "bin", "correct", "total", "accuracy"])
            .map_err(csv_err)?;
        for r in &results.runs {
            for b in r.degree.iter().flatten() {
                w.write_record([
                    r.spec.variant.to_string(),
                    r.spec.shape.n_way.to_string(),
                    r.spec.shape.k_shot.to_string(),
                    r.spec.seed.to_string(),
                    b.label(),
                    b.correct.to_string(),
                    b.total.to_string(),
                    b.accuracy().map(|a| a.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| CptError::io("flushing degree table", e))?;
    }

    let failures_path = dir.join("failures.csv");
    if results.failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        let mut w = csv_writer(&failures_path)?;
        w.write_record(["variant", "n_way", "k_shot", "seed", "error"])
            .map_err(csv_err)?;
        for f in &results.failures {
            w.write_record([
                f.spec.variant.to_string(),
                f.spec.shape.n_way.to_string(),
                f.spec.shape.k_shot.to_string(),
                f.spec.seed.to_string(),
                f.error.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| CptError::io("flushing failures", e))?;
    }
    Ok(())
}

/// Directory a run is written to inside an experiment directory.
pub fn run_dir(experiment_dir: &Path, spec: &RunSpec) -> PathBuf {
    experiment_dir.join("runs").join(spec.dir_name())
}
