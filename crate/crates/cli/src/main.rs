//! `cpt`: train, evaluate and ablate competence-progressive meta-learners.
//!
//! Standard output is line-oriented `key=value` or tab-separated text.
//! Failures print one `error: <kind>: <message>` line to standard error
//! and exit with 2 for usage errors or 1 for runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpt_core::data_io::{EDGE_FILE, FEATURE_FILE, LABEL_FILE};
use cpt_core::encoder::{load_checkpoint, FLAG_LOGIT_HEAD};
use cpt_core::experiment::{run_manifest, run_one, write_results_csv, write_run_dir, RunSpec};
use cpt_core::gradcheck::{check_random_instances, DEFAULT_EPSILON};
use cpt_core::manifest::{default_out_root, Override, ShapeSpec};
use cpt_core::rng::seeded;
use cpt_core::{
    degree_binned_accuracy, generate_sbm, meta_test, save_graph, CptError, DatasetPaths,
    EpisodeShape, LearnerKind, Manifest, SbmSpec, Variant,
};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cpt", version, about = "Competence-progressive few-shot node classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Root seed; replaces every seed in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest override, e.g. `--set train.meta.alpha2=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and meta-test it.
    Train {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Output directory; defaults to `$CPT_OUT_ROOT/<run name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Variant to train; defaults to the first one in the manifest.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Meta-test a saved checkpoint on the novel classes.
    Eval {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "k_shot")]
        n_way: Option<usize>,
        #[arg(long, requires = "n_way")]
        k_shot: Option<usize>,
        /// Episodes per repetition; defaults to `eval.num_tasks`.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Train and test every variant over shared seeds.
    Ablate {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum number of concurrent runs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Restrict to these variants (repeatable); defaults to all four.
        #[arg(long)]
        variant: Vec<Variant>,
    },
    /// Write a stochastic block model graph in the dataset file format.
    GenSbm {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        intra: f64,
        #[arg(long)]
        inter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Feature width; defaults to the number of classes.
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random episodes.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "prototypical")]
        learner: LearnerKind,
        /// Finite-difference step.
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Print the class split a manifest produces.
    Split {
        #[command(flatten)]
        manifest: ManifestArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(CptError),
}

impl From<CptError> for Failure {
    fn from(e: CptError) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train {
            manifest,
            out,
            variant,
        } => train(&load_manifest(&manifest)?, out, variant),
        Command::Eval {
            manifest,
            checkpoint,
            n_way,
            k_shot,
            tasks,
        } => {
            let shape = n_way.zip(k_shot).map(|(n_way, k_shot)| ShapeSpec { n_way, k_shot });
            eval(&load_manifest(&manifest)?, &checkpoint, shape, tasks)
        }
        Command::Ablate {
            manifest,
            out,
            jobs,
            variant,
        } => ablate(load_manifest(&manifest)?, out, jobs, variant),
        Command::GenSbm {
            classes,
            per_class,
            intra,
            inter,
            seed,
            feature_dim,
            noise,
            out,
        } => {
            let spec = SbmSpec {
                num_classes: classes,
                nodes_per_class: per_class,
                intra_p: intra,
                inter_p: inter,
                feature_dim: feature_dim.unwrap_or(classes),
                feature_noise: noise,
                seed,
            };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let out = out.unwrap_or_else(|| {
                default_out_root().join(format!("sbm-{classes}x{per_class}-seed{seed}"))
            });
            gen_sbm(&spec, &out)
        }
        Command::GradCheck {
            trials,
            seed,
            learner,
            epsilon,
        } => grad_check(trials, seed, learner, epsilon),
        Command::Split { manifest } => split(&load_manifest(&manifest)?),
    }
}

/// Unreadable or invalid manifests and bad overrides are usage errors.
fn load_manifest(args: &ManifestArgs) -> std::result::Result<Manifest, Failure> {
    let overrides = args
        .overrides
        .iter()
        .map(|s| s.parse::<Override>())
        .collect::<cpt_core::Result<Vec<_>>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Manifest::from_path_with(&args.manifest, &overrides, args.seed)
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)
        .map_err(|e| CptError::io(format!("creating {}", dir.display()), e).into())
}

fn train(manifest: &Manifest, out: Option<PathBuf>, variant: Option<Variant>) -> CliResult {
    let spec = RunSpec {
        variant: variant.unwrap_or(manifest.variants[0]),
        shape: manifest.shapes()[0],
        seed: manifest.train.seed,
    };
    let single = run_manifest(manifest, &spec);
    let graph = single.load_graph()?;
    let split = single.class_split(&graph)?;
    let record = run_one(&graph, &split, &single, &spec)?;
    let out = out.unwrap_or_else(|| default_out_root().join(spec.dir_name()));
    write_run_dir(&out, &single, &record)?;
    write_results_csv(&out.join("results.csv"), std::slice::from_ref(&record))?;
    println!("run={}", spec.dir_name());
    println!("epochs={}", record.log.len());
    if let Some(best) = record.best_val_accuracy {
        println!("best_val_accuracy={best:.6}");
    }
    println!("mean_accuracy={:.6}", record.report.mean_accuracy);
    println!("std_dev={:.6}", record.report.std_dev);
    println!("num_tasks={}", record.report.num_tasks);
    println!("out={}", out.display());
    Ok(())
}

fn eval(manifest: &Manifest, checkpoint: &Path, shape: Option<ShapeSpec>, tasks: Option<usize>) -> CliResult {
    let (params, flags) = load_checkpoint(checkpoint)?;
    let mut meta = manifest.train.meta.clone();
    meta.learner = if flags & FLAG_LOGIT_HEAD != 0 {
        LearnerKind::Fomaml
    } else {
        LearnerKind::Prototypical
    };
    let graph = manifest.load_graph()?;
    if graph.feature_dim() != params.feature_dim() {
        return Err(CptError::Consistency(format!(
            "checkpoint expects {} features, graph has {}",
            params.feature_dim(),
            graph.feature_dim()
        ))
        .into());
    }
    let split = manifest.class_split(&graph)?;
    let num_tasks = tasks.unwrap_or(manifest.eval.num_tasks);
    let shapes = shape.map_or_else(|| manifest.shapes(), |s| vec![s]);
    for s in shapes {
        if meta.learner == LearnerKind::Fomaml && s.n_way > params.embed_dim() {
            return Err(CptError::Config(format!(
                "checkpoint has {} logits, cannot test {}-way episodes",
                params.embed_dim(),
                s.n_way
            ))
            .into());
        }
        let shape = EpisodeShape::new(s.n_way, s.k_shot, manifest.train.r_query);
        let mut per_task = Vec::new();
        for r in 0..manifest.eval.repeats.max(1) {
            let report = meta_test(&params, &graph, &split.novel, shape, num_tasks, manifest.eval_seed(r), &meta)?;
            per_task.extend(report.per_task);
        }
        let (mean, std) = cpt_core::eval::mean_std(&per_task);
        println!(
            "n_way={} k_shot={} learner={} mean_accuracy={mean:.6} std_dev={std:.6} num_tasks={}",
            s.n_way,
            s.k_shot,
            meta.learner.name(),
            per_task.len()
        );
        if let Some(bins) = &manifest.eval.degree_bins {
            let table = degree_binned_accuracy(
                &params,
                &graph,
                &split.novel,
                shape,
                num_tasks,
                bins,
                manifest.eval_seed(0),
                &meta,
            )?;
            for b in table {
                let acc = b.accuracy().map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
                println!(
                    "degree n_way={} bin={} correct={} total={} accuracy={acc}",
                    s.n_way,
                    b.label(),
                    b.correct,
                    b.total
                );
            }
        }
    }
    Ok(())
}

fn ablate(mut manifest: Manifest, out: Option<PathBuf>, jobs: Option<usize>, variants: Vec<Variant>) -> CliResult {
    manifest.variants = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        manifest.jobs = j;
    }
    let out = out.unwrap_or_else(|| default_out_root().join(format!("ablate-seed{}", manifest.seed)));
    create_dir(&out)?;
    let results = cpt_core::run_experiment(&manifest, Some(&out))?;
    println!("variant\tlearner\tn_way\tk_shot\truns\tmean_accuracy\tstd_dev\tfailures");
    for s in &results.summary {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            s.variant,
            s.learner.name(),
            s.shape.n_way,
            s.shape.k_shot,
            s.runs,
            s.mean_accuracy,
            s.std_dev,
            s.failures
        );
    }
    for f in &results.failures {
        log::error!("{}: {}", f.spec.dir_name(), f.error);
    }
    if results.runs.is_empty() {
        return Err(CptError::Numerical(format!(
            "all {} runs failed; see {}",
            results.failures.len(),
            out.join("failures.csv").display()
        ))
        .into());
    }
    Ok(())
}

fn gen_sbm(spec: &SbmSpec, out: &Path) -> CliResult {
    let graph = generate_sbm(spec)?;
    create_dir(out)?;
    save_graph(&graph, &DatasetPaths::in_dir(out))?;
    println!("nodes={}", graph.num_nodes());
    println!("edges={}", graph.num_edges());
    println!("features={}", graph.feature_dim());
    for name in [EDGE_FILE, FEATURE_FILE, LABEL_FILE] {
        println!("file={}", out.join(name).display());
    }
    Ok(())
}

fn grad_check(trials: usize, seed: u64, learner: LearnerKind, epsilon: f64) -> CliResult {
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let reports = check_random_instances(trials, learner, epsilon, &mut seeded(seed))?;
    let mut worst: f64 = 0.0;
    for (i, r) in reports.iter().enumerate() {
        println!(
            "trial={i} max_relative_error={:.3e} checked={} skipped={}",
            r.max_relative_error, r.checked, r.skipped
        );
        worst = worst.max(r.max_relative_error);
    }
    println!("max_relative_error={worst:.3e}");
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(CptError::Numerical(format!(
            "max relative error {worst:.3e} is not below {GRAD_TOLERANCE:e}"
        ))
        .into())
    }
}

fn split(manifest: &Manifest) -> CliResult {
    let graph = manifest.load_graph()?;
    let split = manifest.class_split(&graph)?;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    println!("base={}", join(&split.base));
    println!("validation={}", join(&split.validation));
    println!("novel={}", join(&split.novel));
    Ok(())
}
