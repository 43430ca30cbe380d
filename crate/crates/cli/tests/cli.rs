use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpt_core::{load_graph, DatasetPaths, Manifest};

fn cpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpt"))
        .args(args)
        .current_dir(dir)
        .env("CPT_OUT_ROOT", dir.join("default-out"))
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

/// Temp dir with a small SBM dataset under `data/` and a manifest `m.json`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = cpt(
        dir.path(),
        &["gen-sbm", "--classes", "8", "--per-class", "20", "--intra", "0.3", "--inter", "0.01", "--seed", "7", "--out", "data"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = r#"{
        "seed": 2,
        "num_seeds": 2,
        "data": {"files": {"edges": "data/edges.txt", "features": "data/features.bin", "labels": "data/labels.txt"}},
        "split": {"base": 3, "validation": 2, "novel": 3},
        "train": {"n_way": 3, "k_shot": 2, "r_query": 4, "epochs_per_stage": 8, "hidden_dim": 6,
                  "embed_dim": 4, "validation_interval": 4, "validation_tasks": 3},
        "eval": {"num_tasks": 6, "repeats": 2}
    }"#;
    fs::write(dir.path().join("m.json"), manifest).unwrap();
    dir
}

#[test]
fn gen_sbm_writes_the_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpt(
        dir.path(),
        &["gen-sbm", "--classes", "12", "--per-class", "50", "--intra", "0.2", "--inter", "0.01", "--seed", "7"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("default-out/sbm-12x50-seed7");
    let paths = DatasetPaths::in_dir(&out);
    assert!(paths.exist());
    let g = load_graph(&paths.edges, &paths.features, &paths.labels).unwrap();
    let text = stdout(&o);
    assert_eq!(g.num_nodes(), 600);
    assert_eq!(value(&text, "nodes"), "600");
    assert_eq!(value(&text, "edges"), g.num_edges().to_string());
    assert_eq!(g.classes().len(), 12);
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = workspace();
    let o = cpt(dir.path(), &["train", "--manifest", "m.json", "--out", "runs/a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("runs/a");
    for f in ["manifest.json", "metrics.csv", "best.ckpt", "final.ckpt", "results.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 16);

    // The saved manifest alone reproduces the run, from any directory.
    let elsewhere = tempfile::tempdir().unwrap();
    let saved = run.join("manifest.json");
    let o2 = cpt(elsewhere.path(), &["train", "--manifest", saved.to_str().unwrap(), "--out", "b"]);
    assert!(o2.status.success(), "{}", stderr(&o2));
    assert_eq!(
        value(&stdout(&o), "mean_accuracy"),
        value(&stdout(&o2), "mean_accuracy")
    );
    assert_eq!(
        fs::read(run.join("final.ckpt")).unwrap(),
        fs::read(elsewhere.path().join("b/final.ckpt")).unwrap()
    );
}

#[test]
fn eval_matches_training_report() {
    let dir = workspace();
    let o = cpt(dir.path(), &["train", "--manifest", "m.json", "--out", "runs/a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = cpt(dir.path(), &["eval", "--manifest", "m.json", "--checkpoint", "runs/a/final.ckpt"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let line = stdout(&e).lines().next().unwrap().to_string();
    let train_out = stdout(&o);
    let trained = value(&train_out, "mean_accuracy");
    assert!(line.contains(&format!("mean_accuracy={trained}")), "{line} vs {trained}");
    assert!(line.contains("num_tasks=12"));
}

#[test]
fn seed_flag_reaches_every_seed() {
    let dir = workspace();
    let o = cpt(dir.path(), &["train", "--manifest", "m.json", "--seed", "11", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = Manifest::from_path(&dir.path().join("r/manifest.json")).unwrap();
    assert_eq!(m.seed, 11);
    assert_eq!(m.train.seed, 11);
    assert_eq!(value(&stdout(&o), "run"), "cpt-3way-2shot-seed11");
}

#[test]
fn overrides_apply_and_are_recorded() {
    let dir = workspace();
    let o = cpt(
        dir.path(),
        &["train", "--manifest", "m.json", "--set", "train.epochs_per_stage=3", "--set", "train.meta.alpha2=0.01", "--variant", "no_fs", "--out", "r"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = Manifest::from_path(&dir.path().join("r/manifest.json")).unwrap();
    assert_eq!(m.train.epochs_per_stage, 3);
    assert_eq!(m.train.meta.alpha2, 0.01);
    assert_eq!(m.variants, vec![cpt_core::Variant::NoFs]);
    assert_eq!(value(&stdout(&o), "epochs"), "6");
}

#[test]
fn ablate_is_independent_of_job_count() {
    let dir = workspace();
    let one = cpt(dir.path(), &["ablate", "--manifest", "m.json", "--out", "a1", "--jobs", "1"]);
    let three = cpt(dir.path(), &["ablate", "--manifest", "m.json", "--out", "a3", "--jobs", "3"]);
    assert!(one.status.success(), "{}", stderr(&one));
    assert!(three.status.success(), "{}", stderr(&three));
    assert_eq!(stdout(&one), stdout(&three));
    let results = fs::read_to_string(dir.path().join("a1/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4 * 2);
    assert_eq!(results, fs::read_to_string(dir.path().join("a3/results.csv")).unwrap());
    assert_eq!(stdout(&one).lines().count(), 1 + 4);
    assert_eq!(fs::read_dir(dir.path().join("a1/runs")).unwrap().count(), 8);
}

#[test]
fn variant_alone_matches_its_ablation_rows() {
    let dir = workspace();
    let all = cpt(dir.path(), &["ablate", "--manifest", "m.json", "--out", "all"]);
    let alone = cpt(dir.path(), &["ablate", "--manifest", "m.json", "--out", "alone", "--variant", "no_ss"]);
    assert!(all.status.success() && alone.status.success());
    let rows = |p: &str| -> Vec<String> {
        fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("no_ss,"))
            .map(String::from)
            .collect()
    };
    assert_eq!(rows("all/results.csv"), rows("alone/results.csv"));
    assert_eq!(rows("alone/results.csv").len(), 2);
}

#[test]
fn split_is_stable_and_seeded() {
    let dir = workspace();
    let a = stdout(&cpt(dir.path(), &["split", "--manifest", "m.json"]));
    let b = stdout(&cpt(dir.path(), &["split", "--manifest", "m.json"]));
    assert_eq!(a, b);
    let mut all: Vec<usize> = ["base", "validation", "novel"]
        .iter()
        .flat_map(|k| value(&a, k).split(',').map(|c| c.parse::<usize>().unwrap()).collect::<Vec<_>>())
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
}

#[test]
fn grad_check_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpt(dir.path(), &["grad-check", "--trials", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("trial=")).count(), 20);
    let worst: f64 = value(&text, "max_relative_error").parse().unwrap();
    assert!(worst < 1e-4);

    // A step far too large for the curvature fails the tolerance.
    let bad = cpt(dir.path(), &["grad-check", "--trials", "3", "--epsilon", "0.5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).starts_with("error: numerical: "));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = workspace();
    for args in [
        vec!["frobnicate"],
        vec!["train"],
        vec!["train", "--manifest", "missing.json"],
        vec!["train", "--manifest", "m.json", "--bogus"],
        vec!["train", "--manifest", "m.json", "--set", "train.nonsense=1"],
        vec!["train", "--manifest", "m.json", "--set", "no-equals-sign"],
        vec!["ablate", "--manifest", "m.json", "--variant", "sideways"],
    ] {
        let o = cpt(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("error: usage: "), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    fs::write(dir.path().join("bad.json"), "{\"split\": 3}").unwrap();
    let o = cpt(dir.path(), &["split", "--manifest", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = workspace();
    let o = cpt(dir.path(), &["eval", "--manifest", "m.json", "--checkpoint", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: io: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    // Too few novel classes for a 5-way episode is reported, not a panic.
    let o = cpt(dir.path(), &["train", "--manifest", "m.json", "--set", "train.n_way=5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
}

#[test]
fn default_output_root_comes_from_environment() {
    let dir = workspace();
    let o = cpt(dir.path(), &["train", "--manifest", "m.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("default-out/cpt-3way-2shot-seed2/final.ckpt").exists());
}
