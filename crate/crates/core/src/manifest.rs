//! Experiment manifests: JSON files describing the data, the class split,
//! training and evaluation settings.
//!
//! Omitted fields take defaults. Resolution fills in every field, so a
//! resolved manifest written next to a run's outputs is enough to
//! reproduce that run. Sub-seeds (`train.seed`, `data.sbm.seed`) default
//! to the root `seed`, and `train.curriculum.max_iter` defaults to
//! `train.epochs_per_stage`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data_io::{generate_sbm, load_graph_detailed, DatasetPaths, SbmSpec};
use crate::error::{CptError, Result};
use crate::eval::DEFAULT_DEGREE_BINS;
use crate::graph::{split_classes, ClassSplit, Graph};
use crate::rng::{self, SeedTree};
use crate::trainer::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Sbm(SbmSpec),
    Files(DatasetPaths),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub base: usize,
    pub validation: usize,
    pub novel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub n_way: usize,
    pub k_shot: usize,
}

/// Which parameters a finished run is meta-tested with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    /// Parameters after the last training epoch.
    #[default]
    Final,
    /// Parameters at the best validation accuracy.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Episodes per evaluation repetition.
    pub num_tasks: usize,
    /// Independent repetitions, each with its own task stream.
    pub repeats: usize,
    /// Episode shapes to train and test; empty means the training shape.
    pub shapes: Vec<ShapeSpec>,
    /// Lower bounds of the degree bins; `None` skips the degree study.
    pub degree_bins: Option<Vec<usize>>,
    pub checkpoint: CheckpointChoice,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            num_tasks: 100,
            repeats: 10,
            shapes: Vec::new(),
            degree_bins: Some(DEFAULT_DEGREE_BINS.to_vec()),
            checkpoint: CheckpointChoice::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    /// Training seeds per cell: `train.seed`, `train.seed + 1`, ...
    #[serde(default = "five")]
    pub num_seeds: usize,
    pub data: DataSource,
    pub split: SplitCounts,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "cpt_only")]
    pub variants: Vec<Variant>,
    /// Upper bound on concurrently executing runs.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn five() -> usize {
    5
}

fn one() -> usize {
    1
}

fn cpt_only() -> Vec<Variant> {
    vec![Variant::Cpt]
}

/// A `key.path=value` override. Values are parsed as JSON, falling back to
/// a plain string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = CptError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CptError::Config(format!("override {s:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self {
            key: key.trim().to_string(),
            value,
        })
    }
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_path_with(path, &[], None)
    }

    /// Reads a manifest, applies overrides and an optional root-seed
    /// override, and resolves defaults. Relative dataset paths are taken
    /// relative to the manifest's directory and stored as absolute paths.
    pub fn from_path_with(path: &Path, overrides: &[Override], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CptError::io(format!("reading manifest {}", path.display()), e))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| CptError::Config(format!("{}: {e}", path.display())))?;
        let mut manifest = Self::from_value_with(raw, overrides, seed)?;
        if let DataSource::Files(paths) = &mut manifest.data {
            // Absolute, so a manifest saved into a run directory still
            // points at the data.
            let base = std::path::absolute(path)
                .map_err(|e| CptError::io(format!("resolving {}", path.display()), e))?;
            let base = base.parent().unwrap_or(Path::new("/"));
            for p in [&mut paths.edges, &mut paths.features, &mut paths.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(manifest)
    }

    pub fn from_value_with(mut raw: Value, overrides: &[Override], seed: Option<u64>) -> Result<Self> {
        if !overrides.is_empty() {
            let known = serde_json::to_value(resolve(raw.clone())?)
                .map_err(|e| CptError::Internal(e.to_string()))?;
            for o in overrides {
                if lookup(&known, &o.key).is_none() {
                    return Err(CptError::Config(format!(
                        "override key {:?} does not name a manifest field",
                        o.key
                    )));
                }
                set_path(&mut raw, &o.key, o.value.clone())?;
            }
        }
        if let Some(s) = seed {
            set_path(&mut raw, "seed", Value::from(s))?;
            remove_path(&mut raw, "train.seed");
            remove_path(&mut raw, "data.sbm.seed");
        }
        resolve(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| CptError::io(format!("writing {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(CptError::Config("manifest lists no variants".into()));
        }
        if self.jobs == 0 {
            return Err(CptError::Config("jobs must be at least 1".into()));
        }
        if let DataSource::Sbm(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Builds or loads the graph.
    pub fn load_graph(&self) -> Result<Graph> {
        match &self.data {
            DataSource::Sbm(spec) => generate_sbm(spec),
            DataSource::Files(paths) => {
                let loaded = load_graph_detailed(&paths.edges, &paths.features, &paths.labels)?;
                Ok(loaded.graph)
            }
        }
    }

    /// Class split drawn from the root seed's split stream.
    pub fn class_split(&self, graph: &Graph) -> Result<ClassSplit> {
        let mut rng = SeedTree::new(self.seed).stream(rng::SPLIT, 0);
        let c = self.split;
        split_classes(graph, (c.base, c.validation, c.novel), &mut rng)
    }

    /// Root of the meta-test seeds; independent of the training seed so all
    /// runs face the same test episodes.
    pub fn eval_seed(&self, repeat: usize) -> u64 {
        SeedTree::new(self.seed).seed(rng::EVAL, repeat as u64)
    }

    pub fn shapes(&self) -> Vec<ShapeSpec> {
        if self.eval.shapes.is_empty() {
            vec![ShapeSpec {
                n_way: self.train.n_way,
                k_shot: self.train.k_shot,
            }]
        } else {
            self.eval.shapes.clone()
        }
    }
}

fn resolve(mut raw: Value) -> Result<Manifest> {
    let root = raw.get("seed").and_then(Value::as_u64).unwrap_or(0);
    if lookup(&raw, "train.seed").is_none() {
        set_path(&mut raw, "train.seed", Value::from(root))?;
    }
    if lookup(&raw, "data.sbm").is_some() && lookup(&raw, "data.sbm.seed").is_none() {
        set_path(&mut raw, "data.sbm.seed", Value::from(root))?;
    }
    if lookup(&raw, "train.curriculum.max_iter").is_none() {
        let t = lookup(&raw, "train.epochs_per_stage")
            .and_then(Value::as_u64)
            .unwrap_or(TrainConfig::default().epochs_per_stage as u64);
        set_path(&mut raw, "train.curriculum.max_iter", Value::from(t.max(1)))?;
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| CptError::Config(format!("manifest: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

fn lookup<'v>(value: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(value, |v, key| v.get(key))
}

fn set_path(value: &mut Value, path: &str, new: Value) -> Result<()> {
    let mut cur = value;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CptError::Config(format!("{path}: {key} is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn remove_path(value: &mut Value, path: &str) {
    if let Some((parent, key)) = path.rsplit_once('.') {
        let mut cur = Some(value);
        for k in parent.split('.') {
            cur = cur.and_then(|v| v.get_mut(k));
        }
        if let Some(Value::Object(obj)) = cur {
            obj.remove(key);
        }
    }
}

/// Output root used when the command line gives none.
pub const OUT_ROOT_ENV: &str = "CPT_OUT_ROOT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "seed": 7,
            "data": {"sbm": {"num_classes": 6, "nodes_per_class": 10, "intra_p": 0.3,
                              "inter_p": 0.01, "feature_dim": 6}},
            "split": {"base": 3, "validation": 1, "novel": 2},
            "train": {"n_way": 2, "epochs_per_stage": 40}
        })
    }

    #[test]
    fn defaults_are_resolved() {
        let m = Manifest::from_value_with(minimal(), &[], None).unwrap();
        assert_eq!(m.train.seed, 7);
        assert_eq!(m.train.curriculum.max_iter, 40);
        assert_eq!(m.train.weight_decay, 0.0005);
        assert_eq!(m.num_seeds, 5);
        match &m.data {
            DataSource::Sbm(s) => assert_eq!((s.seed, s.feature_noise), (7, 1.0)),
            _ => panic!(),
        }
        // resolution is idempotent
        let again = Manifest::from_value_with(serde_json::to_value(&m).unwrap(), &[], None).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn overrides_and_seed() {
        let o: Override = "train.meta.alpha2=0.03".parse().unwrap();
        let v: Override = "variants=[\"cpt\",\"no_ss\"]".parse().unwrap();
        let m = Manifest::from_value_with(minimal(), &[o, v], Some(11)).unwrap();
        assert_eq!(m.train.meta.alpha2, 0.03);
        assert_eq!(m.variants, vec![Variant::Cpt, Variant::NoSs]);
        assert_eq!((m.seed, m.train.seed), (11, 11));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad: Override = "train.learning_rate=0.1".parse().unwrap();
        assert!(matches!(
            Manifest::from_value_with(minimal(), &[bad], None),
            Err(CptError::Config(_))
        ));
        let mut raw = minimal();
        raw["train"]["epochz"] = json!(3);
        assert!(Manifest::from_value_with(raw, &[], None).is_err());
        assert!("no-equals".parse::<Override>().is_err());
    }
}
