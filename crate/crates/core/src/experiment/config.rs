use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{
    carve_validation, load_cifar10, load_idx, synth_dataset, Dataset, Splits, SynthSpec,
};
use crate::error::{Error, Result};
use crate::graph::Architecture;
use crate::memplan::PlannerOptions;
use crate::pruner::PruneConfig;
use crate::resources::{BudgetValue, ResourceBudget, ResourceModel, ResourceOptions};
use crate::train::TrainConfig;
use crate::zoo;

/// Environment variable that relocates relative dataset paths.
pub const DATA_DIR_ENV: &str = "DIFFPRUNE_DATA_DIR";

/// A complete, validated description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSource,
    pub data: DataConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub resources: ResourceConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// Either a model-spec file or one of the bundled specs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    pub path: Option<PathBuf>,
    pub builtin: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth {
        #[serde(default = "default_synth_train")]
        train: usize,
        #[serde(default = "default_synth_val")]
        val: usize,
        #[serde(default)]
        test: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default = "default_cifar_val")]
        val: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        classes: usize,
        val: usize,
    },
}

fn default_synth_train() -> usize {
    3000
}
fn default_synth_val() -> usize {
    1000
}
fn default_classes() -> usize {
    4
}
fn default_noise() -> f64 {
    SynthSpec::default().noise
}
fn default_cifar_val() -> usize {
    5000
}

/// Budgets per objective; a missing entry leaves that objective unconstrained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(
        default,
        deserialize_with = "budget_value",
        serialize_with = "budget_out"
    )]
    pub pmu: Option<BudgetValue>,
    #[serde(
        default,
        deserialize_with = "budget_value",
        serialize_with = "budget_out"
    )]
    pub size: Option<BudgetValue>,
    #[serde(
        default,
        deserialize_with = "budget_value",
        serialize_with = "budget_out"
    )]
    pub macs: Option<BudgetValue>,
}

fn budget_value<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<BudgetValue>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Text(String),
    }
    let v = match Raw::deserialize(d)? {
        Raw::Int(0) => return Err(serde::de::Error::custom("budget must be positive")),
        Raw::Int(n) => BudgetValue::Absolute(n),
        Raw::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
    };
    Ok(Some(v))
}

fn budget_out<S: serde::Serializer>(
    v: &Option<BudgetValue>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(BudgetValue::Absolute(n)) => s.serialize_u64(*n),
        Some(BudgetValue::Fraction(f)) => s.serialize_str(&format!("{}%", f * 100.0)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceConfig {
    pub activation_bytes: u64,
    pub count_batch_norm: bool,
    pub add_accumulate: bool,
    pub max_states: usize,
}

impl Default for ResourceConfig {
    fn default() -> Self {
        let o = ResourceOptions::default();
        ResourceConfig {
            activation_bytes: o.activation_bytes,
            count_batch_norm: o.count_batch_norm,
            add_accumulate: o.planner.add_accumulate,
            max_states: o.planner.max_states,
        }
    }
}

impl ResourceConfig {
    pub fn options(&self) -> ResourceOptions {
        ResourceOptions {
            activation_bytes: self.activation_bytes,
            count_batch_norm: self.count_batch_norm,
            pmu_mode: Default::default(),
            planner: PlannerOptions {
                add_accumulate: self.add_accumulate,
                max_states: self.max_states,
                ..Default::default()
            },
        }
    }
}

/// Grid for `sweep`: every pair of alpha ratio and pruning learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha_ratios: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alpha_ratios: vec![1.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0],
            lrs: vec![0.05, 0.1, 0.2],
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Relative paths are resolved against `base_dir`, except
    /// dataset paths, which use `DIFFPRUNE_DATA_DIR` when it is set.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let data_root =
            std::env::var_os(DATA_DIR_ENV).map_or_else(|| base_dir.to_path_buf(), PathBuf::from);
        let rebase = |p: &mut PathBuf, root: &Path| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        if let Some(p) = cfg.model.path.as_mut() {
            rebase(p, base_dir);
        }
        match &mut cfg.data {
            DataConfig::Synth { .. } => {}
            DataConfig::Cifar10 { dir, .. } => rebase(dir, &data_root),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels] {
                    rebase(p, &data_root);
                }
                for p in [test_images, test_labels].into_iter().flatten() {
                    rebase(p, &data_root);
                }
            }
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            rebase(p, base_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model.path, &self.model.builtin) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "model: give exactly one of `path` or `builtin`".into(),
                ))
            }
        }
        if let Some(b) = &self.model.builtin {
            zoo::builtin(b)
                .ok_or_else(|| Error::Config(format!("model: unknown builtin `{b}`")))?;
        }
        if let DataConfig::Synth { train, classes, .. } = self.data {
            if train == 0 {
                return Err(Error::Config(
                    "data: synthetic train size must be positive".into(),
                ));
            }
            if !(1..=crate::data::SYNTH_MAX_CLASSES).contains(&classes) {
                return Err(Error::Config(format!(
                    "data: synthetic classes must be 1..={}",
                    crate::data::SYNTH_MAX_CLASSES
                )));
            }
        }
        if self.resources.activation_bytes == 0 {
            return Err(Error::Config(
                "resources: activation_bytes must be positive".into(),
            ));
        }
        if self.sweep.alpha_ratios.is_empty() || self.sweep.lrs.is_empty() {
            return Err(Error::Config("sweep: grids must be non-empty".into()));
        }
        self.train.validate()?;
        self.prune.validate()
    }

    pub fn model_text(&self) -> Result<String> {
        match (&self.model.path, &self.model.builtin) {
            (Some(p), _) => fs::read_to_string(p).map_err(|e| Error::io(p, e)),
            (None, Some(b)) => Ok(zoo::builtin(b)
                .ok_or_else(|| Error::Config(format!("unknown builtin `{b}`")))?
                .to_string()),
            (None, None) => Err(Error::Config("no model given".into())),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::from_spec(&self.model_text()?)
    }

    /// Loads or generates the dataset splits.
    pub fn load_data(&self) -> Result<Splits> {
        match &self.data {
            &DataConfig::Synth {
                train,
                val,
                test,
                classes,
                noise,
                seed,
            } => {
                let spec = |samples, stream: u64| SynthSpec {
                    classes,
                    samples,
                    noise,
                    seed: crate::data::mix(seed, stream),
                    ..Default::default()
                };
                Ok(Splits {
                    train: synth_dataset(&spec(train, 0)),
                    val: synth_dataset(&spec(val, 1)),
                    test: synth_dataset(&spec(test, 2)),
                })
            }
            DataConfig::Cifar10 { dir, val } => load_cifar10(dir, *val, self.seed),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                val,
            } => {
                let full = load_idx(train_images, train_labels, *classes)?;
                let (train, val) = carve_validation(&full, *val, self.seed)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => load_idx(i, l, *classes)?,
                    _ => Dataset::new(Vec::new(), Vec::new(), full.shape, *classes)?,
                };
                Ok(Splits { train, val, test })
            }
        }
    }

    /// Absolute budgets for `arch`, with fractions taken of its unpruned usage.
    /// Unconstrained objectives get `u64::MAX`.
    pub fn resolve_budget(&self, arch: &Architecture) -> Result<ResourceBudget> {
        let model = ResourceModel::new(arch.clone(), self.resources.options());
        let full = model.usage(&arch.unpruned())?;
        let pick =
            |b: &Option<BudgetValue>, unpruned: u64| b.map_or(u64::MAX, |v| v.resolve(unpruned));
        ResourceBudget::new(
            pick(&self.budget.pmu, full.pmu_bytes),
            pick(&self.budget.size, full.size_bytes),
            pick(&self.budget.macs, full.macs),
        )
    }
}
