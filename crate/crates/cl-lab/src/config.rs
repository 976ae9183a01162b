//! Experiment configuration: TOML loading, defaulting, validation,
//! grid expansion, and a normalized digest for the run manifest.

use crate::data::IlMode;
use crate::error::{Error, Result};
use crate::models::{Arch, ModelSpec};
use crate::nn::OptimizerConfig;
use crate::strategies::{Method, StrategyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    SplitMnist,
    SplitCifar100,
}

impl Benchmark {
    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::SplitMnist => "split_mnist",
            Benchmark::SplitCifar100 => "split_cifar100",
        }
    }

    pub fn il_mode(&self) -> IlMode {
        match self {
            Benchmark::SplitMnist => IlMode::TaskIl,
            Benchmark::SplitCifar100 => IlMode::ClassIl,
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split_mnist" => Ok(Benchmark::SplitMnist),
            "split_cifar100" => Ok(Benchmark::SplitCifar100),
            other => Err(Error::Config(format!("unknown benchmark {other}"))),
        }
    }
}

/// Desk-scale knobs for Split CIFAR-100. `train_per_class` /
/// `eval_per_class` of 0 mean "no cap".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    /// ResNet stage widths are scaled by this factor.
    pub width_factor: f64,
    /// Number of CIFAR-100 classes used (first `cifar_classes` labels).
    pub cifar_classes: usize,
    pub cifar_tasks: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Per-class training-sample cap for Split MNIST (0 = no cap). The
    /// small-sample, many-epoch regime is what drives trunk drift and
    /// rank collapse at desk scale.
    pub mnist_train_per_class: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            width_factor: 0.25,
            cifar_classes: 50,
            cifar_tasks: 10,
            train_per_class: 20,
            eval_per_class: 50,
            mnist_train_per_class: 500,
        }
    }
}

/// A fully resolved, validated experiment configuration (one grid cell).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub arch: Arch,
    pub method: Method,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Activation-eRank probe set size.
    pub probe_size: usize,
    pub optimizer: OptimizerConfig,
    pub strategy: StrategyConfig,
    pub desk: DeskConfig,
    /// Allows benchmark/arch pairings outside the studied grid.
    pub allow_unpaired: bool,
    /// Full-scale CIFAR protocol: 20 tasks x 5 classes, full width.
    pub paper_scale: bool,
    pub output_dir: PathBuf,
}

// ---------------------------------------------------------------------
// Raw TOML shapes (everything optional; unknown keys rejected).

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: Option<String>,
    arch: Option<String>,
    method: Option<String>,
    epochs_per_task: Option<usize>,
    batch_size: Option<usize>,
    seeds: Option<Vec<u64>>,
    probe_size: Option<usize>,
    allow_unpaired: Option<bool>,
    paper_scale: Option<bool>,
    output_dir: Option<PathBuf>,
    optimizer: Option<RawOptimizer>,
    strategy: Option<RawStrategy>,
    desk: Option<RawDesk>,
    grid: Option<RawGrid>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    lambda: Option<f64>,
    temperature: Option<f64>,
    buffer_capacity: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesk {
    width_factor: Option<f64>,
    cifar_classes: Option<usize>,
    cifar_tasks: Option<usize>,
    train_per_class: Option<usize>,
    eval_per_class: Option<usize>,
    mnist_train_per_class: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    archs: Vec<String>,
    methods: Vec<String>,
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
}

fn resolve(raw: &RawConfig, arch_s: Option<&str>, method_s: Option<&str>) -> Result<ExperimentConfig> {
    let benchmark: Benchmark = match raw.benchmark.as_deref() {
        Some(s) => s.parse()?,
        None => Benchmark::SplitMnist,
    };
    let arch: Arch = match arch_s {
        Some(s) => s.parse()?,
        None => match benchmark {
            Benchmark::SplitMnist => Arch::Mlp,
            Benchmark::SplitCifar100 => Arch::Resnet,
        },
    };
    let method: Method = match method_s {
        Some(s) => s.parse()?,
        None => Method::Sgd,
    };
    // Small per-task sample caps with many epochs (see DeskConfig) are
    // what reproduce the forgetting/collapse regime at desk scale.
    let epochs_per_task = raw.epochs_per_task.unwrap_or(match benchmark {
        Benchmark::SplitMnist => 20,
        Benchmark::SplitCifar100 => 5,
    });
    let probe_size = raw.probe_size.unwrap_or(match benchmark {
        Benchmark::SplitMnist => 512,
        Benchmark::SplitCifar100 => 256,
    });

    let opt_raw = raw.optimizer.as_ref();
    // Decay strong enough to shrink abandoned directions in the MLP
    // regime; the CIFAR ResNet collapses through Class-IL recency bias
    // alone, and heavier decay there destroys even the replayed tasks.
    let optimizer = OptimizerConfig {
        learning_rate: opt_raw.and_then(|o| o.learning_rate).unwrap_or(0.01),
        momentum: opt_raw.and_then(|o| o.momentum).unwrap_or(0.9),
        weight_decay: opt_raw.and_then(|o| o.weight_decay).unwrap_or(match benchmark {
            Benchmark::SplitMnist => 0.018,
            Benchmark::SplitCifar100 => 0.0005,
        }),
    };
    let strat_raw = raw.strategy.as_ref();
    let mut strategy = StrategyConfig::new(method);
    // Task-IL heads need only light distillation; the Class-IL shared
    // head forgets so fast that a full-strength teacher is required.
    strategy.lambda = strat_raw.and_then(|s| s.lambda).unwrap_or(match benchmark {
        Benchmark::SplitMnist => 0.2,
        Benchmark::SplitCifar100 => 1.0,
    });
    if let Some(v) = strat_raw.and_then(|s| s.temperature) {
        strategy.temperature = v;
    }
    if let Some(v) = strat_raw.and_then(|s| s.buffer_capacity) {
        strategy.buffer_capacity = v;
    }
    let desk_raw = raw.desk.as_ref();
    let dd = DeskConfig::default();
    let desk = DeskConfig {
        width_factor: desk_raw.and_then(|d| d.width_factor).unwrap_or(dd.width_factor),
        cifar_classes: desk_raw.and_then(|d| d.cifar_classes).unwrap_or(dd.cifar_classes),
        cifar_tasks: desk_raw.and_then(|d| d.cifar_tasks).unwrap_or(dd.cifar_tasks),
        train_per_class: desk_raw.and_then(|d| d.train_per_class).unwrap_or(dd.train_per_class),
        eval_per_class: desk_raw.and_then(|d| d.eval_per_class).unwrap_or(dd.eval_per_class),
        mnist_train_per_class: desk_raw
            .and_then(|d| d.mnist_train_per_class)
            .unwrap_or(dd.mnist_train_per_class),
    };

    let cfg = ExperimentConfig {
        benchmark,
        arch,
        method,
        epochs_per_task,
        batch_size: raw.batch_size.unwrap_or(32),
        seeds: raw.seeds.clone().unwrap_or_else(|| vec![0]),
        probe_size,
        optimizer,
        strategy,
        desk,
        allow_unpaired: raw.allow_unpaired.unwrap_or(false),
        paper_scale: raw.paper_scale.unwrap_or(false),
        output_dir: raw.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads and validates a single-cell config; a `[grid]` section is
/// rejected (use [`load_grid`]).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    load_config_str(&text)
}

pub fn load_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw = parse_raw(text)?;
    if raw.grid.is_some() {
        return Err(Error::Config(
            "config has a [grid] section; run it with the grid verb".into(),
        ));
    }
    resolve(&raw, raw.arch.as_deref(), raw.method.as_deref())
}

/// Expands a grid config into independent cells (arch x method). Without
/// a `[grid]` section this degenerates to a single cell.
pub fn load_grid(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)?;
    load_grid_str(&text)
}

pub fn load_grid_str(text: &str) -> Result<Vec<ExperimentConfig>> {
    let raw = parse_raw(text)?;
    let grid = match &raw.grid {
        None => {
            return Ok(vec![resolve(&raw, raw.arch.as_deref(), raw.method.as_deref())?]);
        }
        Some(g) => g,
    };
    if raw.arch.is_some() || raw.method.is_some() {
        return Err(Error::Config(
            "grid configs list archs/methods under [grid]; drop the top-level arch/method keys"
                .into(),
        ));
    }
    if grid.archs.is_empty() || grid.methods.is_empty() {
        return Err(Error::Config("grid.archs and grid.methods must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for arch in &grid.archs {
        for method in &grid.methods {
            cells.push(resolve(&raw, Some(arch), Some(method))?);
        }
    }
    Ok(cells)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let paired = matches!(
            (self.benchmark, self.arch),
            (Benchmark::SplitMnist, Arch::Mlp)
                | (Benchmark::SplitMnist, Arch::ConvGru)
                | (Benchmark::SplitCifar100, Arch::Resnet)
                | (Benchmark::SplitCifar100, Arch::BiConvGru)
        );
        if !paired && !self.allow_unpaired {
            return Err(Error::Config(format!(
                "benchmark/arch: {} with {} is outside the studied grid \
                 (set allow_unpaired = true to force it)",
                self.benchmark.name(),
                self.arch.name()
            )));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task: must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size: must be >= 1".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(format!("optimizer: {e}")))?;
        if !(self.strategy.temperature > 0.0) {
            return Err(Error::Config(format!(
                "strategy.temperature: must be positive, got {}",
                self.strategy.temperature
            )));
        }
        if !(self.strategy.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "strategy.lambda: must be >= 0, got {}",
                self.strategy.lambda
            )));
        }
        if self.benchmark == Benchmark::SplitCifar100 {
            let (classes, tasks) = (self.cifar_classes(), self.n_tasks());
            if tasks == 0 || classes == 0 || classes % tasks != 0 {
                return Err(Error::Config(format!(
                    "desk.cifar_tasks: {tasks} must divide desk.cifar_classes {classes}"
                )));
            }
            if classes > 100 {
                return Err(Error::Config(format!(
                    "desk.cifar_classes: CIFAR-100 has 100 classes, got {classes}"
                )));
            }
            if !(self.desk.width_factor > 0.0) {
                return Err(Error::Config(format!(
                    "desk.width_factor: must be positive, got {}",
                    self.desk.width_factor
                )));
            }
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        match self.benchmark {
            Benchmark::SplitMnist => 5,
            Benchmark::SplitCifar100 => {
                if self.paper_scale {
                    20
                } else {
                    self.desk.cifar_tasks
                }
            }
        }
    }

    pub fn cifar_classes(&self) -> usize {
        if self.paper_scale {
            100
        } else {
            self.desk.cifar_classes
        }
    }

    pub fn width_factor(&self) -> f64 {
        if self.paper_scale {
            1.0
        } else {
            self.desk.width_factor
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = match self.benchmark {
            Benchmark::SplitMnist => match self.arch {
                Arch::Mlp => ModelSpec::mnist_mlp(),
                Arch::ConvGru => ModelSpec::mnist_convgru(),
                Arch::BiConvGru => ModelSpec {
                    arch: Arch::BiConvGru,
                    ..ModelSpec::mnist_convgru()
                },
                Arch::Resnet => ModelSpec {
                    arch: Arch::Resnet,
                    width_factor: self.width_factor(),
                    mlp_hidden: 0,
                    ..ModelSpec::mnist_mlp()
                },
            },
            Benchmark::SplitCifar100 => {
                let (tasks, classes) = (self.n_tasks(), self.cifar_classes());
                match self.arch {
                    Arch::Resnet => ModelSpec::cifar_resnet(self.width_factor(), tasks, classes),
                    Arch::BiConvGru => ModelSpec::cifar_bi_convgru(tasks, classes),
                    Arch::ConvGru => ModelSpec {
                        arch: Arch::ConvGru,
                        ..ModelSpec::cifar_bi_convgru(tasks, classes)
                    },
                    Arch::Mlp => ModelSpec {
                        arch: Arch::Mlp,
                        mlp_hidden: 256,
                        conv_channels: vec![],
                        gru_hidden: 0,
                        ..ModelSpec::cifar_bi_convgru(tasks, classes)
                    },
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Directory-friendly run name for this cell.
    pub fn cell_name(&self) -> String {
        format!("{}_{}_{}", self.benchmark.name(), self.arch.name(), self.method.name())
    }

    /// Normalized digest of the logical experiment (output location
    /// excluded): identical for any config text that resolves to the
    /// same settings.
    pub fn digest(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = PathBuf::new();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
