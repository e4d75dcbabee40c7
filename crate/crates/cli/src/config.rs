//! Experiment configuration files.
//!
//! A config is a TOML document with shared `[dataset]`, `[model]`,
//! `[optimizer]` and `[training]` tables plus one optional table per command
//! (`[run]`, `[sweep]`, `[rank]`, `[subsample]`). Unknown keys are errors.
//!
//! Budget-unaware schedules (`kind=step at=...`, `kind=exponential`,
//! `kind=sgdr-unaware`) are written in epochs of the full budget.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use budgeted::data::{load_csv, make_synthetic, Dataset, Generator, SyntheticSpec, DEFAULT_HOLDOUT};
use budgeted::engine::{Architecture, EvalCadence, Network, TrainConfig};
use budgeted::optim::{Algorithm, OptimizerConfig};
use budgeted::schedules::{bac_convert, early_stop, ScheduleSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Output directory, overridden by `--out` or `BUDGETED_OUT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerSection,
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Seeds generation and the train/validation split.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

fn default_holdout() -> f64 {
    DEFAULT_HOLDOUT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `logistic`, or `<activation>:<widths>` such as `relu:64-64s`.
    pub architecture: Architecture,
}

/// Optimizer settings; omitted fields take the algorithm's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_moment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

impl OptimizerSection {
    pub fn resolve(&self) -> OptimizerConfig {
        let base = match self.algorithm {
            Algorithm::SgdMomentum => OptimizerConfig::sgd(),
            Algorithm::Amsgrad => OptimizerConfig::amsgrad(),
        };
        OptimizerConfig {
            algorithm: self.algorithm,
            base_lr: self.base_lr.unwrap_or(base.base_lr),
            momentum: self.momentum.unwrap_or(base.momentum),
            second_moment: self.second_moment.unwrap_or(base.second_moment),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Reference budget that budget fractions refer to.
    pub full_budget_epochs: u64,
    #[serde(default)]
    pub warmup_iters: u64,
    /// Rescale budget-unaware schedules to the budget (BAC). When false they
    /// are cut off at the budget instead.
    #[serde(default = "yes")]
    pub bac: bool,
    /// Evaluation interval in iterations; once per epoch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every_iters: Option<u64>,
    #[serde(default = "yes")]
    pub full_grad_norm: bool,
}

fn yes() -> bool {
    true
}

/// Exactly one of `fraction` (of the full budget) or `iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<u64>,
}

impl Budget {
    pub fn fraction(f: f64) -> Self {
        Budget {
            fraction: Some(f),
            iters: None,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match (self.fraction, self.iters) {
            (Some(f), None) => ensure!(f > 0.0 && f <= 1.0, "{field}.fraction must lie in (0, 1], got {f}"),
            (None, Some(t)) => ensure!(t >= 1, "{field}.iters must be at least 1"),
            _ => bail!("{field} needs exactly one of `fraction` or `iters`"),
        }
        Ok(())
    }

    /// Iteration count given the full budget in iterations.
    pub fn iters(&self, full_iters: u64) -> u64 {
        match (self.fraction, self.iters) {
            (_, Some(t)) => t,
            (Some(f), None) => ((f * full_iters as f64).round() as u64).max(1),
            (None, None) => unreachable!("validated budget"),
        }
    }

    pub fn label(&self) -> String {
        match (self.fraction, self.iters) {
            (_, Some(t)) => format!("{t}it"),
            (Some(f), None) => format!("{f}"),
            (None, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub schedule: ScheduleSpec,
    pub budget: Budget,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub schedules: Vec<ScheduleSpec>,
    pub budgets: Vec<Budget>,
    pub seeds: Vec<u64>,
    /// Optional ablation axes; default to the `[optimizer]` and
    /// `[training]` values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lrs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSection {
    pub family_size: usize,
    /// One experiment per family seed.
    pub family_seeds: Vec<u64>,
    pub schedules: Vec<ScheduleSpec>,
    /// Fractions of the full budget.
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "linear")]
    pub reference: ScheduleSpec,
}

fn linear() -> ScheduleSpec {
    ScheduleSpec::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleSection {
    pub schedule: ScheduleSpec,
    /// Fractions of the full budget, and of the training set for the
    /// subsampled arm.
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Dataset and iteration counts shared by every run of a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub iters_per_epoch: u64,
    pub full_iters: u64,
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(csv) = &mut cfg.dataset.csv {
            if csv.path.is_relative() {
                if let Some(dir) = path.parent() {
                    csv.path = dir.join(&csv.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        ensure!(
            d.holdout > 0.0 && d.holdout < 1.0,
            "dataset.holdout must lie in (0, 1), got {}",
            d.holdout
        );
        ensure!(
            d.synthetic.is_some() != d.csv.is_some(),
            "dataset needs exactly one of `synthetic` or `csv`"
        );
        let t = &self.training;
        ensure!(t.batch_size >= 1, "training.batch_size must be at least 1");
        ensure!(
            t.full_budget_epochs >= 1,
            "training.full_budget_epochs must be at least 1"
        );
        ensure!(
            t.eval_every_iters != Some(0),
            "training.eval_every_iters must be at least 1"
        );
        self.optimizer
            .resolve()
            .validate()
            .map_err(|e| anyhow::anyhow!("optimizer: {e}"))?;
        if let Some(run) = &self.run {
            run.budget.validate("run.budget")?;
            check_schedule("run.schedule", &run.schedule)?;
        }
        if let Some(s) = &self.sweep {
            ensure!(!s.schedules.is_empty(), "sweep.schedules must not be empty");
            ensure!(!s.budgets.is_empty(), "sweep.budgets must not be empty");
            ensure!(!s.seeds.is_empty(), "sweep.seeds must not be empty");
            for (i, b) in s.budgets.iter().enumerate() {
                b.validate(&format!("sweep.budgets[{i}]"))?;
            }
            for (i, spec) in s.schedules.iter().enumerate() {
                check_schedule(&format!("sweep.schedules[{i}]"), spec)?;
            }
            if let Some(lrs) = &s.base_lrs {
                ensure!(!lrs.is_empty(), "sweep.base_lrs must not be empty");
                ensure!(
                    lrs.iter().all(|&lr| lr.is_finite() && lr >= 0.0),
                    "sweep.base_lrs must be non-negative"
                );
            }
            if let Some(bs) = &s.batch_sizes {
                ensure!(!bs.is_empty(), "sweep.batch_sizes must not be empty");
                ensure!(bs.iter().all(|&b| b >= 1), "sweep.batch_sizes must be at least 1");
            }
        }
        if let Some(r) = &self.rank {
            ensure!(r.family_size >= 2, "rank.family_size must be at least 2");
            ensure!(!r.family_seeds.is_empty(), "rank.family_seeds must not be empty");
            ensure!(!r.schedules.is_empty(), "rank.schedules must not be empty");
            ensure!(!r.budgets.is_empty(), "rank.budgets must not be empty");
            ensure!(!r.seeds.is_empty(), "rank.seeds must not be empty");
            for f in &r.budgets {
                ensure!(
                    *f > 0.0 && *f <= 1.0,
                    "rank.budgets entries must lie in (0, 1], got {f}"
                );
            }
            for (i, spec) in r.schedules.iter().enumerate() {
                check_schedule(&format!("rank.schedules[{i}]"), spec)?;
            }
            check_schedule("rank.reference", &r.reference)?;
        }
        if let Some(s) = &self.subsample {
            ensure!(!s.budgets.is_empty(), "subsample.budgets must not be empty");
            ensure!(!s.seeds.is_empty(), "subsample.seeds must not be empty");
            for f in &s.budgets {
                ensure!(
                    *f > 0.0 && *f <= 1.0,
                    "subsample.budgets entries must lie in (0, 1], got {f}"
                );
            }
            check_schedule("subsample.schedule", &s.schedule)?;
        }
        Ok(())
    }

    /// Builds the dataset and resolves the full budget to iterations.
    pub fn prepare(&self) -> Result<Prepared> {
        self.prepare_with_batch(self.training.batch_size)
    }

    pub fn prepare_with_batch(&self, batch_size: usize) -> Result<Prepared> {
        let d = &self.dataset;
        let dataset = match (&d.synthetic, &d.csv) {
            (Some(generator), _) => make_synthetic(
                &SyntheticSpec {
                    generator: generator.clone(),
                    holdout: d.holdout,
                },
                d.seed,
            )?,
            (None, Some(csv)) => load_csv(&csv.path, csv.classes)
                .with_context(|| format!("loading {}", csv.path.display()))?
                .split(d.holdout, d.seed)?
                .standardize(),
            (None, None) => bail!("dataset needs exactly one of `synthetic` or `csv`"),
        };
        Ok(self.prepared_for(dataset, batch_size))
    }

    pub fn prepared_for(&self, dataset: Dataset, batch_size: usize) -> Prepared {
        let iters_per_epoch = dataset.train.len().div_ceil(batch_size) as u64;
        Prepared {
            dataset,
            iters_per_epoch,
            full_iters: self.training.full_budget_epochs * iters_per_epoch,
        }
    }

    pub fn network(&self, dataset: &Dataset) -> Result<Network> {
        Ok(Network::new(
            &self.model.architecture,
            dataset.dim(),
            dataset.classes(),
        )?)
    }

    /// Turns a configured schedule into the budget-aware one that drives a
    /// run of `budget_iters` iterations.
    pub fn resolve_schedule(
        &self,
        spec: &ScheduleSpec,
        budget_iters: u64,
        iters_per_epoch: u64,
    ) -> Result<ScheduleSpec> {
        if spec.is_budget_aware() {
            return Ok(spec.clone());
        }
        let converted = if self.training.bac {
            bac_convert(spec, self.training.full_budget_epochs as f64)?
        } else {
            early_stop(spec, budget_iters as f64 / iters_per_epoch as f64)?
        };
        Ok(converted)
    }

    pub fn train_config(&self, schedule: ScheduleSpec, budget_iters: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            warmup: self.training.warmup_iters,
            eval: EvalCadence {
                every: self.training.eval_every_iters,
                full_grad_norm: self.training.full_grad_norm,
            },
            ..TrainConfig::new(
                schedule,
                budget_iters,
                self.training.batch_size,
                self.optimizer.resolve(),
                seed,
            )
        }
    }
}

fn check_schedule(field: &str, spec: &ScheduleSpec) -> Result<()> {
    spec.validate().with_context(|| format!("{field} is invalid"))
}
