//! Run configuration: a flat TOML file of `key = value` lines, merged with
//! command-line overrides and expanded into model and training configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_pileup_event, generate_tracking_event, PileupConfig, TrackingConfig};
use crate::error::{Error, Result};
use crate::model::{block_size_grid, Arch, ModelConfig, Scale, Task};
use crate::train::{Dataset, OptimizerConfig, OptimizerKind, TrainConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "LAMPA_SEED";

/// Dataset presets accepted by `dataset` and `gen-data --preset`.
pub const DATASET_PRESETS: [&str; 5] = ["tracking-6k", "tracking-15k", "tracking-60k", "pileup-10k", "toy"];

/// Every key is optional; unset keys fall back to the defaults listed in
/// [`RunConfig::resolve`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub arch: Option<Arch>,
    pub scale: Option<Scale>,
    pub dataset: Option<String>,
    pub block_size: Option<usize>,
    pub m1: Option<usize>,
    pub m2: Option<usize>,
    pub seed: Option<u64>,
    pub events: Option<usize>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub workers: Option<usize>,
    /// Event CSV to read instead of generating events.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// A [`RunConfig`] with every choice made.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub task: Task,
    pub arch: Arch,
    pub scale: Scale,
    pub dataset: String,
    pub seed: u64,
    pub events: usize,
    pub workers: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl ResolvedRun {
    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Keys set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            task, arch, scale, dataset, block_size, m1, m2, seed, events, epochs, max_steps, batch, optimizer, lr,
            workers, data, out, checkpoint
        )
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        Ok(self)
    }

    /// Defaults: tracking, `mamba_b`, scale S, the task's default dataset,
    /// seed 0, one event, one epoch, Adam at 1e-3, one worker. The block
    /// size defaults to the first candidate for the dataset; `m1`/`m2` to 3.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let task = self.task.unwrap_or(Task::Tracking);
        let arch = self.arch.unwrap_or(Arch::MambaB);
        let scale = self.scale.unwrap_or(Scale::S);
        let dataset = self.dataset.clone().unwrap_or_else(|| {
            match task {
                Task::Tracking => "tracking-6k",
                Task::Pileup => "pileup-10k",
            }
            .to_string()
        });
        if dataset_task(&dataset)? != task {
            return Err(Error::Config(format!("dataset {dataset:?} does not belong to the {} task", task.name())));
        }
        let seed = self.seed.unwrap_or(0);
        let mut model = ModelConfig::preset(arch, scale, task);
        model.block_size = match self.block_size {
            Some(b) => b,
            None => block_size_grid(&dataset, arch)?[0],
        };
        if let Some(m1) = self.m1 {
            model.lsh.m1 = m1;
        }
        if let Some(m2) = self.m2 {
            model.lsh.m2 = m2;
        }
        model.seed = seed;
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            model,
            optimizer: OptimizerConfig {
                kind: self.optimizer.unwrap_or(OptimizerKind::Adam),
                lr: self.lr.unwrap_or(defaults.optimizer.lr),
                ..OptimizerConfig::default()
            },
            epochs: self.epochs.unwrap_or(1),
            max_steps: self.max_steps,
            batch: self.batch.unwrap_or(1),
            seed,
            ..defaults
        };
        train.validate()?;
        if train.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", train.optimizer.lr)));
        }
        let events = self.events.unwrap_or(1);
        let workers = self.workers.unwrap_or(1);
        if events == 0 || workers == 0 {
            return Err(Error::Config("events and workers must be at least 1".into()));
        }
        Ok(ResolvedRun {
            task,
            arch,
            scale,
            dataset,
            seed,
            events,
            workers,
            data: self.data.clone(),
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            train,
        })
    }
}

pub fn dataset_task(name: &str) -> Result<Task> {
    match name {
        "tracking-6k" | "tracking-15k" | "tracking-60k" | "toy" => Ok(Task::Tracking),
        "pileup-10k" => Ok(Task::Pileup),
        other => Err(Error::Config(format!(
            "unknown dataset {other:?}; expected one of {}",
            DATASET_PRESETS.join(", ")
        ))),
    }
}

/// Seed of event `i` in a run seeded with `seed`.
pub fn event_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `events` events of a named preset, event `i` drawn from [`event_seed`].
pub fn generate_dataset(name: &str, events: usize, seed: u64) -> Result<Dataset> {
    let ids = 0..events as u64;
    Ok(match dataset_task(name)? {
        Task::Tracking => {
            let cfg = TrackingConfig::preset(name)?;
            Dataset::Tracking(
                ids.map(|i| generate_tracking_event(event_seed(seed, i), i, &cfg))
                    .collect::<Result<_>>()?,
            )
        }
        Task::Pileup => {
            let cfg = PileupConfig::default();
            Dataset::Pileup(
                ids.map(|i| generate_pileup_event(event_seed(seed, i), i, &cfg))
                    .collect::<Result<_>>()?,
            )
        }
    })
}
