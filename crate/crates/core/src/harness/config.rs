use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, Result};
use crate::controller::PpoConfig;
use crate::data::DatasetUri;
use crate::observe::DEFAULT_PROBE_SIZE;
use crate::schedules::ScheduleGrid;
use crate::trainee::Architecture;

pub const DEFAULT_DATASET: &str = "synth://1/2000/16/3/0.5";
pub const DEFAULT_TRANSFER_DATASET: &str = "synth://2/2000/32/5/0.5";

/// Everything needed to run one training episode, independent of who picks the lr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dataset: String,
    pub split_ratios: [f64; 3],
    pub architecture: Architecture,
    pub total_steps: u64,
    pub decision_interval: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub probe_size: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dataset: DEFAULT_DATASET.to_string(),
            split_ratios: [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0],
            architecture: Architecture::default(),
            total_steps: 400,
            decision_interval: 10,
            batch_size: 128,
            initial_lr: 0.01,
            probe_size: DEFAULT_PROBE_SIZE,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        self.dataset.parse::<DatasetUri>()?;
        if self.decision_interval == 0 || self.total_steps == 0 {
            return bad("total_steps and decision_interval must be positive");
        }
        if !self.total_steps.is_multiple_of(self.decision_interval) {
            return bad("total_steps must be a multiple of decision_interval");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if self.probe_size == 0 {
            return bad("probe_size must be positive");
        }
        Ok(())
    }

    pub fn decisions(&self) -> u64 {
        self.total_steps / self.decision_interval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub episodes: u64,
    pub checkpoint_every: u64,
    pub episode: EpisodeConfig,
    pub ppo: PpoConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            checkpoint_every: 10,
            episode: EpisodeConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

/// Top-level experiment file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub episodes: u64,
    pub checkpoint_every: u64,
    /// Evaluation seeds per method.
    pub runs: u64,
    pub out_dir: Option<String>,
    pub transfer_dataset: String,
    /// Baseline grid; defaults to the reference grid rescaled to `episode.total_steps`.
    pub grid: Option<ScheduleGrid>,
    pub episode: EpisodeConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        Self {
            seed: 0,
            episodes: meta.episodes,
            checkpoint_every: meta.checkpoint_every,
            runs: 10,
            out_dir: None,
            transfer_dataset: DEFAULT_TRANSFER_DATASET.to_string(),
            grid: None,
            episode: meta.episode,
            ppo: meta.ppo,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.ppo.validate()?;
        self.transfer_dataset.parse::<DatasetUri>()?;
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be positive".into()));
        }
        if let Some(g) = &self.grid {
            g.schedules()?;
        }
        Ok(())
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            episodes: self.episodes,
            checkpoint_every: self.checkpoint_every,
            episode: self.episode.clone(),
            ppo: self.ppo,
        }
    }

    pub fn grid(&self) -> ScheduleGrid {
        self.grid
            .clone()
            .unwrap_or_else(|| ScheduleGrid::reference().scaled_to(self.episode.total_steps))
    }

    pub fn transfer_episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            dataset: self.transfer_dataset.clone(),
            ..self.episode.clone()
        }
    }
}
