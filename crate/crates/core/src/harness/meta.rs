//! Meta-training: one sampled episode, then one PPO update, repeated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MetaConfig;
use super::episode::{run_episode, EpisodeSeeds, LrSource, Task};
use super::metrics::MetricsRecord;
use super::{io_err, HarnessError, Result};
use crate::controller::{compute_advantages, save_checkpoint, ActMode, ControllerPolicy, PpoLearner};
use crate::seeds::{Purpose, SeedLadder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub total_reward: f64,
    pub decisions: usize,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub final_lr: f64,
    pub diverged: bool,
    pub policy_std: f64,
    pub mean_objective: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub update_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub policy: ControllerPolicy,
    /// Total reward of each episode, in order.
    pub reward_curve: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
    pub records: Vec<MetricsRecord>,
    /// Number of PPO updates attempted.
    pub updates: usize,
}

pub fn checkpoint_name(episode: u64) -> String {
    format!("controller_ep{episode:04}.json")
}

/// Trains `policy` for `meta.episodes` episodes on `task`. A failed PPO update
/// leaves the policy as it was and training moves on to the next episode.
pub fn train_controller(
    mut policy: ControllerPolicy,
    task: &Task,
    meta: &MetaConfig,
    ladder: &SeedLadder,
    run_id: &str,
    checkpoint_dir: Option<&Path>,
    mut on_episode: impl FnMut(&EpisodeSummary),
) -> Result<MetaOutcome> {
    if meta.episodes == 0 {
        return Err(HarnessError::Config("episodes must be at least 1".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut learner = PpoLearner::new(&policy);
    let mut out = MetaOutcome {
        policy: policy.clone(),
        reward_curve: Vec::new(),
        episodes: Vec::new(),
        records: Vec::new(),
        updates: 0,
    };
    for e in 0..meta.episodes {
        let source = LrSource::Controller {
            policy: &policy,
            mode: ActMode::Sample,
        };
        let ep = run_episode(
            source,
            task,
            &meta.episode,
            &meta.ppo,
            EpisodeSeeds::meta(ladder, e),
            run_id,
            e,
        )?;
        let mut traj = ep.trajectory;
        let total_reward = traj.total_reward();
        let final_lr = ep.records.last().map_or(meta.episode.initial_lr, |r| r.lr);

        out.updates += 1;
        let update = compute_advantages(&mut traj, &meta.ppo).and_then(|_| {
            learner.update(
                &mut policy,
                std::slice::from_ref(&traj),
                &meta.ppo,
                ladder.seed(Purpose::PpoShuffle, e),
            )
        });
        let (mean_objective, clip_fraction, update_error) = match update {
            Ok(s) => (Some(s.mean_objective), Some(s.clip_fraction), None),
            Err(err) => {
                eprintln!("episode {e}: PPO update skipped: {err}");
                (None, None, Some(err.to_string()))
            }
        };
        let summary = EpisodeSummary {
            episode: e,
            total_reward,
            decisions: traj.len(),
            best_val_loss: ep.best_val_loss,
            test_loss: ep.test_loss,
            final_lr,
            diverged: ep.diverged,
            policy_std: policy.std(),
            mean_objective,
            clip_fraction,
            update_error,
        };
        on_episode(&summary);
        out.reward_curve.push(total_reward);
        out.episodes.push(summary);
        out.records.extend(ep.records);

        if let Some(dir) = checkpoint_dir {
            if meta.checkpoint_every > 0 && (e + 1) % meta.checkpoint_every == 0 {
                save_checkpoint(&policy, &meta.ppo, &dir.join(checkpoint_name(e + 1)))?;
            }
        }
    }
    out.policy = policy;
    Ok(out)
}
