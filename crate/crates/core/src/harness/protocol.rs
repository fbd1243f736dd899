//! Evaluation protocol: grid search, seeded evaluation runs, transfer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EpisodeConfig;
use super::episode::{run_episode, EpisodeOutcome, EpisodeSeeds, LrSource, Task};
use super::metrics::MetricsRecord;
use super::stats::RunSummary;
use super::{HarnessError, Result};
use crate::controller::{ActMode, ControllerPolicy, PpoConfig};
use crate::schedules::{select_best, ScheduleGrid, StepDecaySchedule};
use crate::seeds::SeedLadder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub schedule: StepDecaySchedule,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub results: Vec<SearchResult>,
    pub best_index: usize,
    pub best: StepDecaySchedule,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub search: GridSearch,
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    /// Episodes executed in total (search + evaluation).
    pub episodes_run: usize,
}

/// One run per grid point (all on the same search seeds), best by validation loss.
pub fn grid_search(
    grid: &ScheduleGrid,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    ladder: &SeedLadder,
) -> Result<GridSearch> {
    let schedules = grid.schedules()?;
    let seeds = EpisodeSeeds::search(ladder, 0);
    let results = schedules
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let ep = run_episode(LrSource::Schedule(*s), task, cfg, ppo, seeds, &format!("search-{i}"), 0)?;
            Ok(SearchResult {
                schedule: *s,
                best_val_loss: ep.best_val_loss,
                test_loss: ep.test_loss,
                diverged: ep.diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if results.iter().all(|r| r.diverged) {
        return Err(HarnessError::AllDiverged);
    }
    let pairs: Vec<_> = results.iter().map(|r| (r.schedule, r.best_val_loss)).collect();
    let (best_index, best) = select_best(&pairs)?;
    Ok(GridSearch {
        results,
        best_index,
        best,
    })
}

fn evaluate_source(
    source: LrSource<'_>,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    ladder: &SeedLadder,
    runs: u64,
    label: &str,
) -> Result<(RunSummary, Vec<MetricsRecord>)> {
    let outcomes: Vec<EpisodeOutcome> = (0..runs)
        .into_par_iter()
        .map(|i| run_episode(source, task, cfg, ppo, EpisodeSeeds::eval(ladder, i), &format!("{label}-{i}"), i))
        .collect::<Result<_>>()?;
    let per_seed = outcomes.iter().zip(0..).map(|(o, i)| o.seed_result(i)).collect();
    let records = outcomes.into_iter().flat_map(|o| o.records).collect();
    Ok((RunSummary::from_seeds(label, per_seed), records))
}

/// `runs` seeded episodes of a fixed schedule.
pub fn evaluate_schedule(
    schedule: StepDecaySchedule,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    ladder: &SeedLadder,
    runs: u64,
    label: &str,
) -> Result<(RunSummary, Vec<MetricsRecord>)> {
    evaluate_source(LrSource::Schedule(schedule), task, cfg, ppo, ladder, runs, label)
}

/// `runs` seeded episodes of the frozen controller acting greedily.
pub fn evaluate_controller(
    policy: &ControllerPolicy,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    ladder: &SeedLadder,
    runs: u64,
    label: &str,
) -> Result<(RunSummary, Vec<MetricsRecord>)> {
    let source = LrSource::Controller {
        policy,
        mode: ActMode::Greedy,
    };
    evaluate_source(source, task, cfg, ppo, ladder, runs, label)
}

/// Grid search, then `runs` evaluation episodes of the winner.
pub fn run_baseline_protocol(
    grid: &ScheduleGrid,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    ladder: &SeedLadder,
    runs: u64,
) -> Result<BaselineOutcome> {
    let search = grid_search(grid, task, cfg, ppo, ladder)?;
    let (summary, records) = evaluate_schedule(search.best, task, cfg, ppo, ladder, runs, "baseline")?;
    Ok(BaselineOutcome {
        episodes_run: search.results.len() + runs as usize,
        search,
        summary,
        records,
    })
}
