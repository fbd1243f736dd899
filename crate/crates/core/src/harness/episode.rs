//! One trainee training episode, driven either by the controller or by a
//! step-decay schedule.

use super::config::EpisodeConfig;
use super::metrics::MetricsRecord;
use super::stats::SeedResult;
use super::{HarnessError, Result};
use crate::controller::{
    act, action_scale, apply_action, reward_from_val_loss, ActMode, ControllerPolicy, PpoConfig, Trajectory,
    Transition,
};
use crate::data::{self, DatasetUri, Split};
use crate::observe::{self, ObserveError, Observed};
use crate::schedules::StepDecaySchedule;
use crate::seeds::{self, Purpose, SeedLadder};
use crate::trainee::{self, sgd_step, TrainState, TraineeError, TraineeModel};

/// A loaded and split dataset.
#[derive(Debug, Clone)]
pub struct Task {
    pub split: Split,
}

impl Task {
    pub fn load(cfg: &EpisodeConfig, ladder: &SeedLadder) -> Result<Self> {
        let ds = cfg.dataset.parse::<DatasetUri>()?.load()?;
        Ok(Self {
            split: data::split(&ds, cfg.split_ratios, ladder.seed(Purpose::Split, 0))?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.split.train.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSeeds {
    pub init: u64,
    pub batch_order: u64,
    pub policy: u64,
    pub probe: u64,
}

impl EpisodeSeeds {
    /// Seeds for meta-training episode `episode`.
    pub fn meta(ladder: &SeedLadder, episode: u64) -> Self {
        Self {
            init: ladder.seed(Purpose::TraineeInit, episode),
            batch_order: ladder.seed(Purpose::BatchOrder, episode),
            policy: ladder.seed(Purpose::PolicySampling, episode),
            probe: ladder.seed(Purpose::Probe, 0),
        }
    }

    /// Seeds for evaluation run `index`; shared by every method so comparisons are paired.
    pub fn eval(ladder: &SeedLadder, index: u64) -> Self {
        Self {
            init: ladder.seed(Purpose::EvalInit, index),
            batch_order: ladder.seed(Purpose::EvalBatchOrder, index),
            policy: 0,
            probe: ladder.seed(Purpose::Probe, 0),
        }
    }

    /// Seeds for the grid search runs.
    pub fn search(ladder: &SeedLadder, index: u64) -> Self {
        Self {
            init: ladder.seed(Purpose::SearchInit, index),
            batch_order: ladder.seed(Purpose::SearchBatchOrder, index),
            policy: 0,
            probe: ladder.seed(Purpose::Probe, 0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LrSource<'a> {
    Controller { policy: &'a ControllerPolicy, mode: ActMode },
    Schedule(StepDecaySchedule),
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub records: Vec<MetricsRecord>,
    pub best_val_loss: f64,
    /// Trainee step of the best checkpoint (0 if no interval completed).
    pub best_step: u64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub diverged: bool,
    /// Trainee SGD steps actually taken.
    pub steps: u64,
}

impl EpisodeOutcome {
    pub fn seed_result(&self, seed_index: u64) -> SeedResult {
        SeedResult {
            seed_index,
            best_val_loss: self.best_val_loss,
            best_step: self.best_step,
            test_loss: self.test_loss,
            test_accuracy: self.test_accuracy,
            diverged: self.diverged,
        }
    }
}

/// Endless reshuffled pass over the training rows.
struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size > n {
            return Err(HarnessError::Config(format!(
                "batch_size {batch_size} exceeds {n} training rows"
            )));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            let epoch_seed = seeds::mix(self.seed ^ self.epoch);
            self.queue = data::batch_indices(self.n, self.batch_size, epoch_seed)?.into_iter();
            self.epoch += 1;
        }
    }
}

/// Penalty reward for the decision whose interval diverged.
pub fn divergence_penalty(num_classes: usize) -> f64 {
    -10.0 * (num_classes as f64).ln()
}

/// Runs one episode: every `decision_interval` steps observe, pick an lr,
/// train, evaluate on validation and record the transition. The parameter
/// snapshot with the lowest validation loss is evaluated once on test.
pub fn run_episode(
    source: LrSource<'_>,
    task: &Task,
    cfg: &EpisodeConfig,
    ppo: &PpoConfig,
    seeds: EpisodeSeeds,
    run_id: &str,
    episode: u64,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    ppo.validate()?;
    let split = &task.split;
    let k = task.num_classes();
    let model = TraineeModel::build(&cfg.architecture, split.train.row_shape(), k, seeds.init)?;
    let start_lr = match source {
        LrSource::Schedule(s) => s.lr(0),
        LrSource::Controller { .. } => cfg.initial_lr,
    };
    let mut state = TrainState::new(model, start_lr, seeds.init);
    let mut stream = BatchStream::new(split.train.len(), cfg.batch_size, seeds.batch_order)?;
    let mut probe = observe::make_probe(split, cfg.probe_size.min(split.validation.len()), seeds.probe)?;

    // the first batch primes the train-loss feature and is then trained on
    let mut carry = Some(stream.next_batch()?);
    {
        let (x, y) = split.train.batch(carry.as_ref().expect("just set"));
        state.prime_train_loss(&x, &y)?;
    }
    let mut current = observe::observe(&state, split, &mut probe)?;
    let fallback = (current.validation.loss, 0, state.model.clone());

    let mut policy_rng = seeds::rng(seeds.policy);
    let mut trajectory = Trajectory::default();
    let mut records = Vec::new();
    let mut best: Option<(f64, u64, TraineeModel)> = None;
    let mut diverged = false;
    let decisions = cfg.decisions();

    for d in 0..decisions {
        let obs = current.observation;
        let prev_lr = state.current_lr;
        let (action_raw, log_prob, value, lr, scale) = match source {
            LrSource::Controller { policy, mode } => {
                let a = act(policy, &obs, mode, &mut policy_rng)?;
                let lr = apply_action(prev_lr, a.action_raw, ppo);
                (a.action_raw, a.log_prob, a.value, lr, action_scale(a.action_raw, ppo))
            }
            LrSource::Schedule(s) => {
                let lr = s.lr(state.step);
                ((lr / prev_lr).ln(), 0.0, 0.0, lr, lr / prev_lr)
            }
        };

        let mut after: Option<Observed> = None;
        let mut interval_ok = true;
        for _ in 0..cfg.decision_interval {
            let rows = match carry.take() {
                Some(r) => r,
                None => stream.next_batch()?,
            };
            let (x, y) = split.train.batch(&rows);
            let step_lr = match source {
                LrSource::Schedule(s) => s.lr(state.step),
                LrSource::Controller { .. } => lr,
            };
            match sgd_step(&mut state, &x, &y, step_lr) {
                Ok(_) => {}
                Err(TraineeError::Diverged { .. }) => {
                    interval_ok = false;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if interval_ok {
            match observe::observe(&state, split, &mut probe) {
                Ok(o) => after = Some(o),
                Err(ObserveError::NonFinite(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = state.last_train_loss.expect("primed");

        let Some(next) = after else {
            let reward = divergence_penalty(k);
            trajectory.transitions.push(Transition {
                observation: obs,
                action_raw,
                log_prob,
                reward,
                value,
                done: true,
            });
            records.push(MetricsRecord {
                run_id: run_id.to_string(),
                episode,
                decision: d,
                step: state.step,
                lr,
                train_loss,
                val_loss: None,
                val_accuracy: None,
                observation: obs.to_array(),
                action_raw,
                scale,
                reward,
                diverged: true,
            });
            diverged = true;
            break;
        };

        let val_loss = next.validation.loss;
        let reward = reward_from_val_loss(val_loss);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, state.step, state.model.clone()));
        }
        trajectory.transitions.push(Transition {
            observation: obs,
            action_raw,
            log_prob,
            reward,
            value,
            done: d + 1 == decisions,
        });
        records.push(MetricsRecord {
            run_id: run_id.to_string(),
            episode,
            decision: d,
            step: state.step,
            lr,
            train_loss,
            val_loss: Some(val_loss),
            val_accuracy: Some(next.validation.accuracy),
            observation: obs.to_array(),
            action_raw,
            scale,
            reward,
            diverged: false,
        });
        current = next;
    }

    let (best_val_loss, best_step, best_model) = best.unwrap_or(fallback);
    let test = trainee::evaluate(&best_model, &split.test)?;
    Ok(EpisodeOutcome {
        trajectory,
        records,
        best_val_loss,
        best_step,
        test_loss: test.loss,
        test_accuracy: test.accuracy,
        diverged,
        steps: state.step,
    })
}
