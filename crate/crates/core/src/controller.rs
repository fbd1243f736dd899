//! PPO actor-critic learning-rate controller.
//!
//! The actor outputs the mean of a Gaussian over a log-scale action; the
//! sampled action is exponentiated, clamped to `scale_bounds` and multiplies
//! the previous learning rate. The critic estimates state values for GAE.
//! Both are single-hidden-layer tanh MLPs over the 7 observation features.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::observe::{Observation, FEATURE_NAMES};
use crate::seeds;

pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1.0;
pub const HIDDEN: usize = 32;
pub const OBS_DIM: usize = FEATURE_NAMES.len();
pub const ACTOR_LR: f64 = 0.001;
pub const CRITIC_LR: f64 = 0.005;
pub const STD_MIN: f64 = 1e-3;
pub const STD_MAX: f64 = 1.0;
pub const INITIAL_STD: f64 = 0.5;

pub const CHECKPOINT_FORMAT: &str = "autolr-controller";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("non-finite {0}; policy is corrupted")]
    NonFinite(&'static str),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory does not end in a terminal transition")]
    Incomplete,
    #[error("advantages missing; run compute_advantages first")]
    MissingAdvantages,
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format `{format}` v{version} unsupported (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})")]
    Version { format: String, version: u32 },
    #[error("checkpoint feature order {0:?} does not match this build")]
    FeatureOrder(Vec<String>),
    #[error("checkpoint tensor `{0}` has the wrong size")]
    Corrupt(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub scale_bounds: [f64; 2],
    pub lr_min: f64,
    pub lr_max: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            update_epochs: 4,
            minibatch_size: 25,
            scale_bounds: [0.5, 2.0],
            lr_min: LR_MIN,
            lr_max: LR_MAX,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ControllerError::Config(msg.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 {
            return bad("update_epochs and minibatch_size must be positive");
        }
        let [lo, hi] = self.scale_bounds;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0 && hi.is_finite()) {
            return bad("scale_bounds must satisfy 0 < lo < 1 < hi");
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad("lr bounds must satisfy 0 < lr_min < lr_max");
        }
        Ok(())
    }
}

/// One-hidden-layer tanh MLP with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    fn init(rng: &mut impl Rng, input: usize, hidden: usize, out_scale: f64) -> Self {
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let d = Normal::new(0.0, std).expect("positive std");
            let v = (0..rows * cols).map(|_| d.sample(rng)).collect();
            Tensor::new(vec![rows, cols], v).expect("shape").with_grad()
        };
        let w1 = normal(input, hidden, (1.0 / input as f64).sqrt());
        let w2 = normal(hidden, 1, out_scale * (1.0 / hidden as f64).sqrt());
        Self {
            w1,
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2,
            b2: Tensor::zeros(vec![1]).with_grad(),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `tanh(x W1 + b1) W2 + b2` on a `[batch, input]` node; returns `[batch, 1]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, track_grad: bool) -> Result<(NodeId, [NodeId; 4])> {
        let mut ids = [x; 4];
        for (slot, t) in ids.iter_mut().zip(self.tensors()) {
            *slot = if track_grad {
                g.leaf(t.clone())?
            } else {
                g.constant(t.clone())?
            };
        }
        let h = g.matmul(x, ids[0])?;
        let h = g.add(h, ids[1])?;
        let h = g.tanh(h)?;
        let y = g.matmul(h, ids[2])?;
        Ok((g.add(y, ids[3])?, ids))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPolicy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl ControllerPolicy {
    /// Fresh policy; the actor's output layer starts near zero so the
    /// initial mean action is close to "keep the learning rate".
    pub fn new(seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let actor = Mlp::init(&mut rng, OBS_DIM, HIDDEN, 0.01);
        let critic = Mlp::init(&mut rng, OBS_DIM, HIDDEN, 1.0);
        Self {
            actor,
            critic,
            log_std: INITIAL_STD.ln(),
            actor_lr: ACTOR_LR,
            critic_lr: CRITIC_LR,
        }
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    fn clamp_log_std(&mut self) {
        self.log_std = self.log_std.clamp(STD_MIN.ln(), STD_MAX.ln());
    }

    /// Actor means and critic values for a batch of observations.
    pub fn evaluate(&self, observations: &[Observation]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.constant(observation_matrix(observations))?;
        let (mean, _) = self.actor.forward(&mut g, x, false)?;
        let (value, _) = self.critic.forward(&mut g, x, false)?;
        Ok((g.value(mean).to_vec(), g.value(value).to_vec()))
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.is_finite()
    }
}

pub fn observation_matrix(observations: &[Observation]) -> Tensor {
    let values = observations.iter().flat_map(|o| o.to_array()).collect();
    Tensor::new(vec![observations.len(), OBS_DIM], values).expect("7 features per row")
}

pub fn gaussian_log_prob(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - LN_SQRT_2PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    /// Pre-clamp log-scale action.
    pub action_raw: f64,
    pub log_prob: f64,
    pub value: f64,
    pub mean: f64,
}

pub fn act(policy: &ControllerPolicy, obs: &Observation, mode: ActMode, rng: &mut impl Rng) -> Result<Action> {
    if !obs.is_finite() {
        return Err(ControllerError::NonFinite("observation"));
    }
    let (means, values) = policy
        .evaluate(std::slice::from_ref(obs))
        .map_err(|_| ControllerError::NonFinite("network output"))?;
    let (mean, value) = (means[0], values[0]);
    let action_raw = match mode {
        ActMode::Greedy => mean,
        ActMode::Sample => {
            let eps: f64 = StandardNormal.sample(rng);
            mean + policy.std() * eps
        }
    };
    let log_prob = gaussian_log_prob(action_raw, mean, policy.log_std);
    if !(action_raw.is_finite() && log_prob.is_finite() && value.is_finite()) {
        return Err(ControllerError::NonFinite("network output"));
    }
    Ok(Action {
        action_raw,
        log_prob,
        value,
        mean,
    })
}

/// Multiplicative scale actually applied for a raw action.
pub fn action_scale(action_raw: f64, cfg: &PpoConfig) -> f64 {
    action_raw.exp().clamp(cfg.scale_bounds[0], cfg.scale_bounds[1])
}

pub fn apply_action(prev_lr: f64, action_raw: f64, cfg: &PpoConfig) -> f64 {
    (prev_lr * action_scale(action_raw, cfg)).clamp(cfg.lr_min, cfg.lr_max)
}

/// Reward for a decision: the negated validation loss after it.
pub fn reward_from_val_loss(val_loss: f64) -> f64 {
    -val_loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub action_raw: f64,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Generalized advantage estimation, right to left.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Fills raw (unstandardized) GAE advantages and value targets.
pub fn compute_advantages(traj: &mut Trajectory, cfg: &PpoConfig) -> Result<()> {
    let last = traj.transitions.last().ok_or(ControllerError::EmptyTrajectory)?;
    if !last.done {
        return Err(ControllerError::Incomplete);
    }
    let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = traj.transitions.iter().map(|t| t.value).collect();
    let dones: Vec<bool> = traj.transitions.iter().map(|t| t.done).collect();
    let (adv, ret) = gae(&rewards, &values, &dones, cfg.gamma, cfg.gae_lambda);
    traj.advantages = Some(adv);
    traj.returns = Some(ret);
    Ok(())
}

/// Shifts to mean 0 and scales to unit (population) std, with a 1e-8 std floor.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Per-sample clipped surrogate `min(w A, clip(w, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (p, &g)) in p.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean clipped surrogate objective over all minibatches.
    pub mean_objective: f64,
    pub critic_loss: f64,
    /// Fraction of samples whose ratio fell outside `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
    /// Largest `|w - 1|` in the first minibatch of the first epoch.
    pub first_minibatch_max_ratio_dev: f64,
    pub minibatches: usize,
}

/// Holds the Adam state for actor (with `log_std`) and critic across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLearner {
    actor_opt: Adam,
    critic_opt: Adam,
}

fn mlp_sizes() -> [usize; 4] {
    [OBS_DIM * HIDDEN, HIDDEN, HIDDEN, 1]
}

struct Sample {
    observation: Observation,
    action_raw: f64,
    old_log_prob: f64,
    advantage: f64,
    ret: f64,
}

impl PpoLearner {
    pub fn new(policy: &ControllerPolicy) -> Self {
        let mut actor_sizes = mlp_sizes().to_vec();
        actor_sizes.push(1);
        Self {
            actor_opt: Adam::new(policy.actor_lr, &actor_sizes),
            critic_opt: Adam::new(policy.critic_lr, &mlp_sizes()),
        }
    }

    /// Clipped-surrogate PPO update over the pooled transitions of `trajs`.
    /// On a non-finite objective the policy and optimizer state are restored.
    pub fn update(
        &mut self,
        policy: &mut ControllerPolicy,
        trajs: &[Trajectory],
        cfg: &PpoConfig,
        shuffle_seed: u64,
    ) -> Result<UpdateStats> {
        cfg.validate()?;
        let mut samples = Vec::new();
        for traj in trajs {
            let (Some(adv), Some(ret)) = (&traj.advantages, &traj.returns) else {
                return Err(ControllerError::MissingAdvantages);
            };
            for ((t, &a), &r) in traj.transitions.iter().zip(adv).zip(ret) {
                samples.push(Sample {
                    observation: t.observation,
                    action_raw: t.action_raw,
                    old_log_prob: t.log_prob,
                    advantage: a,
                    ret: r,
                });
            }
        }
        if samples.is_empty() {
            return Err(ControllerError::EmptyTrajectory);
        }
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        standardize(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }

        let policy_backup = policy.clone();
        let learner_backup = self.clone();
        match self.run_epochs(policy, &samples, cfg, shuffle_seed) {
            Ok(stats) if policy.is_finite() => Ok(stats),
            Ok(_) => {
                *policy = policy_backup;
                *self = learner_backup;
                Err(ControllerError::NonFinite("policy parameters after update"))
            }
            Err(e) => {
                *policy = policy_backup;
                *self = learner_backup;
                Err(match e {
                    ControllerError::Autodiff(AutodiffError::NonFinite(_)) => ControllerError::NonFinite("objective"),
                    other => other,
                })
            }
        }
    }

    fn run_epochs(
        &mut self,
        policy: &mut ControllerPolicy,
        samples: &[Sample],
        cfg: &PpoConfig,
        shuffle_seed: u64,
    ) -> Result<UpdateStats> {
        let mut rng = seeds::rng(shuffle_seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut stats = UpdateStats::default();
        let mut clipped = 0usize;
        let mut seen = 0usize;
        for epoch in 0..cfg.update_epochs {
            order.shuffle(&mut rng);
            for (mb, chunk) in order.chunks(cfg.minibatch_size).enumerate() {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (objective, ratios) = self.actor_step(policy, &batch, cfg)?;
                let critic_loss = self.critic_step(policy, &batch)?;
                if epoch == 0 && mb == 0 {
                    stats.first_minibatch_max_ratio_dev = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
                }
                clipped += ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.epsilon).count();
                seen += ratios.len();
                stats.mean_objective += objective;
                stats.critic_loss += critic_loss;
                stats.minibatches += 1;
            }
        }
        stats.mean_objective /= stats.minibatches as f64;
        stats.critic_loss /= stats.minibatches as f64;
        stats.clip_fraction = clipped as f64 / seen as f64;
        Ok(stats)
    }

    fn actor_step(&mut self, policy: &mut ControllerPolicy, batch: &[&Sample], cfg: &PpoConfig) -> Result<(f64, Vec<f64>)> {
        let obs: Vec<Observation> = batch.iter().map(|s| s.observation).collect();
        let column = |f: &dyn Fn(&Sample) -> f64| -> Tensor {
            Tensor::new(vec![batch.len(), 1], batch.iter().map(|s| f(s)).collect()).expect("column")
        };
        let mut g = Graph::new();
        let x = g.constant(observation_matrix(&obs))?;
        let actions = g.constant(column(&|s| s.action_raw))?;
        let old_log_prob = g.constant(column(&|s| s.old_log_prob))?;
        let advantages = g.constant(column(&|s| s.advantage))?;
        let zeros = g.constant(Tensor::zeros(vec![batch.len(), 1]))?;

        let (mean, ids) = policy.actor.forward(&mut g, x, true)?;
        let log_std = g.leaf(Tensor::scalar(policy.log_std).with_grad())?;
        let log_std_col = g.add(zeros, log_std)?;
        let log_prob = gaussian_log_prob_node(&mut g, actions, mean, log_std_col)?;
        let log_ratio = g.sub(log_prob, old_log_prob)?;
        let ratio = g.exp(log_ratio)?;
        let surr = g.mul(ratio, advantages)?;
        let clipped_ratio = g.clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)?;
        let clipped_surr = g.mul(clipped_ratio, advantages)?;
        let per_sample = g.minimum(surr, clipped_surr)?;
        let objective = g.mean(per_sample)?;
        let loss = g.mul_scalar(objective, -1.0)?;

        let objective_value = g.value(objective)[0];
        let ratios = g.value(ratio).to_vec();
        g.backward(loss)?;

        let mut grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).expect("tracked").to_vec()).collect();
        grads.push(g.grad(log_std).expect("tracked").to_vec());
        let mut log_std_slot = [policy.log_std];
        {
            let [w1, b1, w2, b2] = policy.actor.tensors_mut();
            let mut params: Vec<&mut [f64]> = vec![
                w1.values_mut(),
                b1.values_mut(),
                w2.values_mut(),
                b2.values_mut(),
                &mut log_std_slot,
            ];
            self.actor_opt.step(&mut params, &grads);
        }
        policy.log_std = log_std_slot[0];
        policy.clamp_log_std();
        Ok((objective_value, ratios))
    }

    fn critic_step(&mut self, policy: &mut ControllerPolicy, batch: &[&Sample]) -> Result<f64> {
        let obs: Vec<Observation> = batch.iter().map(|s| s.observation).collect();
        let mut g = Graph::new();
        let x = g.constant(observation_matrix(&obs))?;
        let targets = g.constant(Tensor::new(vec![batch.len(), 1], batch.iter().map(|s| s.ret).collect())?)?;
        let (value, ids) = policy.critic.forward(&mut g, x, true)?;
        let err = g.sub(value, targets)?;
        let sq = g.square(err)?;
        let loss = g.mean(sq)?;
        let loss_value = g.value(loss)[0];
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).expect("tracked").to_vec()).collect();
        let [w1, b1, w2, b2] = policy.critic.tensors_mut();
        let mut params: Vec<&mut [f64]> = vec![w1.values_mut(), b1.values_mut(), w2.values_mut(), b2.values_mut()];
        self.critic_opt.step(&mut params, &grads);
        Ok(loss_value)
    }
}

/// Gaussian log-density of `actions` under `N(mean, exp(log_std)^2)`, elementwise.
pub fn gaussian_log_prob_node(g: &mut Graph, actions: NodeId, mean: NodeId, log_std: NodeId) -> Result<NodeId> {
    let diff = g.sub(actions, mean)?;
    let neg_log_std = g.mul_scalar(log_std, -1.0)?;
    let inv_std = g.exp(neg_log_std)?;
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z)?;
    let half = g.mul_scalar(z2, -0.5)?;
    let lp = g.sub(half, log_std)?;
    Ok(g.add_scalar(lp, -LN_SQRT_2PI)?)
}

/// Convenience wrapper: a fresh learner for a single update.
pub fn ppo_update(policy: &mut ControllerPolicy, trajs: &[Trajectory], cfg: &PpoConfig, shuffle_seed: u64) -> Result<UpdateStats> {
    PpoLearner::new(policy).update(policy, trajs, cfg, shuffle_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MlpRecord {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpRecord {
    fn from_mlp(m: &Mlp) -> Self {
        Self {
            w1: m.w1.values().to_vec(),
            b1: m.b1.values().to_vec(),
            w2: m.w2.values().to_vec(),
            b2: m.b2.values().to_vec(),
        }
    }

    fn into_mlp(self) -> Result<Mlp> {
        let t = |shape: Vec<usize>, v: Vec<f64>, name| {
            Tensor::new(shape, v).map(Tensor::with_grad).map_err(|_| ControllerError::Corrupt(name))
        };
        Ok(Mlp {
            w1: t(vec![OBS_DIM, HIDDEN], self.w1, "w1")?,
            b1: t(vec![HIDDEN], self.b1, "b1")?,
            w2: t(vec![HIDDEN, 1], self.w2, "w2")?,
            b2: t(vec![1], self.b2, "b2")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    feature_names: Vec<String>,
    actor: MlpRecord,
    critic: MlpRecord,
    log_std: f64,
    actor_lr: f64,
    critic_lr: f64,
    ppo: PpoConfig,
}

/// Serializes the policy (and the PPO config it was trained with) as JSON.
pub fn checkpoint_to_string(policy: &ControllerPolicy, cfg: &PpoConfig) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        actor: MlpRecord::from_mlp(&policy.actor),
        critic: MlpRecord::from_mlp(&policy.critic),
        log_std: policy.log_std,
        actor_lr: policy.actor_lr,
        critic_lr: policy.critic_lr,
        ppo: *cfg,
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(s: &str) -> Result<(ControllerPolicy, PpoConfig)> {
    let file: CheckpointFile = serde_json::from_str(s)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(ControllerError::Version {
            format: file.format,
            version: file.version,
        });
    }
    if file.feature_names.iter().map(String::as_str).ne(FEATURE_NAMES) {
        return Err(ControllerError::FeatureOrder(file.feature_names));
    }
    let policy = ControllerPolicy {
        actor: file.actor.into_mlp()?,
        critic: file.critic.into_mlp()?,
        log_std: file.log_std,
        actor_lr: file.actor_lr,
        critic_lr: file.critic_lr,
    };
    if !policy.is_finite() {
        return Err(ControllerError::NonFinite("checkpoint parameters"));
    }
    Ok((policy, file.ppo))
}

pub fn save_checkpoint(policy: &ControllerPolicy, cfg: &PpoConfig, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(policy, cfg)).map_err(|source| ControllerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ControllerPolicy, PpoConfig)> {
    let s = std::fs::read_to_string(path).map_err(|source| ControllerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint_from_str(&s)
}
