//! Meta-learned adaptive learning-rate schedules.
//!
//! A PPO actor-critic controller watches a trainee network's training
//! dynamics and rescales its learning rate every few SGD steps. The crate
//! also carries the step-decay baseline, its grid search, frozen-controller
//! transfer and the statistics used to compare them.

pub mod autodiff;
pub mod controller;
pub mod data;
pub mod harness;
pub mod observe;
pub mod schedules;
pub mod seeds;
pub mod trainee;
