//! Step-decay baseline schedules and the grid search over their hyper-parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("grid list `{0}` is empty")]
    EmptyGrid(&'static str),
    #[error("invalid schedule {0:?}")]
    Invalid(StepDecaySchedule),
    #[error("no schedule results to select from")]
    NoResults,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecaySchedule {
    pub initial_lr: f64,
    pub discount_step: u64,
    pub discount_factor: f64,
}

impl StepDecaySchedule {
    pub fn new(initial_lr: f64, discount_step: u64, discount_factor: f64) -> Result<Self, ScheduleError> {
        let s = Self {
            initial_lr,
            discount_step,
            discount_factor,
        };
        let valid = initial_lr.is_finite()
            && initial_lr > 0.0
            && discount_step > 0
            && discount_factor > 0.0
            && discount_factor <= 1.0;
        if valid {
            Ok(s)
        } else {
            Err(ScheduleError::Invalid(s))
        }
    }

    /// A schedule that never decays.
    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            discount_step: 1,
            discount_factor: 1.0,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        step_decay_lr(self, step)
    }
}

/// `initial_lr * discount_factor ^ floor(step / discount_step)`
pub fn step_decay_lr(s: &StepDecaySchedule, step: u64) -> f64 {
    let decays = step / s.discount_step;
    // powf rather than powi: repeated multiplication drifts by an ulp
    s.initial_lr * s.discount_factor.powf(decays as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleGrid {
    pub initial_lrs: Vec<f64>,
    pub discount_steps: Vec<u64>,
    pub discount_factors: Vec<f64>,
}

/// Episode length the reference grid's discount steps were chosen for.
pub const REFERENCE_EPISODE_STEPS: u64 = 1000;

impl ScheduleGrid {
    /// The 4 x 4 x 3 step-decay grid.
    pub fn reference() -> Self {
        Self {
            initial_lrs: vec![0.1, 0.01, 0.001, 0.0001],
            discount_steps: vec![10, 20, 50, 100],
            discount_factors: vec![0.99, 0.9, 0.88],
        }
    }

    /// Rescales discount steps from a 1000-step episode to `total_steps`
    /// (rounded, at least 1).
    pub fn scaled_to(&self, total_steps: u64) -> Self {
        let scale = total_steps as f64 / REFERENCE_EPISODE_STEPS as f64;
        Self {
            discount_steps: self
                .discount_steps
                .iter()
                .map(|&s| ((s as f64 * scale).round() as u64).max(1))
                .collect(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.initial_lrs.len() * self.discount_steps.len() * self.discount_factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination, lexicographic over (initial lr, discount step, discount factor).
    pub fn schedules(&self) -> Result<Vec<StepDecaySchedule>, ScheduleError> {
        grid(self)
    }
}

pub fn grid(spec: &ScheduleGrid) -> Result<Vec<StepDecaySchedule>, ScheduleError> {
    if spec.initial_lrs.is_empty() {
        return Err(ScheduleError::EmptyGrid("initial_lrs"));
    }
    if spec.discount_steps.is_empty() {
        return Err(ScheduleError::EmptyGrid("discount_steps"));
    }
    if spec.discount_factors.is_empty() {
        return Err(ScheduleError::EmptyGrid("discount_factors"));
    }
    let mut out = Vec::with_capacity(spec.len());
    for &lr in &spec.initial_lrs {
        for &step in &spec.discount_steps {
            for &factor in &spec.discount_factors {
                out.push(StepDecaySchedule::new(lr, step, factor)?);
            }
        }
    }
    Ok(out)
}

/// Index and schedule with the lowest validation loss; ties keep the
/// earliest entry and NaN counts as worst.
pub fn select_best(results: &[(StepDecaySchedule, f64)]) -> Result<(usize, StepDecaySchedule), ScheduleError> {
    let key = |loss: f64| if loss.is_nan() { f64::INFINITY } else { loss };
    results
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &(_, loss))| match best {
            Some((_, b)) if key(loss) >= b => best,
            _ => Some((i, key(loss))),
        })
        .map(|(i, _)| (i, results[i].0))
        .ok_or(ScheduleError::NoResults)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decay_boundaries() {
        let s = StepDecaySchedule::new(0.1, 10, 0.9).unwrap();
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(9), 0.1);
        assert!((s.lr(10) - 0.09).abs() < 1e-15);
        assert!((s.lr(25) - 0.081).abs() < 1e-15);
    }

    #[test]
    fn reference_grid_has_48_points() {
        let g = ScheduleGrid::reference();
        let all = g.schedules().unwrap();
        assert_eq!(all.len(), 48);
        assert_eq!(all[0], StepDecaySchedule::new(0.1, 10, 0.99).unwrap());
        assert_eq!(all[1], StepDecaySchedule::new(0.1, 10, 0.9).unwrap());
        assert_eq!(all[47], StepDecaySchedule::new(0.0001, 100, 0.88).unwrap());
        assert_eq!(g.scaled_to(400).discount_steps, vec![4, 8, 20, 40]);
        assert_eq!(g.scaled_to(1000), g);
    }

    #[test]
    fn grid_edge_cases() {
        let single = ScheduleGrid {
            initial_lrs: vec![0.1],
            discount_steps: vec![5],
            discount_factors: vec![0.5],
        };
        assert_eq!(grid(&single).unwrap().len(), 1);
        let dup = ScheduleGrid {
            initial_lrs: vec![0.1, 0.1],
            ..single.clone()
        };
        let out = grid(&dup).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        let empty = ScheduleGrid {
            discount_factors: vec![],
            ..single
        };
        assert_eq!(grid(&empty), Err(ScheduleError::EmptyGrid("discount_factors")));
    }

    #[test]
    fn selection_rules() {
        let s = |lr| StepDecaySchedule::constant(lr);
        assert_eq!(select_best(&[(s(0.1), 0.4)]).unwrap().0, 0);
        assert_eq!(select_best(&[(s(0.1), 0.5), (s(0.2), 0.3), (s(0.3), 0.9)]).unwrap().0, 1);
        assert_eq!(select_best(&[(s(0.1), 0.3), (s(0.2), 0.3)]).unwrap().0, 0);
        assert_eq!(select_best(&[(s(0.1), f64::NAN), (s(0.2), 7.0)]).unwrap().0, 1);
        assert_eq!(select_best(&[]), Err(ScheduleError::NoResults));
    }

    proptest! {
        #[test]
        fn piecewise_constant_and_non_increasing(
            lr in 1e-6f64..1.0, step in 1u64..200, factor in 0.01f64..=1.0, t in 0u64..5000
        ) {
            let s = StepDecaySchedule::new(lr, step, factor).unwrap();
            prop_assert!(s.lr(t + 1) <= s.lr(t));
            if (t + 1) % step != 0 {
                prop_assert_eq!(s.lr(t + 1), s.lr(t));
            }
            prop_assert_eq!(StepDecaySchedule::new(lr, step, 1.0).unwrap().lr(t), lr);
        }
    }
}
