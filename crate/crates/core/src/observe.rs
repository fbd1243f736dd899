//! Training-dynamics features fed to the controller.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Split;
use crate::seeds;
use crate::trainee::{self, Evaluation, TrainState, TraineeError};

/// Observation component names, in vector order. Checkpoints and metrics
/// files embed this list; changing it is a format break.
pub const FEATURE_NAMES: [&str; 7] = [
    "train_loss_log",
    "val_loss_log",
    "pred_var",
    "pred_change_var",
    "w_mean",
    "w_var",
    "prev_lr_log10",
];

pub const DEFAULT_PROBE_SIZE: usize = 256;

const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObserveError {
    #[error("observation requires at least one recorded train loss")]
    NoTrainLoss,
    #[error("probe size {requested} must be in 1..={available}")]
    ProbeSize { requested: usize, available: usize },
    #[error("observation component {0} is not finite")]
    NonFinite(&'static str),
    #[error(transparent)]
    Trainee(#[from] TraineeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub train_loss_log: f64,
    pub val_loss_log: f64,
    pub pred_var: f64,
    pub pred_change_var: f64,
    pub w_mean: f64,
    pub w_var: f64,
    pub prev_lr_log10: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.train_loss_log,
            self.val_loss_log,
            self.pred_var,
            self.pred_change_var,
            self.w_mean,
            self.w_var,
            self.prev_lr_log10,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            train_loss_log: v[0],
            val_loss_log: v[1],
            pred_var: v[2],
            pred_change_var: v[3],
            w_mean: v[4],
            w_var: v[5],
            prev_lr_log10: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-episode observer memory: the fixed validation probe and the
/// probe predictions from the previous observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    probe_indices: Vec<usize>,
    prev_predictions: Option<Vec<f64>>,
}

impl ObserverState {
    pub fn probe_indices(&self) -> &[usize] {
        &self.probe_indices
    }

    pub fn prev_predictions(&self) -> Option<&[f64]> {
        self.prev_predictions.as_deref()
    }
}

/// Samples `probe_size` distinct validation rows (sorted).
pub fn make_probe(split: &Split, probe_size: usize, seed: u64) -> Result<ObserverState, ObserveError> {
    let available = split.validation.len();
    if probe_size == 0 || probe_size > available {
        return Err(ObserveError::ProbeSize {
            requested: probe_size,
            available,
        });
    }
    let mut probe_indices = index::sample(&mut seeds::rng(seed), available, probe_size).into_vec();
    probe_indices.sort_unstable();
    Ok(ObserverState {
        probe_indices,
        prev_predictions: None,
    })
}

/// Population mean and variance (divisor N).
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    // constant inputs are exactly zero-variance regardless of rounding in the mean
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// An observation together with the validation evaluation it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub observation: Observation,
    pub validation: Evaluation,
}

/// Evaluates the trainee on the validation set and builds the feature vector.
pub fn observe(state: &TrainState, split: &Split, obs: &mut ObserverState) -> Result<Observed, ObserveError> {
    let validation = trainee::evaluate(&state.model, &split.validation)?;
    let observation = observe_with(state, &validation, obs)?;
    Ok(Observed {
        observation,
        validation,
    })
}

/// Builds the feature vector from an existing validation evaluation of `state.model`.
pub fn observe_with(
    state: &TrainState,
    validation: &Evaluation,
    obs: &mut ObserverState,
) -> Result<Observation, ObserveError> {
    let train_loss = state.last_train_loss.ok_or(ObserveError::NoTrainLoss)?;
    let probe: Vec<f64> = obs
        .probe_indices
        .iter()
        .flat_map(|&r| validation.prediction_row(r).iter().copied())
        .collect();
    let (_, pred_var) = mean_var(&probe);
    let pred_change_var = match &obs.prev_predictions {
        Some(prev) => {
            let delta: Vec<f64> = probe.iter().zip(prev).map(|(c, p)| c - p).collect();
            mean_var(&delta).1
        }
        None => 0.0,
    };
    let (w_mean, w_var) = mean_var(state.model.final_dense_weights().values());
    let observation = Observation {
        train_loss_log: train_loss.max(LOSS_FLOOR).ln(),
        val_loss_log: validation.loss.max(LOSS_FLOOR).ln(),
        pred_var,
        pred_change_var,
        w_mean,
        w_var,
        prev_lr_log10: state.current_lr.log10(),
    };
    if let Some((i, _)) = observation.to_array().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(ObserveError::NonFinite(FEATURE_NAMES[i]));
    }
    obs.prev_predictions = Some(probe);
    Ok(observation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_classification};
    use crate::trainee::{sgd_step, TraineeModel};

    fn setup() -> (Split, TrainState) {
        let ds = synth_classification(2, 700, 16, 3, 0.5).unwrap();
        let s = split(&ds, [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0], 0).unwrap();
        let model = TraineeModel::build_mlp(16, &[32], 3, 1).unwrap();
        (s, TrainState::new(model, 0.01, 1))
    }

    #[test]
    fn population_variance() {
        assert_eq!(mean_var(&[1.0, -1.0, 1.0, -1.0]), (0.0, 1.0));
        assert_eq!(mean_var(&[1.0 / 3.0; 12]).1, 0.0);
    }

    #[test]
    fn probe_selection() {
        let (s, _) = setup();
        let full = make_probe(&s, s.validation.len(), 4).unwrap();
        assert_eq!(full.probe_indices(), (0..s.validation.len()).collect::<Vec<_>>().as_slice());
        assert_eq!(make_probe(&s, 50, 9).unwrap(), make_probe(&s, 50, 9).unwrap());
        let p = make_probe(&s, 64, 1).unwrap();
        let mut dedup = p.probe_indices().to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), 64);
        assert!(make_probe(&s, 0, 1).is_err());
        assert!(make_probe(&s, s.validation.len() + 1, 1).is_err());
    }

    #[test]
    fn needs_a_train_loss() {
        let (s, state) = setup();
        let mut obs = make_probe(&s, 32, 0).unwrap();
        assert!(matches!(observe(&state, &s, &mut obs), Err(ObserveError::NoTrainLoss)));
    }

    #[test]
    fn change_variance_history() {
        let (s, mut state) = setup();
        let mut obs = make_probe(&s, 64, 0).unwrap();
        let (x, y) = s.train.batch(&(0..64).collect::<Vec<_>>());
        sgd_step(&mut state, &x, &y, 0.1).unwrap();

        let first = observe(&state, &s, &mut obs).unwrap().observation;
        assert_eq!(first.pred_change_var, 0.0);
        let again = observe(&state, &s, &mut obs).unwrap().observation;
        assert_eq!(again.pred_change_var, 0.0);
        assert_eq!(first, again);

        sgd_step(&mut state, &x, &y, 0.1).unwrap();
        let moved = observe(&state, &s, &mut obs).unwrap();
        assert!(moved.observation.pred_change_var > 0.0);
        assert!(moved.observation.pred_var > 0.0);
        assert!((moved.observation.val_loss_log.exp() - moved.validation.loss).abs() < 1e-9);
        assert!((moved.observation.train_loss_log.exp() - state.last_train_loss.unwrap()).abs() < 1e-9);
        assert!((moved.observation.prev_lr_log10 - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_predictions_have_zero_variance() {
        let (s, state) = setup();
        let mut obs = make_probe(&s, 16, 0).unwrap();
        let n = s.validation.len();
        let eval = Evaluation::from_logits(&vec![0.0; n * 3], s.validation.labels(), 3);
        let mut st = state;
        st.last_train_loss = Some(1.0);
        let o = observe_with(&st, &eval, &mut obs).unwrap();
        assert_eq!(o.pred_var, 0.0);
    }

    #[test]
    fn feature_order_is_stable() {
        let o = Observation::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let json = serde_json::to_value(o).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = FEATURE_NAMES.to_vec();
        expected.sort_unstable();
        assert_eq!(keys, expected);
        assert_eq!(o.to_array(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(
            FEATURE_NAMES.join(","),
            "train_loss_log,val_loss_log,pred_var,pred_change_var,w_mean,w_var,prev_lr_log10"
        );
    }
}
