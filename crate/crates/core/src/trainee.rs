//! Trainee classifiers (MLP and a small LeNet-style CNN) trained by plain
//! SGD with an externally supplied learning rate.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::data::Dataset;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraineeError {
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("learning rate {0} must be finite and non-negative")]
    InvalidLr(f64),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("model expects rows of shape {expected:?}, dataset has {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TraineeError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    Cnn { channels: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Flatten,
    Dense { weight: usize, bias: usize },
    Conv { kernel: usize, bias: usize },
    Relu,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraineeModel {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<Param>,
    final_dense: usize,
}

struct Init {
    rng: rand_chacha::ChaCha8Rng,
    params: Vec<Param>,
}

impl Init {
    /// He-normal weights, N(0, 2 / fan_in).
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, Tensor::new(shape, values).expect("shape matches"))
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }
}

fn check_dims(what: &str, dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(TraineeError::Architecture(format!("{what} dimensions must be >= 1, got {dims:?}")));
    }
    Ok(())
}

impl TraineeModel {
    /// Dense+ReLU stack ending in a dense layer. Empty `hidden` gives
    /// multinomial logistic regression.
    pub fn build_mlp(input_dim: usize, hidden: &[usize], num_classes: usize, init_seed: u64) -> Result<Self> {
        Self::mlp_with_input(vec![input_dim], hidden, num_classes, init_seed)
    }

    fn mlp_with_input(input_shape: Vec<usize>, hidden: &[usize], num_classes: usize, init_seed: u64) -> Result<Self> {
        check_dims("input", &input_shape)?;
        check_dims("hidden", hidden)?;
        if num_classes < 2 {
            return Err(TraineeError::Architecture(format!("need >= 2 classes, got {num_classes}")));
        }
        let mut init = Init {
            rng: seeds::rng(init_seed),
            params: Vec::new(),
        };
        let mut layers = vec![Layer::Flatten];
        let mut width: usize = input_shape.iter().product();
        for (i, &h) in hidden.iter().enumerate() {
            let weight = init.he(format!("dense{i}.weight"), vec![width, h], width);
            let bias = init.zeros(format!("dense{i}.bias"), vec![h]);
            layers.push(Layer::Dense { weight, bias });
            layers.push(Layer::Relu);
            width = h;
        }
        let weight = init.he("out.weight".into(), vec![width, num_classes], width);
        let bias = init.zeros("out.bias".into(), vec![num_classes]);
        layers.push(Layer::Dense { weight, bias });
        Ok(Self {
            input_shape,
            num_classes,
            layers,
            params: init.params,
            final_dense: weight,
        })
    }

    /// `conv3x3 + ReLU + 2x2 max-pool` blocks, then flatten and a dense classifier.
    pub fn build_cnn(image_shape: [usize; 3], channels: &[usize], num_classes: usize, init_seed: u64) -> Result<Self> {
        let [mut h, mut w, mut c] = image_shape;
        if h < 4 || w < 4 || c == 0 {
            return Err(TraineeError::Architecture(format!(
                "CNN input must be at least 4x4 with >= 1 channel, got {image_shape:?}"
            )));
        }
        check_dims("channel", channels)?;
        if num_classes < 2 {
            return Err(TraineeError::Architecture(format!("need >= 2 classes, got {num_classes}")));
        }
        let mut init = Init {
            rng: seeds::rng(init_seed),
            params: Vec::new(),
        };
        let mut layers = Vec::new();
        for (i, &out) in channels.iter().enumerate() {
            if h / 2 == 0 || w / 2 == 0 {
                return Err(TraineeError::Architecture(format!(
                    "spatial dims {h}x{w} too small to pool in block {i}"
                )));
            }
            let kernel = init.he(format!("conv{i}.kernel"), vec![3, 3, c, out], 9 * c);
            let bias = init.zeros(format!("conv{i}.bias"), vec![out]);
            layers.extend([Layer::Conv { kernel, bias }, Layer::Relu, Layer::MaxPool]);
            h /= 2;
            w /= 2;
            c = out;
        }
        layers.push(Layer::Flatten);
        let width = h * w * c;
        let weight = init.he("out.weight".into(), vec![width, num_classes], width);
        let bias = init.zeros("out.bias".into(), vec![num_classes]);
        layers.push(Layer::Dense { weight, bias });
        Ok(Self {
            input_shape: image_shape.to_vec(),
            num_classes,
            layers,
            params: init.params,
            final_dense: weight,
        })
    }

    /// Builds `arch` for rows of shape `row_shape`.
    pub fn build(arch: &Architecture, row_shape: &[usize], num_classes: usize, init_seed: u64) -> Result<Self> {
        match arch {
            Architecture::Mlp { hidden } => Self::mlp_with_input(row_shape.to_vec(), hidden, num_classes, init_seed),
            Architecture::Cnn { channels } => match row_shape {
                &[h, w, c] => Self::build_cnn([h, w, c], channels, num_classes, init_seed),
                other => Err(TraineeError::Architecture(format!(
                    "CNN needs [h,w,c] rows, dataset rows are {other:?}"
                ))),
            },
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn final_dense_weights(&self) -> &Tensor {
        &self.params[self.final_dense].tensor
    }

    /// Inserts the parameters as leaves and runs the forward pass on `x`
    /// (`[batch, ...input_shape]`). Returns the logits node and parameter ids.
    pub fn forward(&self, g: &mut Graph, x: NodeId, track_grad: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let ids = self
            .params
            .iter()
            .map(|p| {
                if track_grad {
                    g.leaf(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let batch = g.shape(x)[0];
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Flatten => {
                    let width = g.shape(h)[1..].iter().product();
                    g.reshape(h, vec![batch, width])?
                }
                Layer::Dense { weight, bias } => {
                    let z = g.matmul(h, ids[weight])?;
                    g.add(z, ids[bias])?
                }
                Layer::Conv { kernel, bias } => {
                    let z = g.conv2d_3x3(h, ids[kernel])?;
                    g.add(z, ids[bias])?
                }
                Layer::Relu => g.relu(h)?,
                Layer::MaxPool => g.maxpool_2x2(h)?,
            };
        }
        Ok((h, ids))
    }

    fn check_rows(&self, row_shape: &[usize]) -> Result<()> {
        let flat = |s: &[usize]| s.iter().product::<usize>();
        let ok = match self.layers.first() {
            // MLPs flatten, so any row shape with the right element count is accepted
            Some(Layer::Flatten) => flat(row_shape) == flat(&self.input_shape),
            _ => row_shape == self.input_shape.as_slice(),
        };
        if ok {
            Ok(())
        } else {
            Err(TraineeError::ShapeMismatch {
                expected: self.input_shape.clone(),
                found: row_shape.to_vec(),
            })
        }
    }

    /// Logits for every row of `features`, row-major `[n, k]`.
    pub fn logits(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.check_rows(&features.shape()[1..])?;
        let mut g = Graph::new();
        let x = g.constant(features.clone())?;
        let (out, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(out).to_vec())
    }
}

/// In-place `p <- p - lr * grad` for each parameter.
pub fn apply_sgd<'a>(params: impl IntoIterator<Item = (&'a mut Tensor, &'a [f64])>, lr: f64) {
    for (p, grad) in params {
        for (v, g) in p.values_mut().iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TraineeModel,
    pub step: u64,
    pub current_lr: f64,
    pub seed: u64,
    pub last_train_loss: Option<f64>,
}

impl TrainState {
    pub fn new(model: TraineeModel, initial_lr: f64, seed: u64) -> Self {
        Self {
            model,
            step: 0,
            current_lr: initial_lr,
            seed,
            last_train_loss: None,
        }
    }

    /// Records the mini-batch loss of the untouched model so the first
    /// observation has a train loss before any update is made.
    pub fn prime_train_loss(&mut self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let eval = evaluate_batch(&self.model, features, labels)?;
        self.last_train_loss = Some(eval.loss);
        Ok(eval.loss)
    }
}

/// One SGD step on the mean softmax cross-entropy of the batch.
pub fn sgd_step(state: &mut TrainState, features: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(TraineeError::InvalidLr(lr));
    }
    if labels.is_empty() {
        return Err(TraineeError::EmptyBatch);
    }
    state.model.check_rows(&features.shape()[1..])?;
    let diverged = TraineeError::Diverged { step: state.step };
    let mut g = Graph::new();
    let x = g.constant(features.clone())?;
    let (logits, ids) = state.model.forward(&mut g, x, true).map_err(|e| match e {
        TraineeError::Autodiff(AutodiffError::NonFinite(_)) => diverged.clone(),
        other => other,
    })?;
    let loss = match g.softmax_cross_entropy(logits, labels) {
        Ok(l) => l,
        Err(AutodiffError::NonFinite(_)) => return Err(diverged),
        Err(e) => return Err(e.into()),
    };
    let loss_value = g.value(loss)[0];
    g.backward(loss)?;

    let mut updated = state.model.params.clone();
    apply_sgd(
        updated
            .iter_mut()
            .zip(&ids)
            .map(|(p, &id)| (&mut p.tensor, g.grad(id).expect("parameters track gradients"))),
        lr,
    );
    if updated.iter().any(|p| !p.tensor.is_finite()) {
        return Err(diverged);
    }
    state.model.params = updated;
    state.step += 1;
    state.current_lr = lr;
    state.last_train_loss = Some(loss_value);
    Ok(loss_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Row-major `[n, k]` class probabilities.
    pub predictions: Vec<f64>,
    pub num_classes: usize,
}

impl Evaluation {
    /// Softmax, mean cross-entropy and argmax accuracy (ties go to the lowest class).
    pub fn from_logits(logits: &[f64], labels: &[usize], num_classes: usize) -> Self {
        let mut predictions = Vec::with_capacity(logits.len());
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &label) in logits.chunks(num_classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            predictions.extend(row.iter().map(|z| (z - lse).exp()));
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &z)| if z > row[best] { i } else { best });
            if argmax == label {
                correct += 1;
            }
        }
        let n = labels.len() as f64;
        Self {
            loss: loss / n,
            accuracy: correct as f64 / n,
            predictions,
            num_classes,
        }
    }

    pub fn prediction_row(&self, row: usize) -> &[f64] {
        &self.predictions[row * self.num_classes..(row + 1) * self.num_classes]
    }
}

const EVAL_CHUNK: usize = 1024;

fn evaluate_batch(model: &TraineeModel, features: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    Ok(Evaluation::from_logits(&model.logits(features)?, labels, model.num_classes))
}

/// Loss, accuracy and class probabilities over the whole dataset. Pure.
pub fn evaluate(model: &TraineeModel, ds: &Dataset) -> Result<Evaluation> {
    if ds.num_classes() != model.num_classes {
        return Err(TraineeError::ShapeMismatch {
            expected: vec![model.num_classes],
            found: vec![ds.num_classes()],
        });
    }
    model.check_rows(ds.row_shape())?;
    let mut logits = Vec::with_capacity(ds.len() * model.num_classes);
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, _) = ds.batch(chunk);
        logits.extend(model.logits(&x)?);
    }
    Ok(Evaluation::from_logits(&logits, ds.labels(), model.num_classes))
}
