//! Truncated BPTT with MSE loss and Adam, one sequence stream (batch size
//! one). The recurrent state is carried from window to window within an
//! epoch and reset to zero at the start of each epoch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{Checkpoint, Model, ModelKind};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 0.005;
pub const DEFAULT_TRUNCATION: usize = 32;
pub const DEFAULT_LSTM_CLIP: f64 = 1.0;
pub const DEFAULT_DT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub neuron_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub truncation_len: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Solver step of the LTC cell, in bins.
    pub dt: f64,
    /// Evaluate test R² after every epoch.
    pub track_test_r2: bool,
}

impl TrainConfig {
    /// Defaults: lr 0.005, window 32, clipping at 1.0 for LSTM only.
    pub fn new(model_kind: ModelKind, neuron_count: usize, epochs: usize, seed: u64) -> Self {
        Self {
            model_kind,
            neuron_count,
            epochs,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed,
            truncation_len: DEFAULT_TRUNCATION,
            clip_norm: (model_kind == ModelKind::Lstm).then_some(DEFAULT_LSTM_CLIP),
            dt: DEFAULT_DT,
            track_test_r2: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.truncation_len == 0 {
            return Err(Error::config("truncation_len", "must be positive"));
        }
        if self.neuron_count == 0 {
            return Err(Error::config("neuron_count", "must be positive"));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::config("clip_norm", "must be positive when set"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        crate::io::stable_hash(self)
    }

    pub fn build_model(&self, input_dim: usize) -> Result<Model> {
        Model::new(self.model_kind, input_dim, self.neuron_count, self.seed, self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean squared error over each epoch's training windows.
    pub train_loss: Vec<f64>,
    pub test_r2: Vec<Option<f64>>,
    pub epoch_seconds: Vec<f64>,
    pub checkpoint: Checkpoint,
}

impl TrainTrace {
    pub fn wall_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }

    /// Copy with timings zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            epoch_seconds: vec![0.0; self.epoch_seconds.len()],
            ..self.clone()
        }
    }
}

/// Mean of squared residuals.
pub fn mse_loss(pred: &[f64], actual: &[f64]) -> Result<f64> {
    crate::metrics::mse(actual, pred)
}

/// First and second moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One Adam step with bias correction; `step` counts from 1.
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, step: u64, lr: f64) {
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        self.step += 1;
        self.moments.resize_with(params.len(), Moments::default);
        for ((p, g), m) in params.into_iter().zip(grads).zip(&mut self.moments) {
            adam_update(p, g, m, self.step, self.lr);
        }
    }
}

/// Loss, per-array gradients, and the state after one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub next_state: Vec<f64>,
}

/// MSE of the window's predictions and its gradient for every parameter
/// array (in [`Model::param_names`] order).
pub fn window_loss_and_grads(model: &Model, state: &[f64], inputs: &[&[f64]], targets: &[f64]) -> Result<WindowResult> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::invalid("window needs as many targets as inputs, at least one"));
    }
    let mut tape = Tape::new();
    let graph = model.forward_window(&mut tape, state, inputs)?;
    let pred = tape.concat(&graph.predictions)?;
    let actual = tape.constant(Array::vector(targets.to_vec()));
    let resid = tape.sub(pred, actual)?;
    let sq = tape.mul(resid, resid)?;
    let loss = tape.mean(sq)?;
    tape.backward(loss)?;
    let grads = graph
        .leaves
        .iter()
        .map(|&l| match tape.grad(l) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(l).len()],
        })
        .collect();
    let next_state = graph.state.iter().flat_map(|&s| tape.value(s).data().to_vec()).collect();
    Ok(WindowResult {
        loss: tape.value(loss).data()[0],
        grads,
        next_state,
    })
}

fn clip_global(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Test-split metrics. Predictions run over the whole series from the zero
/// state so the test rows see the preceding context.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Metrics> {
    let split = ds.split()?;
    let pred = model.predict(ds.rows(0..ds.len()))?;
    Metrics::compute(&ds.target[split.test.clone()], &pred[split.test.clone()])
}

/// Per-epoch callback input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEnd {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
}

pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    train_with(model, ds, cfg, |_, _| Ok(()))
}

/// [`train`], calling `on_epoch` with the model after every epoch.
pub fn train_with<F>(model: &mut Model, ds: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainTrace>
where
    F: FnMut(EpochEnd, &Model) -> Result<()>,
{
    cfg.validate()?;
    if model.input_dim() != ds.feature_count() {
        return Err(Error::invalid(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            ds.feature_count()
        )));
    }
    if ds.scaler.is_none() {
        return Err(Error::data("dataset must be scaled and split before training"));
    }
    let train_rows = ds.split()?.train.clone();
    if train_rows.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let cfg_hash = cfg.hash()?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace_loss = Vec::with_capacity(cfg.epochs);
    let mut test_r2 = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut state = model.initial_state();
        let mut total = 0.0;
        let mut start = train_rows.start;
        let mut window = 0;
        while start < train_rows.end {
            let end = (start + cfg.truncation_len).min(train_rows.end);
            let inputs: Vec<&[f64]> = ds.rows(start..end).collect();
            let mut r = window_loss_and_grads(model, &state, &inputs, &ds.target[start..end])?;
            if !r.loss.is_finite() || r.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NumericalAbort {
                    epoch,
                    window,
                    loss: r.loss,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_global(&mut r.grads, c);
            }
            adam.step(model.param_arrays_mut(), &r.grads);
            total += r.loss * (end - start) as f64;
            state = r.next_state;
            start = end;
            window += 1;
        }
        let loss = total / train_rows.len() as f64;
        trace_loss.push(loss);
        test_r2.push(if cfg.track_test_r2 { Some(evaluate(model, ds)?.r2) } else { None });
        epoch_seconds.push(started.elapsed().as_secs_f64());
        log::debug!("epoch {epoch}/{}: train loss {loss:.6}", cfg.epochs);
        on_epoch(EpochEnd { epoch, train_loss: loss }, model)?;
    }

    Ok(TrainTrace {
        train_loss: trace_loss,
        test_r2,
        epoch_seconds,
        checkpoint: Checkpoint::from_model(model, &cfg_hash, cfg.seed, cfg.epochs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_loss_example() {
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![1.0, 1.0];
        let mut m = Moments::default();
        adam_update(&mut p, &[3.0, -0.2], &mut m, 1, 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn adam_fixed_points() {
        let mut p = vec![0.5, -2.0];
        let mut m = Moments::default();
        for step in 1..50 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, step, 0.1);
        }
        assert_eq!(p, vec![0.5, -2.0]);
        adam_update(&mut p, &[1.0, 1.0], &mut m, 50, 0.0);
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ModelKind::Ncp, 16, 10, 0);
        assert!(c.validate().is_ok());
        assert_eq!(c.clip_norm, None);
        assert_eq!(TrainConfig::new(ModelKind::Lstm, 16, 10, 0).clip_norm, Some(1.0));
        c.epochs = 0;
        assert!(c.validate().unwrap_err().is_config_error());
    }
}
