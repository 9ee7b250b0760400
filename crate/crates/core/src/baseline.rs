//! Discrete-time comparison baseline: a ReLU MLP trained by backprop with
//! Adam at batch size one on the squared error against one-hot targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{one_hot, Dataset};
use crate::linalg::{argmax, Matrix};
use crate::schedule::{dither_labels, DitherRatio, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    Invalid(String),
    #[error("training diverged at sample {sample}: loss is {loss}")]
    Diverged { sample: usize, loss: f64 },
    #[error(transparent)]
    Ratio(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub layer_widths: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of presentations (samples are cycled in the given order).
    pub num_samples: usize,
    /// Fraction of samples trained against the previous label.
    pub dither_ratio: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            layer_widths: vec![49, 49, 10],
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            num_samples: 5000,
            dither_ratio: 0.0,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::Invalid(m.to_string()));
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return bad("need at least two positive layer widths");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps >= 0.0) {
            return bad("need 0 <= beta < 1 and eps >= 0");
        }
        if !(0.0..=1.0).contains(&self.dither_ratio) {
            return bad("dither_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Adam moments for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Descends along `grad` (a loss gradient).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// ReLU hidden layers, linear output, bias on every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `d_l x (d_{l-1} + 1)`, bias in the last column.
    pub weights: Vec<Matrix>,
}

impl Mlp {
    /// Xavier-normal weights, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / (w[0] + w[1]) as f64).sqrt()).expect("finite std");
                let mut m = Matrix::zeros(w[1], w[0] + 1);
                for r in 0..w[1] {
                    for c in 0..w[0] {
                        m.set(r, c, normal.sample(&mut rng));
                    }
                }
                m
            })
            .collect();
        Self { weights }
    }

    /// Activations of every layer, input first.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            let mut h = w.matvec(acts.last().unwrap());
            if l < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(h);
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().unwrap()
    }

    /// `0.5 * |out - y|^2`.
    pub fn loss(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * self.predict(x).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    /// Loss and its gradient with respect to every weight matrix.
    pub fn gradients(&self, x: &[f64], y: &[f64]) -> (f64, Vec<Matrix>) {
        let acts = self.forward(x);
        let out = acts.last().unwrap();
        let mut delta: Vec<f64> = out.iter().zip(y).map(|(a, b)| a - b).collect();
        let loss = 0.5 * delta.iter().map(|d| d * d).sum::<f64>();
        let mut grads = vec![Matrix::zeros(0, 0); self.weights.len()];
        for l in (0..self.weights.len()).rev() {
            let mut input = acts[l].clone();
            input.push(1.0);
            grads[l] = Matrix::outer(&delta, &input);
            if l > 0 {
                let w = &self.weights[l];
                delta = (0..acts[l].len())
                    .map(|c| {
                        let back: f64 = (0..w.rows).map(|r| w.get(r, c) * delta[r]).sum();
                        if acts[l][c] > 0.0 {
                            back
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        (loss, grads)
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data.inputs.iter().zip(&data.labels).filter(|(x, &c)| argmax(&self.predict(x)) == c).count();
        hits as f64 / data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub model: Mlp,
    /// Moving-average training accuracy after every presentation.
    pub train_trace: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Window of the exponential moving average used for training accuracy.
pub const ACCURACY_WINDOW: f64 = 100.0;

/// Trains on `train` in its stored order (cycled up to `num_samples`),
/// optionally pairing a `dither_ratio` fraction of samples with the
/// previous label, and scores `test`.
pub fn train_baseline(cfg: &BaselineConfig, train: &Dataset, test: &Dataset) -> Result<BaselineResult, BaselineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(BaselineError::Invalid("empty training set".into()));
    }
    let widths = &cfg.layer_widths;
    if train.input_dim() != widths[0] || train.num_classes != *widths.last().unwrap() {
        return Err(BaselineError::Invalid(format!(
            "dataset has {} inputs and {} classes, widths are {:?}",
            train.input_dim(),
            train.num_classes,
            widths
        )));
    }
    let order: Vec<usize> = (0..cfg.num_samples).map(|k| k % train.len()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| train.labels[i]).collect();
    let trained_labels = if cfg.dither_ratio > 0.0 {
        dither_labels(&labels, DitherRatio::approximate(cfg.dither_ratio, 1000)?)
    } else {
        labels.clone()
    };

    let mut model = Mlp::new(widths, cfg.seed);
    let mut opts: Vec<Adam> =
        model.weights.iter().map(|w| Adam::new(w.data.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)).collect();
    let mut ema = 0.0;
    let mut trace = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        let x = &train.inputs[i];
        let target = one_hot(trained_labels[k], train.num_classes).expect("label in range");
        let (loss, grads) = model.gradients(x, &target);
        if !loss.is_finite() {
            return Err(BaselineError::Diverged { sample: k, loss });
        }
        let hit = (argmax(&model.predict(x)) == labels[k]) as u8 as f64;
        ema += (hit - ema) / ACCURACY_WINDOW;
        trace.push(ema);
        for ((w, g), opt) in model.weights.iter_mut().zip(&grads).zip(&mut opts) {
            opt.step(&mut w.data, &g.data);
        }
    }
    let train_accuracy = trace.last().copied().unwrap_or(0.0);
    let test_accuracy = model.accuracy(test);
    Ok(BaselineResult { model, train_trace: trace, train_accuracy, test_accuracy })
}

/// Test accuracy of the dithered baseline at each delay ratio.
pub fn delay_robustness_curve(
    cfg: &BaselineConfig,
    train: &Dataset,
    test: &Dataset,
    ratios: &[f64],
) -> Result<Vec<(f64, f64)>, BaselineError> {
    ratios
        .iter()
        .map(|&r| {
            let c = BaselineConfig { dither_ratio: r, ..cfg.clone() };
            Ok((r, train_baseline(&c, train, test)?.test_accuracy))
        })
        .collect()
}
