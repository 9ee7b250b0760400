//! Experiment runner: single runs with metric checkpoints, two-axis sweeps
//! and the paired comparison against the discrete baseline.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{train_baseline, BaselineConfig, BaselineError, ACCURACY_WINDOW};
use crate::data::{load_mnist_dir, make_circles, read_points_csv, DataError, Dataset};
use crate::linalg::argmax;
use crate::network::{ConfigError, Network, NetworkConfig, NetworkError, NetworkState};
use crate::ode::{Integrator, SolverConfig, SolverError, SolverStats};
use crate::routing::{feedback_alignment, gradient_alignment};
use crate::schedule::{default_buffer_time, Interpolation, PresentationSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialization error: {0}")]
    Serialize(String),
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Serialize(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Serialize(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    /// Directory with the four IDX files; images are pooled to 7x7.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_size: Option<usize>,
        #[serde(default)]
        test_size: Option<usize>,
    },
    Circles {
        #[serde(default = "circles_train")]
        train_size: usize,
        #[serde(default = "circles_test")]
        test_size: usize,
        #[serde(default = "circles_noise")]
        noise_std: f64,
        #[serde(default = "circles_factor")]
        factor: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `x,y,label` files as written by `data::write_points_csv`.
    Csv { train: PathBuf, test: PathBuf, num_classes: usize },
}

fn circles_train() -> usize {
    2000
}

fn circles_test() -> usize {
    500
}

fn circles_noise() -> f64 {
    0.08
}

fn circles_factor() -> f64 {
    0.5
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Mnist { dir: PathBuf::from("data/mnist"), train_size: None, test_size: None }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset), HarnessError> {
        match self {
            DataConfig::Mnist { dir, train_size, test_size } => {
                let (train, test) = load_mnist_dir(dir)?;
                let train = match train_size {
                    Some(n) => train.take(*n),
                    None => train,
                };
                let test = match test_size {
                    Some(n) => test.take(*n),
                    None => test,
                };
                Ok((train, test))
            }
            DataConfig::Circles { train_size, test_size, noise_std, factor, seed } => {
                let all = make_circles(train_size + test_size, *noise_std, *factor, *seed)?;
                Ok(all.split(*test_size, seed ^ 0x5eed)?)
            }
            DataConfig::Csv { train, test, num_classes } => {
                Ok((read_points_csv(train, *num_classes)?, read_points_csv(test, *num_classes)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub sample_time: f64,
    /// Defaults to a tenth of the sample time, at most 5 ms.
    pub buffer_time: Option<f64>,
    /// Label stream lag behind the input stream; negative means early.
    pub delay: f64,
    /// Delay in units of the sample time; replaces `delay` when set.
    pub delay_ratio: Option<f64>,
    pub interpolation: Interpolation,
    /// Training presentations (the training set is cycled in reshuffled epochs).
    pub num_samples: usize,
    /// Seed of the presentation order; defaults to the network seed.
    pub order_seed: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sample_time: 0.05,
            buffer_time: None,
            delay: 0.0,
            delay_ratio: None,
            interpolation: Interpolation::Smoothstep,
            num_samples: 5000,
            order_seed: None,
        }
    }
}

impl ScheduleConfig {
    pub fn buffer(&self) -> f64 {
        self.buffer_time.unwrap_or_else(|| default_buffer_time(self.sample_time))
    }

    pub fn effective_delay(&self) -> f64 {
        self.delay_ratio.map_or(self.delay, |r| r * self.sample_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Metric checkpoint cadence in presentations.
    pub checkpoint_every: usize,
    /// Test evaluation cadence in presentations; 0 evaluates only at the end.
    pub test_every: usize,
    /// Test samples used for intermediate evaluations (the final one uses all).
    pub checkpoint_test_size: usize,
    /// Window of the exponential moving average of train accuracy.
    pub ema_window: f64,
    /// Training samples used to probe gradient alignment.
    pub alignment_probes: usize,
    /// Dense z traces are exported for this many leading presentations.
    pub trace_samples: usize,
    /// A weight matrix with a larger Frobenius norm stops the run as diverged.
    pub max_weight_norm: f64,
    /// Solver step attempts allowed within any single presentation.
    pub max_steps_per_sample: usize,
    /// Accepted steps allowed per presentation on average over the run; a
    /// stiffening system trips this long before the per-sample budget.
    pub max_mean_steps: usize,
    pub save_state: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 50,
            test_every: 0,
            checkpoint_test_size: 200,
            ema_window: ACCURACY_WINDOW,
            alignment_probes: 8,
            trace_samples: 0,
            max_weight_norm: 1e4,
            max_steps_per_sample: 50_000,
            max_mean_steps: 2_000,
            save_state: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Delay,
    /// Delay as a multiple of the sample time.
    DelayRatio,
    SampleTime,
    TauProp,
    /// Sets both plasticity time constants.
    TauPlas,
    HiddenLayers,
    HiddenWidth,
    NumSamples,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Delay => "delay",
            SweepParameter::DelayRatio => "delay_ratio",
            SweepParameter::SampleTime => "sample_time",
            SweepParameter::TauProp => "tau_prop",
            SweepParameter::TauPlas => "tau_plas",
            SweepParameter::HiddenLayers => "hidden_layers",
            SweepParameter::HiddenWidth => "hidden_width",
            SweepParameter::NumSamples => "num_samples",
        }
    }

    pub fn check(self, v: f64) -> Result<(), HarnessError> {
        let ok = match self {
            SweepParameter::Delay | SweepParameter::DelayRatio => v.is_finite(),
            SweepParameter::SampleTime | SweepParameter::TauProp => v > 0.0 && v.is_finite(),
            SweepParameter::TauPlas => v > 0.0,
            SweepParameter::HiddenLayers | SweepParameter::NumSamples => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
            SweepParameter::HiddenWidth => v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("{v} is not a valid {}", self.name())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
    pub repeats: usize,
    /// Repeat `r` runs with seed `base_seed + r`.
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { axes: Vec::new(), repeats: 1, base_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub schedule: ScheduleConfig,
    pub solver: SolverConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.network.validate()?;
        self.solver.validate()?;
        let s = &self.schedule;
        if !(s.sample_time > 0.0 && s.sample_time.is_finite()) {
            return Err(HarnessError::Config(format!("sample_time must be positive, got {}", s.sample_time)));
        }
        let b = s.buffer();
        if !(b > 0.0 && b < s.sample_time) {
            return Err(HarnessError::Config(format!("need 0 < buffer_time < sample_time, got {b}")));
        }
        if !s.effective_delay().is_finite() {
            return Err(HarnessError::Config("delay must be finite".into()));
        }
        let e = &self.eval;
        if e.checkpoint_every == 0 || !(e.ema_window >= 1.0) || e.max_steps_per_sample == 0 || e.max_mean_steps == 0 {
            return Err(HarnessError::Config(
                "checkpoint_every, ema_window, max_steps_per_sample and max_mean_steps must be positive".into(),
            ));
        }
        if !(e.max_weight_norm > 0.0) {
            return Err(HarnessError::Config("max_weight_norm must be positive".into()));
        }
        if self.sweep.axes.len() > 2 {
            return Err(HarnessError::Config(format!("at most two sweep axes, got {}", self.sweep.axes.len())));
        }
        if self.sweep.repeats == 0 {
            return Err(HarnessError::Config("repeats must be at least 1".into()));
        }
        for axis in &self.sweep.axes {
            if axis.values.is_empty() {
                return Err(HarnessError::Config(format!("sweep axis {} has no values", axis.parameter.name())));
            }
            for &v in &axis.values {
                axis.parameter.check(v)?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with one sweep assignment applied per entry.
    pub fn with_assignments(&self, assignments: &[(SweepParameter, f64)]) -> Result<Self, HarnessError> {
        let mut cfg = self.clone();
        for &(p, v) in assignments {
            p.check(v)?;
            let widths = &mut cfg.network.layer_widths;
            match p {
                SweepParameter::Delay => {
                    cfg.schedule.delay = v;
                    cfg.schedule.delay_ratio = None;
                }
                SweepParameter::DelayRatio => cfg.schedule.delay_ratio = Some(v),
                SweepParameter::SampleTime => cfg.schedule.sample_time = v,
                SweepParameter::TauProp => cfg.network.tau_prop = v,
                SweepParameter::TauPlas => {
                    cfg.network.tau_plas_w = v;
                    cfg.network.tau_plas_v = v;
                }
                SweepParameter::HiddenLayers | SweepParameter::HiddenWidth => {
                    if widths.len() < 3 && p == SweepParameter::HiddenWidth {
                        return Err(HarnessError::Config("hidden_width needs at least one hidden layer".into()));
                    }
                    let hidden = if p == SweepParameter::HiddenWidth {
                        v as usize
                    } else {
                        widths.get(1).copied().filter(|_| widths.len() > 2).unwrap_or(widths[0])
                    };
                    let depth = if p == SweepParameter::HiddenLayers { v as usize } else { widths.len() - 2 };
                    let (first, last) = (widths[0], *widths.last().unwrap());
                    *widths = std::iter::once(first).chain(std::iter::repeat(hidden).take(depth)).chain([last]).collect();
                    if !cfg.network.activations.is_empty() {
                        log::warn!("sweeping {} resets explicit activations to the default", p.name());
                        cfg.network.activations.clear();
                    }
                }
                SweepParameter::NumSamples => cfg.schedule.num_samples = v as usize,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.network.seed = seed;
        cfg.schedule.order_seed = Some(seed);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Presentations completed.
    pub sample: usize,
    pub sim_time: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub w_norms: Vec<f64>,
    pub v_norms: Vec<f64>,
    /// Cosine between each trainable `V_l` and `W_{l+1}^T`.
    pub feedback_alignment: Vec<Option<f64>>,
    /// Cosine between each layer's update and the backprop update.
    pub gradient_alignment: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Diverged,
    StepBudget,
    Integration,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    /// Presentation during which the run stopped.
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub output: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub samples_trained: usize,
    pub final_train_accuracy: f64,
    /// Frozen-dynamics accuracy on the whole test set.
    pub final_test_accuracy: Option<f64>,
    pub solver: SolverStats,
    pub wall_time_s: f64,
    pub failure: Option<Failure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<TracePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<NetworkState>,
}

fn one_hot_rows(d: &Dataset) -> Vec<Vec<f64>> {
    d.one_hot_labels()
}

fn check_data(net: &Network, train: &Dataset, test: &Dataset) -> Result<(), HarnessError> {
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Config(format!("empty dataset ({} train, {} test samples)", train.len(), test.len())));
    }
    for d in [train, test] {
        if d.input_dim() != net.input_dim() || d.num_classes != net.output_dim() {
            return Err(HarnessError::Config(format!(
                "{} has {} inputs and {} classes, network is {:?}",
                d.name,
                d.input_dim(),
                d.num_classes,
                net.widths()
            )));
        }
    }
    Ok(())
}

fn schedule_for(cfg: &ExperimentConfig, inputs: Vec<Vec<f64>>, labels: Vec<Vec<f64>>) -> Result<PresentationSchedule, HarnessError> {
    let s = &cfg.schedule;
    Ok(PresentationSchedule::new(s.sample_time, s.buffer(), s.effective_delay(), 0.0, inputs, labels)?.with_interpolation(s.interpolation))
}

/// Frozen evaluation of `state` on `test` with the timing of `cfg`.
pub fn evaluate_state(cfg: &ExperimentConfig, state: &NetworkState, test: &Dataset) -> Result<f64, HarnessError> {
    let net = Network::new(cfg.network.clone())?;
    if test.is_empty() {
        return Err(HarnessError::Config("empty test set".into()));
    }
    let sched = schedule_for(cfg, test.inputs.clone(), one_hot_rows(test))?;
    Ok(net.evaluate(state, &sched, &cfg.solver)?.accuracy)
}

/// Loads the configured data and runs once.
pub fn run_single(cfg: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    run_with_data(cfg, &train, &test)
}

/// One training run on preloaded data. Integration failures and divergence
/// end the run early and are reported in [`RunRecord::failure`]; the last
/// finite state is still evaluated.
pub fn run_with_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let net = Network::new(cfg.network.clone())?;
    check_data(&net, train, test)?;
    let ev = &cfg.eval;
    let layout = net.layout().clone();
    let n = cfg.schedule.num_samples;
    let order = train.presentation_order(n, cfg.schedule.order_seed.unwrap_or(cfg.network.seed));

    let probes: Vec<(Vec<f64>, Vec<f64>)> = (0..ev.alignment_probes.min(train.len()))
        .map(|i| (train.inputs[i].clone(), crate::data::one_hot(train.labels[i], train.num_classes).unwrap()))
        .collect();
    let test_labels = one_hot_rows(test);
    let k_test = ev.checkpoint_test_size.clamp(1, test.len());
    let checkpoint_test = schedule_for(cfg, test.inputs[..k_test].to_vec(), test_labels[..k_test].to_vec())?;
    let full_test = schedule_for(cfg, test.inputs.clone(), test_labels)?;

    let checkpoint = |sample: usize, t: f64, y: &[f64], ema: f64, with_test: bool| -> Result<Checkpoint, HarnessError> {
        let state = NetworkState::unflatten(&layout, t, y)?;
        let test_accuracy =
            if with_test { Some(net.evaluate(&state, &checkpoint_test, &cfg.solver)?.accuracy) } else { None };
        Ok(Checkpoint {
            sample,
            sim_time: t,
            train_accuracy: ema,
            test_accuracy,
            w_norms: state.w_norms(),
            v_norms: state.v_norms(),
            feedback_alignment: feedback_alignment(&net, &state),
            gradient_alignment: gradient_alignment(&net, &state, &probes),
        })
    };

    let mut y = net.init_state().flatten();
    let mut checkpoints = vec![checkpoint(0, 0.0, &y, 0.0, ev.test_every > 0)?];
    let mut failure = None;
    let mut traces = Vec::new();
    let mut ema = 0.0;
    let mut hits = 0usize;
    let mut trained = 0usize;
    let mut stats = SolverStats::default();
    let mut t_now = 0.0;

    if n > 0 {
        let inputs: Vec<Vec<f64>> = order.iter().map(|&i| train.inputs[i].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| train.labels[i]).collect();
        let targets: Vec<Vec<f64>> =
            labels.iter().map(|&l| crate::data::one_hot(l, train.num_classes).unwrap()).collect();
        let schedule = schedule_for(cfg, inputs, targets)?;
        let solver = SolverConfig { max_steps: ev.max_steps_per_sample, ..cfg.solver };
        let mut integrator = Integrator::new(solver)?;
        let out = layout.z(layout.num_layers() - 1);
        let wr = layout.forward_weights();
        let alpha = 1.0 / ev.ema_window;
        let trace_end = if ev.trace_samples > 0 { schedule.sample_end(ev.trace_samples.min(n) - 1) } else { f64::NEG_INFINITY };
        let mut last_good = y.clone();
        let mut ck_err = None;
        let trace_label_dim = train.num_classes;
        let steps = Cell::new(0u64);

        let result = net.train_observed(
            &mut y,
            &schedule,
            &mut integrator,
            |k, y| {
                trained = k + 1;
                t_now = schedule.sample_end(k);
                let hit = (argmax(&y[out.clone()]) == labels[k]) as u8 as f64;
                ema += alpha * (hit - ema);
                hits += 1;
                let norm = y[wr.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() || norm > ev.max_weight_norm {
                    failure = Some(Failure {
                        kind: FailureKind::Diverged,
                        sample: k,
                        message: format!("forward weight norm {norm:.3e} exceeds {:.3e}", ev.max_weight_norm),
                    });
                    return false;
                }
                let budget = ev.max_mean_steps as u64 * trained as u64;
                if steps.get() > budget {
                    failure = Some(Failure {
                        kind: FailureKind::StepBudget,
                        sample: k,
                        message: format!("{} steps after {trained} samples exceed {budget}", steps.get()),
                    });
                    return false;
                }
                last_good.copy_from_slice(y);
                let bias_corrected = ema / (1.0 - (1.0 - alpha).powi(hits as i32));
                if trained % ev.checkpoint_every == 0 || trained == n {
                    let with_test = ev.test_every > 0 && (trained % ev.test_every == 0);
                    match checkpoint(trained, t_now, y, bias_corrected, with_test) {
                        Ok(c) => checkpoints.push(c),
                        Err(e) => {
                            ck_err = Some(e);
                            return false;
                        }
                    }
                }
                true
            },
            |t, y| {
                steps.set(steps.get() + 1);
                if t <= trace_end {
                    let mut target = vec![0.0; trace_label_dim];
                    schedule.label_into(t, &mut target);
                    traces.push(TracePoint { t, output: y[out.clone()].to_vec(), target });
                }
            },
        );
        stats = integrator.stats();
        if let Some(e) = ck_err {
            return Err(e);
        }
        if let Err(e) = result {
            let kind = match &e {
                NetworkError::Solver(SolverError::BudgetExhausted { .. }) => FailureKind::StepBudget,
                _ => FailureKind::Integration,
            };
            failure = Some(Failure { kind, sample: trained, message: e.to_string() });
        }
        if failure.is_some() {
            y.copy_from_slice(&last_good);
            t_now = if trained > 0 { schedule.sample_end(trained - 1) } else { 0.0 };
        }
    }

    let final_train_accuracy = if hits > 0 { ema / (1.0 - (1.0 - 1.0 / ev.ema_window).powi(hits as i32)) } else { 0.0 };
    let state = NetworkState::unflatten(&layout, t_now, &y)?;
    let final_test_accuracy = match net.evaluate(&state, &full_test, &cfg.solver) {
        Ok(e) => Some(e.accuracy),
        Err(e) => {
            failure.get_or_insert(Failure { kind: FailureKind::Evaluation, sample: trained, message: e.to_string() });
            None
        }
    };
    if let (Some(last), Some(acc)) = (checkpoints.last_mut(), final_test_accuracy) {
        if last.sample == trained {
            last.test_accuracy = Some(acc);
        }
    }
    Ok(RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.network.seed,
        checkpoints,
        samples_trained: trained,
        final_train_accuracy,
        final_test_accuracy,
        solver: stats,
        wall_time_s: started.elapsed().as_secs_f64(),
        failure,
        traces,
        final_state: ev.save_state.then_some(state),
    })
}

/// One heatmap cell: mean and sample standard deviation of the final test
/// accuracy over the repeats that produced one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub param1: String,
    pub value1: f64,
    pub param2: String,
    pub value2: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub assignments: Vec<(SweepParameter, f64)>,
    pub records: Vec<RunRecord>,
    /// Runs that could not start (for example an invalid combination).
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub rows: Vec<HeatmapRow>,
    pub cells: Vec<SweepCell>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn grid(axes: &[SweepAxis]) -> Vec<Vec<(SweepParameter, f64)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |&v| {
                    let mut next = c.clone();
                    next.push((axis.parameter, v));
                    next
                })
            })
            .collect();
    }
    cells
}

/// Runs every cell of the grid `repeats` times in parallel. Results are
/// independent of scheduling: each run depends only on its own config.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    run_sweep_with_data(cfg, &train, &test)
}

pub fn run_sweep_with_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<SweepResult, HarnessError> {
    cfg.validate()?;
    let cells = grid(&cfg.sweep.axes);
    let repeats = cfg.sweep.repeats;
    let jobs: Vec<(usize, u64)> =
        (0..cells.len()).flat_map(|c| (0..repeats as u64).map(move |r| (c, r))).collect();
    let outcomes: Vec<Result<RunRecord, String>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let run = cfg.with_assignments(&cells[c]).and_then(|cell| {
                let seeded = cell.with_seed(cfg.sweep.base_seed + r);
                run_with_data(&seeded, train, test)
            });
            run.map_err(|e| e.to_string())
        })
        .collect();

    let mut out = Vec::with_capacity(cells.len());
    let mut rows = Vec::with_capacity(cells.len());
    let mut it = outcomes.into_iter();
    for assignments in cells {
        let mut records = Vec::new();
        let mut errors = Vec::new();
        for _ in 0..repeats {
            match it.next().expect("one outcome per job") {
                Ok(r) => records.push(r),
                Err(e) => errors.push(e),
            }
        }
        let accs: Vec<f64> = records.iter().filter_map(|r| r.final_test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let failures = errors.len() + records.iter().filter(|r| r.failure.is_some()).count();
        let axis = |i: usize| assignments.get(i).map_or((String::new(), f64::NAN), |(p, v)| (p.name().to_string(), *v));
        let ((param1, value1), (param2, value2)) = (axis(0), axis(1));
        rows.push(HeatmapRow {
            param1,
            value1,
            param2,
            value2,
            mean_accuracy: mean,
            std_accuracy: std,
            n: accs.len(),
            failures,
        });
        out.push(SweepCell { assignments, records, errors });
    }
    Ok(SweepResult { config_hash: cfg.hash(), rows, cells: out })
}

/// Mean and standard deviation of one model's accuracies across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub continuous: Vec<RunRecord>,
    /// `(train, test)` accuracy of the discrete model per seed.
    pub discrete: Vec<(f64, f64)>,
}

impl Comparison {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Continuous model against the Adam-trained network of the same widths,
/// seeds and presentation order. `base` supplies the optimizer settings;
/// widths, budget and seed are taken from `cfg`.
pub fn compare_with_baseline(cfg: &ExperimentConfig, base: &BaselineConfig) -> Result<Comparison, HarnessError> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    compare_with_data(cfg, base, &train, &test)
}

pub fn compare_with_data(
    cfg: &ExperimentConfig,
    base: &BaselineConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Comparison, HarnessError> {
    cfg.validate()?;
    check_data(&Network::new(cfg.network.clone())?, train, test)?;
    if cfg.schedule.num_samples == 0 {
        return Err(HarnessError::Config("comparison needs a positive sample budget".into()));
    }
    let seeds: Vec<u64> = (0..cfg.sweep.repeats as u64).map(|r| cfg.sweep.base_seed + r).collect();
    let pairs: Vec<Result<(RunRecord, (f64, f64)), HarnessError>> = seeds
        .par_iter()
        .map(|&seed| {
            let c = cfg.with_seed(seed);
            let record = run_with_data(&c, train, test)?;
            let n = c.schedule.num_samples;
            let ordered = train.subset(&train.presentation_order(n, seed));
            let bc = BaselineConfig {
                layer_widths: c.network.layer_widths.clone(),
                num_samples: n,
                seed,
                ..base.clone()
            };
            let b = train_baseline(&bc, &ordered, test)?;
            Ok((record, (b.train_accuracy, b.test_accuracy)))
        })
        .collect();
    let mut continuous = Vec::new();
    let mut discrete = Vec::new();
    for p in pairs {
        let (r, d) = p?;
        continuous.push(r);
        discrete.push(d);
    }
    let row = |model: &str, train: Vec<f64>, test: Vec<f64>| {
        let (train_mean, train_std) = mean_std(&train);
        let (test_mean, test_std) = mean_std(&test);
        ComparisonRow { model: model.into(), train_mean, train_std, test_mean, test_std, n: test.len() }
    };
    let rows = vec![
        row(
            "continuous",
            continuous.iter().map(|r| r.final_train_accuracy).collect(),
            continuous.iter().filter_map(|r| r.final_test_accuracy).collect(),
        ),
        row("discrete", discrete.iter().map(|d| d.0).collect(), discrete.iter().map(|d| d.1).collect()),
    ];
    Ok(Comparison { rows, continuous, discrete })
}

fn create(path: &Path) -> Result<fs::File, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    }
    fs::File::create(path).map_err(|source| HarnessError::Io { path: path.into(), source })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(create(path.as_ref())?, value)?;
    Ok(())
}

/// `param1,value1,param2,value2,mean_accuracy,std_accuracy,n,failures`.
pub fn write_heatmap_csv(rows: &[HeatmapRow], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.as_ref().into(), source })
}

/// `model,train_mean,train_std,test_mean,test_std,n`.
pub fn write_comparison_csv(rows: &[ComparisonRow], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.as_ref().into(), source })
}

/// `t,output_0..,target_0..`.
pub fn write_traces_csv(traces: &[TracePoint], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    let (d_out, d_tgt) = traces.first().map_or((0, 0), |p| (p.output.len(), p.target.len()));
    let mut header = vec!["t".to_string()];
    header.extend((0..d_out).map(|i| format!("output_{i}")));
    header.extend((0..d_tgt).map(|i| format!("target_{i}")));
    w.write_record(&header)?;
    for p in traces {
        let row = std::iter::once(p.t).chain(p.output.iter().copied()).chain(p.target.iter().copied());
        w.write_record(row.map(|v| v.to_string()))?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.as_ref().into(), source })
}
