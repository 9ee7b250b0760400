//! Layered continuous-time network: configuration, flat ODE state and the
//! right-hand side of the coupled activity / weight / feedback dynamics.
//!
//! For layer `l` with input `in_l` (the input stream for the first layer,
//! `z_{l-1}` otherwise, plus a trailing always-on unit when `bias` is set):
//!
//! ```text
//! pre_l = W_l in_l
//! dz_l  = (-z_l + act_l(pre_l)) / tau_prop
//! dW_l  = -W_l / tau_dec_w + m_l in_l^T / tau_plas_w,   m_l = V_l eps_l
//! dV_l  = -V_l / tau_dec_v + pre_l eps_l^T / tau_plas_v  (plastic routing only)
//! ```
//!
//! [`VDrive::Post`] swaps `pre_l` for `act_l(pre_l)` in the feedback update.
//!
//! The routed errors `eps_l` come from [`crate::routing`]. The output error is
//! the teaching signal `e = y - z_L`, so positive plasticity descends the
//! squared loss.
//!
//! Flat layout: `[z_1..z_L, vec(W_1)..vec(W_L), vec(V_1)..vec(V_L)]`, all
//! matrices row-major.

use std::ops::Range;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{argmax, matvec_into, Matrix};
use crate::ode::{Control, Integrator, SolverConfig, SolverError};
use crate::routing::{ErrorSource, RoutingKind, RoutingStrategy};
use crate::schedule::PresentationSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid network configuration: {0}")]
    Invalid(String),
    #[error("invalid routing: {0}")]
    Routing(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("state does not match the network layout: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative, taking 0 at the ReLU kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Initial feedback weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VInit {
    Constant { value: f64 },
    /// Independent Gaussian entries, drawn from the network seed.
    Normal { std: f64 },
}

impl Default for VInit {
    fn default() -> Self {
        VInit::Constant { value: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `d_0..d_L`, input width first.
    pub layer_widths: Vec<usize>,
    /// One per non-input layer; empty means ReLU hidden layers and a linear output.
    pub activations: Vec<Activation>,
    pub tau_prop: f64,
    pub tau_plas_w: f64,
    pub tau_plas_v: f64,
    /// May be `inf` to switch decay off.
    pub tau_dec_w: f64,
    pub tau_dec_v: f64,
    pub routing: RoutingKind,
    pub error_source: ErrorSource,
    /// Append an always-on input unit to every layer.
    pub bias: bool,
    /// Multiply the modulatory drive by the activation derivative.
    pub derivative_gate: bool,
    /// Presynaptic factor of the feedback-weight update.
    pub v_drive: VDrive,
    pub seed: u64,
    /// Multiplier on the Xavier-normal standard deviation.
    pub init_gain: f64,
    pub init_v: VInit,
    /// White-noise amplitude on the activity derivative, state units per sqrt(s).
    pub noise_std: f64,
    /// Correlation time of the noise realisation.
    pub noise_dt: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layer_widths: vec![49, 49, 10],
            activations: Vec::new(),
            tau_prop: 0.01,
            tau_plas_w: 10.0,
            tau_plas_v: 10.0,
            tau_dec_w: 1200.0,
            tau_dec_v: 1200.0,
            routing: RoutingKind::Kp,
            error_source: ErrorSource::Layerwise,
            bias: true,
            derivative_gate: false,
            v_drive: VDrive::Pre,
            seed: 0,
            init_gain: 1.0,
            init_v: VInit::default(),
            noise_std: 0.0,
            noise_dt: 1e-3,
        }
    }
}

impl NetworkConfig {
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if let Some(a) = self.activations.get(layer) {
            return *a;
        }
        if layer + 1 == self.num_layers() {
            Activation::Linear
        } else {
            Activation::Relu
        }
    }

    pub fn routing_strategy(&self) -> Result<RoutingStrategy, ConfigError> {
        RoutingStrategy::new(self.routing, self.error_source)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.layer_widths.len() < 2 {
            return bad("need at least an input and an output layer".into());
        }
        if self.layer_widths.iter().any(|&d| d == 0) {
            return bad(format!("all widths must be positive, got {:?}", self.layer_widths));
        }
        if !self.activations.is_empty() && self.activations.len() != self.num_layers() {
            return bad(format!("{} activations for {} layers", self.activations.len(), self.num_layers()));
        }
        let taus = [self.tau_prop, self.tau_plas_w, self.tau_plas_v, self.tau_dec_w, self.tau_dec_v];
        if taus.iter().any(|t| !(*t > 0.0) || t.is_nan()) {
            return bad(format!("time constants must be positive, got {taus:?}"));
        }
        if !self.tau_prop.is_finite() || !self.tau_plas_w.is_finite() || !self.tau_plas_v.is_finite() {
            return bad("tau_prop and tau_plas must be finite".into());
        }
        if !(self.init_gain.is_finite() && self.init_gain >= 0.0) {
            return bad("init_gain must be finite and non-negative".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative".into());
        }
        if self.noise_std > 0.0 && !(self.noise_dt > 0.0 && self.noise_dt.is_finite()) {
            return bad("noise_dt must be positive".into());
        }
        if let VInit::Normal { std } = self.init_v {
            if !(std >= 0.0 && std.is_finite()) {
                return bad("init_v std must be finite and non-negative".into());
            }
        }
        self.routing_strategy()?;
        Ok(())
    }

    fn warn_timescales(&self) {
        let ordered = |a: f64, b: f64| a < b;
        for (plas, dec, name) in [(self.tau_plas_w, self.tau_dec_w, "W"), (self.tau_plas_v, self.tau_dec_v, "V")] {
            if !(ordered(self.tau_prop, plas) && ordered(plas, dec)) {
                warn!(
                    "timescales for {name} are not separated: tau_prop = {}, tau_plas = {plas}, tau_dec = {dec}",
                    self.tau_prop
                );
            }
        }
    }
}

/// Offsets of every block inside the flat state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    widths: Vec<usize>,
    in_cols: Vec<usize>,
    src_dims: Vec<usize>,
    z_off: Vec<usize>,
    w_off: Vec<usize>,
    v_off: Vec<usize>,
    len: usize,
}

impl Layout {
    fn new(widths: &[usize], bias: bool, routing: &RoutingStrategy) -> Self {
        let layers = widths.len() - 1;
        let in_cols: Vec<usize> = (0..layers).map(|l| widths[l] + bias as usize).collect();
        let src_dims: Vec<usize> = (0..layers).map(|l| routing.source_dim(widths, l)).collect();
        let mut off = 0;
        let mut z_off = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            z_off.push(off);
            off += widths[l + 1];
        }
        z_off.push(off);
        let mut w_off = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            w_off.push(off);
            off += widths[l + 1] * in_cols[l];
        }
        w_off.push(off);
        let mut v_off = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            v_off.push(off);
            off += widths[l + 1] * src_dims[l];
        }
        v_off.push(off);
        Self { widths: widths.to_vec(), in_cols, src_dims, z_off, w_off, v_off, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
    /// Width of (0-based) layer `l`, i.e. `d_{l+1}`.
    pub fn width(&self, l: usize) -> usize {
        self.widths[l + 1]
    }
    pub fn in_cols(&self, l: usize) -> usize {
        self.in_cols[l]
    }
    pub fn src_dim(&self, l: usize) -> usize {
        self.src_dims[l]
    }
    pub fn z(&self, l: usize) -> Range<usize> {
        self.z_off[l]..self.z_off[l + 1]
    }
    pub fn w(&self, l: usize) -> Range<usize> {
        self.w_off[l]..self.w_off[l + 1]
    }
    pub fn v(&self, l: usize) -> Range<usize> {
        self.v_off[l]..self.v_off[l + 1]
    }
    /// All activities.
    pub fn activities(&self) -> Range<usize> {
        0..self.z_off[self.num_layers()]
    }
    /// All forward weights.
    pub fn forward_weights(&self) -> Range<usize> {
        self.w_off[0]..self.w_off[self.num_layers()]
    }
    /// All feedback weights.
    pub fn feedback_weights(&self) -> Range<usize> {
        self.v_off[0]..self.len
    }
}

/// Structured view of the network state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub t: f64,
    pub z: Vec<Vec<f64>>,
    pub w: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl NetworkState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.z.iter().for_each(|z| out.extend_from_slice(z));
        self.w.iter().for_each(|w| out.extend_from_slice(&w.data));
        self.v.iter().for_each(|v| out.extend_from_slice(&v.data));
        out
    }

    pub fn unflatten(layout: &Layout, t: f64, flat: &[f64]) -> Result<Self, NetworkError> {
        if flat.len() != layout.len() {
            return Err(NetworkError::Shape(format!("expected {} values, got {}", layout.len(), flat.len())));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(NetworkError::Shape(format!("non-finite entry at index {i}")));
        }
        let n = layout.num_layers();
        let z = (0..n).map(|l| flat[layout.z(l)].to_vec()).collect();
        let w = (0..n).map(|l| Matrix::from_vec(layout.width(l), layout.in_cols(l), flat[layout.w(l)].to_vec())).collect();
        let v = (0..n).map(|l| Matrix::from_vec(layout.width(l), layout.src_dim(l), flat[layout.v(l)].to_vec())).collect();
        Ok(Self { t, z, w, v })
    }

    /// Frobenius norms of the forward weights.
    pub fn w_norms(&self) -> Vec<f64> {
        self.w.iter().map(Matrix::frobenius).collect()
    }

    /// Frobenius norms of the feedback weights.
    pub fn v_norms(&self) -> Vec<f64> {
        self.v.iter().map(Matrix::frobenius).collect()
    }
}

/// Output error source for a right-hand-side evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputError<'a> {
    /// No error; plasticity reduces to decay.
    Off,
    /// A prescribed error vector `e_L`.
    Fixed(&'a [f64]),
    /// Teaching signal `y - z_L` against this target.
    Target(&'a [f64]),
}

/// Reusable buffers for right-hand-side evaluation.
#[derive(Debug, Clone)]
pub struct Scratch {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub err: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub drive: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ErrMode {
    Off,
    Fixed,
    Target,
}

trait Params {
    fn w(&self, l: usize) -> &[f64];
    fn v(&self, l: usize) -> &[f64];
}

struct Flat<'a> {
    layout: &'a Layout,
    y: &'a [f64],
}

impl Params for Flat<'_> {
    fn w(&self, l: usize) -> &[f64] {
        &self.y[self.layout.w(l)]
    }
    fn v(&self, l: usize) -> &[f64] {
        &self.y[self.layout.v(l)]
    }
}

impl Params for NetworkState {
    fn w(&self, l: usize) -> &[f64] {
        &self.w[l].data
    }
    fn v(&self, l: usize) -> &[f64] {
        &self.v[l].data
    }
}

/// Presynaptic factor of the feedback-weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VDrive {
    /// Forward drive `W_l in_l`.
    #[default]
    Pre,
    /// Activated output `act_l(W_l in_l)`, the usual weight-mirror rule.
    /// With ReLU units the two differ on silent neurons, whose negative drive
    /// still moves `V` under `Pre`.
    Post,
}

/// Constants of a single neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronConstants {
    pub tau_prop: f64,
    pub tau_plas_w: f64,
    pub tau_plas_v: f64,
    pub tau_dec_w: f64,
    pub tau_dec_v: f64,
    pub activation: Activation,
}

/// Single-neuron dynamics: returns `(dz, dw, dv)` for input weights `w` on
/// input `x` and feedback weights `v` on error `e`.
pub fn per_neuron_rhs(
    w: &[f64],
    v: &[f64],
    x: &[f64],
    e: &[f64],
    z: f64,
    c: &NeuronConstants,
) -> Result<(f64, Vec<f64>, Vec<f64>), ConfigError> {
    if w.len() != x.len() || v.len() != e.len() {
        return Err(ConfigError::Invalid(format!(
            "shape mismatch: |w| = {}, |x| = {}, |v| = {}, |e| = {}",
            w.len(),
            x.len(),
            v.len(),
            e.len()
        )));
    }
    let pre: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let drive: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
    let dz = (-z + c.activation.apply(pre)) / c.tau_prop;
    let dw = w.iter().zip(x).map(|(wi, xi)| -wi / c.tau_dec_w + drive * xi / c.tau_plas_w).collect();
    let dv = v.iter().zip(e).map(|(vi, ei)| -vi / c.tau_dec_v + pre * ei / c.tau_plas_v).collect();
    Ok((dz, dw, dv))
}

/// Predictions of a frozen network on a test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    routing: RoutingStrategy,
    layout: Layout,
    acts: Vec<Activation>,
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        cfg.warn_timescales();
        let routing = cfg.routing_strategy()?;
        let layout = Layout::new(&cfg.layer_widths, cfg.bias, &routing);
        let acts = (0..cfg.num_layers()).map(|l| cfg.activation(l)).collect();
        Ok(Self { cfg, routing, layout, acts })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }
    pub fn layout(&self) -> &Layout {
        &self.layout
    }
    pub fn routing(&self) -> RoutingStrategy {
        self.routing
    }
    pub fn widths(&self) -> &[usize] {
        &self.cfg.layer_widths
    }
    pub fn num_layers(&self) -> usize {
        self.cfg.num_layers()
    }
    pub fn input_dim(&self) -> usize {
        self.cfg.layer_widths[0]
    }
    pub fn output_dim(&self) -> usize {
        *self.cfg.layer_widths.last().unwrap()
    }

    /// Same network under a different routing strategy. Feedback shapes may
    /// differ, so only forward weights carry over meaningfully.
    pub fn with_routing(&self, routing: RoutingStrategy) -> Self {
        let cfg = NetworkConfig { routing: routing.kind, error_source: routing.source, ..self.cfg.clone() };
        let layout = Layout::new(&cfg.layer_widths, cfg.bias, &routing);
        Self { cfg, routing, layout, acts: self.acts.clone() }
    }

    pub fn scratch(&self) -> Scratch {
        let n = self.num_layers();
        Scratch {
            x: vec![0.0; self.input_dim()],
            target: vec![0.0; self.output_dim()],
            err: vec![0.0; self.output_dim()],
            pre: (0..n).map(|l| vec![0.0; self.layout.width(l)]).collect(),
            eps: (0..n).map(|l| vec![0.0; self.layout.src_dim(l)]).collect(),
            drive: (0..n).map(|l| vec![0.0; self.layout.width(l)]).collect(),
        }
    }

    /// Xavier-normal forward weights (zero bias column), feedback per
    /// `init_v`, identity feedback on the output layer, zero activity.
    pub fn init_state(&self) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let n = self.num_layers();
        let lay = &self.layout;
        let mut w = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (self.widths()[l], lay.width(l));
            let std = self.cfg.init_gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut m = Matrix::zeros(fan_out, lay.in_cols(l));
            for r in 0..fan_out {
                for c in 0..fan_in {
                    m.set(r, c, normal.sample(&mut rng));
                }
            }
            w.push(m);
        }
        let mut v = Vec::with_capacity(n);
        for l in 0..n {
            let (rows, cols) = (lay.width(l), lay.src_dim(l));
            let m = if l + 1 == n {
                Matrix::identity(rows)
            } else {
                match self.cfg.init_v {
                    VInit::Constant { value } => Matrix::from_vec(rows, cols, vec![value; rows * cols]),
                    VInit::Normal { std } => {
                        let normal = Normal::new(0.0, std).expect("finite std");
                        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
                    }
                }
            };
            v.push(m);
        }
        let z = (0..n).map(|l| vec![0.0; lay.width(l)]).collect();
        let mut state = NetworkState { t: 0.0, z, w, v };
        if self.routing.kind == RoutingKind::Tied {
            let mut flat = state.flatten();
            self.sync_tied(&mut flat);
            state = NetworkState::unflatten(lay, 0.0, &flat).expect("fresh state is finite");
        }
        state
    }

    fn check_flat(&self, y: &[f64]) -> Result<(), NetworkError> {
        if y.len() != self.layout.len() {
            return Err(NetworkError::Shape(format!("expected {} values, got {}", self.layout.len(), y.len())));
        }
        Ok(())
    }

    fn input_of<'a>(&self, l: usize, x: &'a [f64], y: &'a [f64]) -> &'a [f64] {
        if l == 0 {
            x
        } else {
            &y[self.layout.z(l - 1)]
        }
    }

    /// Pre-activations `W_l in_l` from the activities stored in `y`.
    pub(crate) fn forward_pre(&self, y: &[f64], x: &[f64], s: &mut Scratch) {
        for l in 0..self.num_layers() {
            let input = self.input_of(l, x, y);
            matvec_into(&y[self.layout.w(l)], self.layout.width(l), self.layout.in_cols(l), input, &mut s.pre[l]);
        }
    }

    /// Routes `e` downwards, filling `s.eps` and `s.drive`. Uses `s.pre` for
    /// the optional derivative gate.
    pub(crate) fn backward(&self, y: &[f64], e: &[f64], s: &mut Scratch) {
        self.backward_with(&Flat { layout: &self.layout, y }, e, s);
    }

    fn backward_with<P: Params>(&self, p: &P, e: &[f64], s: &mut Scratch) {
        let n = self.num_layers();
        let top = n - 1;
        s.eps[top].copy_from_slice(e);
        s.drive[top].copy_from_slice(e);
        self.gate(top, s);
        for l in (0..top).rev() {
            let (lower, upper) = s.drive.split_at_mut(l + 1);
            let eps = &mut s.eps[l];
            match self.routing.source {
                ErrorSource::Layerwise => eps.copy_from_slice(&upper[0]),
                ErrorSource::Direct => eps.copy_from_slice(e),
            }
            let drive = &mut lower[l];
            match self.routing.kind {
                RoutingKind::Tied => {
                    // V_l = W_{l+1}^T restricted to the non-bias columns.
                    let w = p.w(l + 1);
                    let cols = self.layout.in_cols(l + 1);
                    drive.fill(0.0);
                    for (r, er) in eps.iter().enumerate() {
                        let row = &w[r * cols..r * cols + drive.len()];
                        for (d, wv) in drive.iter_mut().zip(row) {
                            *d += wv * er;
                        }
                    }
                }
                _ => matvec_into(p.v(l), drive.len(), eps.len(), eps, drive),
            }
            self.gate(l, s);
        }
    }

    #[inline]
    fn gate(&self, l: usize, s: &mut Scratch) {
        if self.cfg.derivative_gate {
            let act = self.acts[l];
            for (d, p) in s.drive[l].iter_mut().zip(&s.pre[l]) {
                *d *= act.derivative(*p);
            }
        }
    }

    /// Piecewise-constant Gaussian noise for activity `i` at time `t`.
    fn noise(&self, t: f64, i: usize) -> f64 {
        let bin = (t / self.cfg.noise_dt).floor() as i64 as u64;
        let h = splitmix64(self.cfg.seed ^ splitmix64(bin.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64));
        let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2 = ((splitmix64(h) >> 11) as f64) / (1u64 << 53) as f64;
        let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        g * self.cfg.noise_std / self.cfg.noise_dt.sqrt()
    }

    fn rhs_core(&self, t: f64, y: &[f64], dy: &mut [f64], mode: ErrMode, s: &mut Scratch) {
        let n = self.num_layers();
        let top = n - 1;
        let lay = &self.layout;
        let x = std::mem::take(&mut s.x);
        self.forward_pre(y, &x, s);

        for l in 0..n {
            let act = self.acts[l];
            let zr = lay.z(l);
            for ((d, z), p) in dy[zr.clone()].iter_mut().zip(&y[zr]).zip(&s.pre[l]) {
                *d = (-z + act.apply(*p)) / self.cfg.tau_prop;
            }
        }
        if self.cfg.noise_std > 0.0 {
            for i in lay.activities() {
                dy[i] += self.noise(t, i);
            }
        }

        let active = match mode {
            ErrMode::Off => false,
            ErrMode::Fixed => true,
            ErrMode::Target => {
                let out = &y[lay.z(top)];
                for ((e, target), z) in s.err.iter_mut().zip(&s.target).zip(out) {
                    *e = target - z;
                }
                true
            }
        };
        if active {
            let e = std::mem::take(&mut s.err);
            self.backward(y, &e, s);
            s.err = e;
        }

        let (dec_w, plas_w) = (1.0 / self.cfg.tau_dec_w, 1.0 / self.cfg.tau_plas_w);
        for l in 0..n {
            let input = self.input_of(l, &x, y);
            let cols = lay.in_cols(l);
            let wr = lay.w(l);
            let (w, dw) = (&y[wr.clone()], &mut dy[wr]);
            for r in 0..lay.width(l) {
                let row = r * cols..(r + 1) * cols;
                let (w_row, dw_row) = (&w[row.clone()], &mut dw[row]);
                for (d, wv) in dw_row.iter_mut().zip(w_row) {
                    *d = -wv * dec_w;
                }
                if active {
                    let m = s.drive[l][r] * plas_w;
                    for (d, xi) in dw_row.iter_mut().zip(input) {
                        *d += m * xi;
                    }
                    if cols > input.len() {
                        dw_row[cols - 1] += m;
                    }
                }
            }
        }

        let (dec_v, plas_v) = (1.0 / self.cfg.tau_dec_v, 1.0 / self.cfg.tau_plas_v);
        for l in 0..n {
            let vr = lay.v(l);
            if !self.routing.v_trainable() || l == top {
                dy[vr].fill(0.0);
                continue;
            }
            let cols = lay.src_dim(l);
            let (v, dv) = (&y[vr.clone()], &mut dy[vr]);
            for (d, vv) in dv.iter_mut().zip(v) {
                *d = -vv * dec_v;
            }
            if active {
                let act = self.acts[l];
                for r in 0..lay.width(l) {
                    let pre = s.pre[l][r];
                    let p = match self.cfg.v_drive {
                        VDrive::Pre => pre,
                        VDrive::Post => act.apply(pre),
                    } * plas_v;
                    for (d, e) in dv[r * cols..(r + 1) * cols].iter_mut().zip(&s.eps[l]) {
                        *d += p * e;
                    }
                }
            }
        }
        s.x = x;
    }

    /// Derivative of the flat state for a fixed input `x` and output error.
    pub fn rhs_with(&self, t: f64, y: &[f64], dy: &mut [f64], x: &[f64], error: OutputError, s: &mut Scratch) {
        s.x.copy_from_slice(x);
        let mode = match error {
            OutputError::Off => ErrMode::Off,
            OutputError::Fixed(e) => {
                s.err.copy_from_slice(e);
                ErrMode::Fixed
            }
            OutputError::Target(target) => {
                s.target.copy_from_slice(target);
                ErrMode::Target
            }
        };
        self.rhs_core(t, y, dy, mode, s);
    }

    /// Derivative of the flat state driven by a presentation schedule: the
    /// input stream feeds the first layer and the (delayed) label stream
    /// defines the output error while it is active.
    pub fn dynamics_rhs(&self, schedule: &PresentationSchedule, t: f64, y: &[f64], dy: &mut [f64], s: &mut Scratch) {
        schedule.input_into(t, &mut s.x);
        let mode = if schedule.label_active(t) {
            schedule.label_into(t, &mut s.target);
            ErrMode::Target
        } else {
            ErrMode::Off
        };
        self.rhs_core(t, y, dy, mode, s);
    }

    fn sync_tied(&self, y: &mut [f64]) {
        let lay = &self.layout;
        let n = self.num_layers();
        for l in 0..n - 1 {
            let (rows, cols) = (lay.width(l), lay.src_dim(l));
            let w_cols = lay.in_cols(l + 1);
            let w_off = lay.w(l + 1).start;
            let v_off = lay.v(l).start;
            for r in 0..rows {
                for c in 0..cols {
                    y[v_off + r * cols + c] = y[w_off + c * w_cols + r];
                }
            }
        }
    }

    /// Flat counterpart of [`crate::routing::apply_constraints`].
    pub fn apply_constraints_flat(&self, y: &mut [f64], initial: &[f64]) {
        match self.routing.kind {
            RoutingKind::Tied => self.sync_tied(y),
            RoutingKind::Fa | RoutingKind::Dfa => {
                let r = self.layout.feedback_weights();
                y[r.clone()].copy_from_slice(&initial[r]);
            }
            RoutingKind::Kp => {}
        }
    }

    /// Equilibrium activities `z_l = act(W_l in_l)` for a constant input.
    pub fn forward_equilibrium(&self, state: &NetworkState, x: &[f64]) -> Vec<Vec<f64>> {
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let input = if l == 0 { x } else { &z[l - 1] };
            let mut pre = state.w[l].matvec(input);
            pre.iter_mut().for_each(|p| *p = self.acts[l].apply(*p));
            z.push(pre);
        }
        z
    }

    /// Network output at equilibrium.
    pub fn predict(&self, state: &NetworkState, x: &[f64]) -> Vec<f64> {
        self.forward_equilibrium(state, x).pop().unwrap()
    }

    /// Algebraic plasticity drive `m_l in_l^T` at the forward equilibrium,
    /// i.e. the update direction the dynamics integrate when activity is
    /// fully relaxed.
    pub fn equilibrium_update(&self, state: &NetworkState, x: &[f64], error: OutputError) -> Vec<Matrix> {
        let z = self.forward_equilibrium(state, x);
        let mut s = self.scratch();
        for l in 0..self.num_layers() {
            let input = if l == 0 { x } else { &z[l - 1] };
            s.pre[l] = state.w[l].matvec(input);
        }
        let out = z.last().unwrap();
        let e: Vec<f64> = match error {
            OutputError::Off => vec![0.0; self.output_dim()],
            OutputError::Fixed(e) => e.to_vec(),
            OutputError::Target(y) => y.iter().zip(out).map(|(a, b)| a - b).collect(),
        };
        self.backward_with(state, &e, &mut s);
        (0..self.num_layers())
            .map(|l| {
                let mut input = if l == 0 { x.to_vec() } else { z[l - 1].clone() };
                if self.cfg.bias {
                    input.push(1.0);
                }
                Matrix::outer(&s.drive[l], &input)
            })
            .collect()
    }

    /// Integrates the full dynamics for `window` seconds with constant input
    /// and error, activities starting at equilibrium and decay switched off,
    /// and returns `(W(T) - W(0)) * tau_plas_w / T` per layer: the
    /// window-averaged plasticity drive.
    pub fn quasi_static_update(
        &self,
        state: &NetworkState,
        x: &[f64],
        error: OutputError,
        window: f64,
        solver: &SolverConfig,
    ) -> Result<Vec<Matrix>, NetworkError> {
        let cfg = NetworkConfig { tau_dec_w: f64::INFINITY, tau_dec_v: f64::INFINITY, noise_std: 0.0, ..self.cfg.clone() };
        let net = Network { cfg, routing: self.routing, layout: self.layout.clone(), acts: self.acts.clone() };
        let mut start = state.clone();
        start.z = net.forward_equilibrium(state, x);
        let mut y = start.flatten();
        net.check_flat(&y)?;
        let mut s = net.scratch();
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| net.rhs_with(t, y, dy, x, error, &mut s);
        let mut integrator = Integrator::new(*solver)?;
        integrator.integrate(&mut rhs, 0.0, window, &mut y, &[], |_, _| Control::Continue)?;
        let scale = self.cfg.tau_plas_w / window;
        Ok((0..self.num_layers())
            .map(|l| {
                let r = self.layout.w(l);
                let data = y[r.clone()].iter().zip(&start.flatten()[r]).map(|(a, b)| (a - b) * scale).collect();
                Matrix::from_vec(self.layout.width(l), self.layout.in_cols(l), data)
            })
            .collect())
    }

    /// Trains on `schedule`, advancing the flat state `y` from the schedule
    /// start. `on_sample(k, y)` runs at the end of every plateau; returning
    /// `false` stops early. Constraint-bound routings are re-imposed after
    /// every accepted step.
    pub fn train<F>(
        &self,
        y: &mut [f64],
        schedule: &PresentationSchedule,
        integrator: &mut Integrator,
        on_sample: F,
    ) -> Result<(), NetworkError>
    where
        F: FnMut(usize, &[f64]) -> bool,
    {
        self.train_observed(y, schedule, integrator, on_sample, |_, _| {})
    }

    /// [`Network::train`] with an extra observer called after every accepted
    /// step with the step end time and state (used for dense trace export).
    pub fn train_observed<F, O>(
        &self,
        y: &mut [f64],
        schedule: &PresentationSchedule,
        integrator: &mut Integrator,
        mut on_sample: F,
        mut on_step: O,
    ) -> Result<(), NetworkError>
    where
        F: FnMut(usize, &[f64]) -> bool,
        O: FnMut(f64, &[f64]),
    {
        self.check_flat(y)?;
        self.check_schedule(schedule)?;
        let initial = y.to_vec();
        let mut s = self.scratch();
        let kind = self.routing.kind;
        let mut t = schedule.t_start();
        for k in 0..schedule.len() {
            let t1 = schedule.sample_end(k);
            let bps = schedule.breakpoints(t, t1);
            let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| self.dynamics_rhs(schedule, t, y, dy, &mut s);
            integrator.integrate(&mut rhs, t, t1, y, &bps, |info, y| {
                if kind != RoutingKind::Kp {
                    self.apply_constraints_flat(y, &initial);
                }
                on_step(info.t, y);
                Control::Continue
            })?;
            t = t1;
            if !on_sample(k, y) {
                break;
            }
        }
        Ok(())
    }

    fn check_schedule(&self, schedule: &PresentationSchedule) -> Result<(), NetworkError> {
        if schedule.input_dim() != self.input_dim() || schedule.label_dim() != self.output_dim() {
            return Err(NetworkError::Shape(format!(
                "schedule carries {}-d inputs and {}-d labels, network expects {} and {}",
                schedule.input_dim(),
                schedule.label_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Frozen-parameter evaluation: only the activities evolve, starting from
    /// zero, and each prediction is the output argmax at its plateau end.
    pub fn evaluate(
        &self,
        state: &NetworkState,
        test: &PresentationSchedule,
        solver: &SolverConfig,
    ) -> Result<Evaluation, NetworkError> {
        self.check_schedule(test)?;
        let mut full = state.flatten();
        self.check_flat(&full)?;
        let zr = self.layout.activities();
        full[zr.clone()].fill(0.0);
        let mut z = full[zr.clone()].to_vec();
        let mut s = self.scratch();
        let n = self.num_layers();
        let lay = &self.layout;
        let tau = self.cfg.tau_prop;
        let noisy = self.cfg.noise_std > 0.0;
        let mut rhs = |t: f64, zy: &[f64], dz: &mut [f64]| {
            full[zr.clone()].copy_from_slice(zy);
            test.input_into(t, &mut s.x);
            let x = std::mem::take(&mut s.x);
            self.forward_pre(&full, &x, &mut s);
            s.x = x;
            for l in 0..n {
                let act = self.acts[l];
                let r = lay.z(l);
                for ((d, zv), p) in dz[r.clone()].iter_mut().zip(&zy[r]).zip(&s.pre[l]) {
                    *d = (-zv + act.apply(*p)) / tau;
                }
            }
            if noisy {
                for (i, d) in dz.iter_mut().enumerate() {
                    *d += self.noise(t, i);
                }
            }
        };
        let mut integrator = Integrator::new(*solver)?;
        let out = lay.z(n - 1);
        let mut t = test.t_start();
        let mut predictions = Vec::with_capacity(test.len());
        for k in 0..test.len() {
            let t1 = test.sample_end(k);
            let bps = test.breakpoints(t, t1);
            integrator.integrate(&mut rhs, t, t1, &mut z, &bps, |_, _| Control::Continue)?;
            predictions.push(argmax(&z[out.clone()]));
            t = t1;
        }
        let labels: Vec<usize> = test.labels().iter().map(|y| argmax(y)).collect();
        let correct = predictions.iter().zip(&labels).filter(|(a, b)| a == b).count();
        Ok(Evaluation { accuracy: correct as f64 / labels.len() as f64, predictions, labels })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
