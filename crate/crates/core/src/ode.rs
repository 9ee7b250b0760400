//! Explicit Tsitouras 5(4) Runge–Kutta integration with PID step-size control.
//!
//! The integrator works on flat `f64` state vectors. Right-hand sides are
//! `FnMut(t, y, dy)` closures writing the derivative into `dy`; the closure
//! may keep scratch buffers but must be a pure function of `(t, y)`.
//!
//! Breakpoints are honoured exactly: a step never straddles one, and the
//! accepted step that reaches a breakpoint ends on it bit-for-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node positions.
const C: [f64; 7] = [0.0, 0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0, 1.0];

/// Strictly lower-triangular stage matrix, row `i` holds `a[i][0..i]`.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.161, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.008_480_655_492_356_989, 0.335_480_655_492_357, 0.0, 0.0, 0.0, 0.0],
    [2.897_153_057_105_493, -6.359_448_489_975_075, 4.362_295_432_869_581_5, 0.0, 0.0, 0.0],
    [
        5.325_864_828_439_257,
        -11.748_883_564_062_828,
        7.495_539_342_889_836_5,
        -0.092_495_066_361_755_25,
        0.0,
        0.0,
    ],
    [
        5.861_455_442_946_42,
        -12.920_969_317_847_11,
        8.159_367_898_576_159,
        -0.071_584_973_281_401,
        -0.028_269_050_394_068_383,
        0.0,
    ],
    [
        0.096_460_766_818_065_23,
        0.01,
        0.479_889_650_414_499_6,
        1.379_008_574_103_742,
        -3.290_069_515_436_081,
        2.324_710_524_099_774,
    ],
];

/// Fifth-order weights. The last stage is evaluated at the new point (FSAL),
/// so `B` equals the last row of `A` with a trailing zero; only the tests
/// read it.
#[cfg(test)]
const B: [f64; 7] = [
    0.096_460_766_818_065_23,
    0.01,
    0.479_889_650_414_499_6,
    1.379_008_574_103_742,
    -3.290_069_515_436_081,
    2.324_710_524_099_774,
    0.0,
];

/// `B - B_hat`: weights of the embedded error estimate `y5 - y4`.
const B_ERR: [f64; 7] = [
    -0.001_780_011_052_225_777_1,
    -0.000_816_434_459_656_746_9,
    0.007_880_878_010_261_995,
    -0.144_711_007_173_262_9,
    0.582_357_165_452_555_2,
    -0.458_082_105_929_186_97,
    1.0 / 66.0,
];

/// Method order used to scale controller exponents.
pub const ORDER: u32 = 5;

/// Consecutive rejections at `dt_min` tolerated before giving up.
const MAX_REJECTIONS_AT_MIN: usize = 20;

/// Error ratios are floored here so that `err^-k` stays finite.
const MIN_ERROR_RATIO: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("integration failure at t = {t}: {reason} (component {index})")]
    IntegrationFailure { t: f64, index: usize, reason: String },
    #[error("step budget of {max_steps} exhausted at t = {t} ({:.1}% of the interval)", progress * 100.0)]
    BudgetExhausted { max_steps: usize, t: f64, progress: f64 },
    #[error("invalid interval or breakpoints: {0}")]
    InvalidInterval(String),
}

/// Adaptive step control parameters.
///
/// The controller update is multiplicative:
/// `dt_next = dt * safety * err^-kp * err_prev^-ki * err_prev2^-kd`,
/// so the default `ki < 0` rewards a previous error below one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub safety: f64,
    pub pid_kp: f64,
    pub pid_ki: f64,
    pub pid_kd: f64,
    /// Step attempts (accepted plus rejected) allowed per `integrate` call.
    pub max_steps: usize,
    /// Reuse the last stage of an accepted step as the first stage of the next.
    pub fsal: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 2e-3,
            atol: 1e-5,
            dt_init: 1e-4,
            dt_min: 1e-10,
            dt_max: 0.1,
            safety: 0.9,
            pid_kp: 0.7 / ORDER as f64,
            pid_ki: -0.4 / ORDER as f64,
            pid_kd: 0.0,
            max_steps: 50_000_000,
            fsal: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: &str| Err(SolverError::InvalidConfig(msg.to_string()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_init && self.dt_init <= self.dt_max) {
            return bad("require 0 < dt_min <= dt_init <= dt_max");
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return bad("safety must lie in (0, 1)");
        }
        if ![self.pid_kp, self.pid_ki, self.pid_kd].iter().all(|g| g.is_finite()) {
            return bad("controller gains must be finite");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// Result of a single controlled step attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub t_new: f64,
    pub dt_used: f64,
    pub dt_next: f64,
    pub error_ratio: f64,
    pub state_new: Vec<f64>,
}

/// Counters accumulated over the lifetime of an [`Integrator`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: u64,
    pub rejected: u64,
    pub rhs_evals: u64,
}

/// Information handed to the observer after every accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub t: f64,
    pub dt_used: f64,
    pub error_ratio: f64,
    /// True when the step ended on a breakpoint (or on `t1`).
    pub at_breakpoint: bool,
}

/// What the observer did with the state it was handed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// The observer overwrote part of the state; cached stages are discarded.
    StateModified,
}

/// Mixed absolute/relative RMS norm of an error estimate.
pub fn error_norm(err: &[f64], y_old: &[f64], y_new: &[f64], atol: f64, rtol: f64) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let sum: f64 = err
        .iter()
        .zip(y_old)
        .zip(y_new)
        .map(|((e, a), b)| {
            let scale = atol + rtol * a.abs().max(b.abs());
            let r = e / scale;
            r * r
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

/// Proposes the next step size from the current and the two previous
/// accepted error ratios. `history` is `(err_prev, err_prev2)`.
pub fn pid_controller(error_ratio: f64, history: (f64, f64), dt: f64, cfg: &SolverConfig) -> f64 {
    let err = error_ratio.max(MIN_ERROR_RATIO);
    let prev = history.0.max(MIN_ERROR_RATIO);
    let prev2 = history.1.max(MIN_ERROR_RATIO);
    let mut factor =
        cfg.safety * err.powf(-cfg.pid_kp) * prev.powf(-cfg.pid_ki) * prev2.powf(-cfg.pid_kd);
    if error_ratio > 1.0 {
        factor = factor.min(cfg.safety);
    }
    if !factor.is_finite() {
        factor = if error_ratio > 1.0 { 0.0 } else { 1.0 };
    }
    (dt * factor).clamp(cfg.dt_min, cfg.dt_max)
}

fn check_finite(v: &[f64], t: f64, what: &str) -> Result<(), SolverError> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(index) => Err(SolverError::IntegrationFailure { t, index, reason: format!("non-finite {what}") }),
    }
}

/// Stage storage for one system size.
#[derive(Debug, Clone)]
struct Workspace {
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
    /// `k[0]` holds `f(t, y)` for the current point.
    k1_valid: bool,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
            y_new: vec![0.0; n],
            err: vec![0.0; n],
            k1_valid: false,
        }
    }

    /// One Tsit5 step. Writes the fifth-order solution into `y_new` and
    /// `y5 - y4` into `err`; afterwards `k[6]` holds `f(t + h, y_new)`.
    fn step<F>(&mut self, rhs: &mut F, t: f64, y: &[f64], h: f64, stats: &mut SolverStats) -> Result<(), SolverError>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        if !self.k1_valid {
            rhs(t, y, &mut self.k[0]);
            stats.rhs_evals += 1;
            check_finite(&self.k[0], t, "derivative")?;
            self.k1_valid = true;
        }
        for s in 1..7 {
            let (done, rest) = self.k.split_at_mut(s);
            let row = &A[s];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in done.iter().enumerate() {
                    acc += row[j] * kj[i];
                }
                self.stage[i] = y[i] + h * acc;
            }
            if s == 6 {
                self.y_new.copy_from_slice(&self.stage);
            }
            let ts = t + C[s] * h;
            rhs(ts, &self.stage, &mut rest[0]);
            stats.rhs_evals += 1;
            check_finite(&rest[0], ts, "derivative")?;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in self.k.iter().enumerate() {
                acc += B_ERR[j] * kj[i];
            }
            self.err[i] = h * acc;
        }
        Ok(())
    }

    /// Promotes the last stage to the first stage of the next step.
    fn advance_fsal(&mut self) {
        self.k.swap(0, 6);
        self.k1_valid = true;
    }
}

/// A single uncontrolled Tsit5 step from `(t, y)` with step `dt`.
///
/// Returns the fifth-order solution and the embedded error estimate
/// `y5 - y4`.
pub fn tsit5_step<F>(rhs: &mut F, t: f64, y: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>), SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(dt > 0.0) {
        return Err(SolverError::InvalidInterval(format!("step must be positive, got {dt}")));
    }
    let mut ws = Workspace::new(y.len());
    let mut stats = SolverStats::default();
    ws.step(rhs, t, y, dt, &mut stats)?;
    Ok((ws.y_new, ws.err))
}

/// Stateful adaptive integrator. Keeps the proposed step and controller
/// history between calls so a long run can be integrated piece by piece.
#[derive(Debug, Clone)]
pub struct Integrator {
    cfg: SolverConfig,
    dt: f64,
    history: (f64, f64),
    fixed_dt: Option<f64>,
    ws: Option<Workspace>,
    stats: SolverStats,
}

impl Integrator {
    pub fn new(cfg: SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        Ok(Self { dt: cfg.dt_init, cfg, history: (1.0, 1.0), fixed_dt: None, ws: None, stats: SolverStats::default() })
    }

    /// Fixed-step mode without error control, used for convergence-order checks.
    pub fn fixed_step(dt: f64) -> Result<Self, SolverError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("fixed step must be positive, got {dt}")));
        }
        let cfg = SolverConfig { dt_init: dt, dt_min: dt.min(1e-10), dt_max: dt, ..SolverConfig::default() };
        Ok(Self { dt, cfg, history: (1.0, 1.0), fixed_dt: Some(dt), ws: None, stats: SolverStats::default() })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn stats(&self) -> SolverStats {
        self.stats
    }

    /// Step size that will be attempted next.
    pub fn current_dt(&self) -> f64 {
        self.dt
    }

    /// Drops the cached first stage; call when the state is changed between
    /// `integrate` calls.
    pub fn invalidate(&mut self) {
        if let Some(ws) = self.ws.as_mut() {
            ws.k1_valid = false;
        }
    }

    /// One controlled step attempt of size `dt` from `(t, y)`.
    ///
    /// Does not advance any state; the caller decides what to do with the
    /// outcome.
    pub fn attempt_step<F>(&mut self, rhs: &mut F, t: f64, y: &[f64], dt: f64) -> Result<StepOutcome, SolverError>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let cfg = self.cfg;
        let history = self.history;
        let mut stats = self.stats;
        let ws = self.workspace(y.len());
        ws.k1_valid = false;
        ws.step(rhs, t, y, dt, &mut stats)?;
        let error_ratio = error_norm(&ws.err, y, &ws.y_new, cfg.atol, cfg.rtol);
        let state_new = ws.y_new.clone();
        ws.k1_valid = false;
        self.stats = stats;
        let accepted = error_ratio <= 1.0;
        let dt_next = pid_controller(error_ratio, history, dt, &cfg);
        Ok(StepOutcome { accepted, t_new: t + dt, dt_used: dt, dt_next, error_ratio, state_new })
    }

    fn workspace(&mut self, n: usize) -> &mut Workspace {
        if self.ws.as_ref().map(|w| w.stage.len()) != Some(n) {
            self.ws = Some(Workspace::new(n));
        }
        self.ws.as_mut().unwrap()
    }

    /// Integrates `y` in place from `t0` to `t1`.
    ///
    /// `breakpoints` must be sorted; entries outside `(t0, t1)` are ignored.
    /// The observer runs after every accepted step and may modify the state
    /// (returning [`Control::StateModified`]).
    pub fn integrate<F, O>(
        &mut self,
        rhs: &mut F,
        t0: f64,
        t1: f64,
        y: &mut [f64],
        breakpoints: &[f64],
        mut observer: O,
    ) -> Result<(), SolverError>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
        O: FnMut(&StepInfo, &mut [f64]) -> Control,
    {
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(SolverError::InvalidInterval(format!("need finite t0 < t1, got [{t0}, {t1}]")));
        }
        if breakpoints.windows(2).any(|w| w[1] < w[0]) {
            return Err(SolverError::InvalidInterval("breakpoints must be sorted".into()));
        }
        check_finite(y, t0, "initial state")?;
        let cfg = self.cfg;
        let fixed = self.fixed_dt;
        let n = y.len();
        let fsal = cfg.fsal;
        self.workspace(n);

        let mut targets = breakpoints.iter().copied().filter(|&b| b > t0 && b < t1).peekable();
        let mut t = t0;
        let mut attempts = 0usize;
        let mut rejections_at_min = 0usize;
        let mut k1_valid = fsal && self.ws.as_ref().unwrap().k1_valid;

        while t < t1 {
            while targets.peek().is_some_and(|&b| b <= t) {
                targets.next();
            }
            let target = targets.peek().copied().unwrap_or(t1);
            if attempts >= cfg.max_steps {
                return Err(SolverError::BudgetExhausted { max_steps: cfg.max_steps, t, progress: (t - t0) / (t1 - t0) });
            }
            attempts += 1;

            let planned = self.dt;
            let (h, lands) = if t + planned >= target - 0.01 * planned {
                (target - t, true)
            } else {
                (planned, false)
            };
            // A landing step stops one ulp short so that its last stage sees
            // the left limit of a right-hand side that jumps at the target.
            let h_eval = if lands { (target.next_down() - t).max(h * (1.0 - 1e-12)) } else { h };

            let ws = self.ws.as_mut().unwrap();
            ws.k1_valid = k1_valid;
            ws.step(rhs, t, y, h_eval, &mut self.stats)?;
            // That last stage is not the derivative at the target itself.
            let reuse = fsal && !lands;

            if fixed.is_some() {
                t = if lands { target } else { t + h };
                y.copy_from_slice(&ws.y_new);
                self.stats.accepted += 1;
                if reuse {
                    ws.advance_fsal();
                    k1_valid = true;
                } else {
                    k1_valid = false;
                }
                let info = StepInfo { t, dt_used: h, error_ratio: 0.0, at_breakpoint: lands };
                if observer(&info, y) == Control::StateModified {
                    k1_valid = false;
                }
                continue;
            }

            let err = error_norm(&ws.err, y, &ws.y_new, cfg.atol, cfg.rtol);
            if !err.is_finite() {
                let index = ws.y_new.iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(SolverError::IntegrationFailure { t, index, reason: "non-finite state".into() });
            }
            let dt_next = pid_controller(err, self.history, h, &cfg);
            if err <= 1.0 {
                t = if lands { target } else { t + h };
                y.copy_from_slice(&ws.y_new);
                self.history = (err.max(MIN_ERROR_RATIO), self.history.0);
                self.stats.accepted += 1;
                rejections_at_min = 0;
                // A truncated landing step says little about the natural step size.
                self.dt = if lands { dt_next.max(planned.min(cfg.dt_max)) } else { dt_next };
                if reuse {
                    ws.advance_fsal();
                    k1_valid = true;
                } else {
                    k1_valid = false;
                }
                let info = StepInfo { t, dt_used: h, error_ratio: err, at_breakpoint: lands };
                if observer(&info, y) == Control::StateModified {
                    k1_valid = false;
                }
            } else {
                self.stats.rejected += 1;
                // k1 at (t, y) is still valid after a rejection.
                k1_valid = true;
                if h <= cfg.dt_min * (1.0 + 1e-12) {
                    rejections_at_min += 1;
                    if rejections_at_min >= MAX_REJECTIONS_AT_MIN {
                        return Err(SolverError::IntegrationFailure {
                            t,
                            index: argmax_abs(&ws.err),
                            reason: format!("{MAX_REJECTIONS_AT_MIN} consecutive rejections at dt_min"),
                        });
                    }
                }
                self.dt = dt_next.min(h * cfg.safety).max(cfg.dt_min);
            }
        }
        if let Some(ws) = self.ws.as_mut() {
            ws.k1_valid = k1_valid;
        }
        Ok(())
    }
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
        .0
}

/// Convenience wrapper: integrates `y0` over `[t0, t1]` with a fresh
/// integrator and returns the final state.
pub fn integrate<F, O>(
    rhs: &mut F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    breakpoints: &[f64],
    cfg: &SolverConfig,
    observer: O,
) -> Result<Vec<f64>, SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(&StepInfo, &mut [f64]) -> Control,
{
    let mut integrator = Integrator::new(*cfg)?;
    let mut y = y0.to_vec();
    integrator.integrate(rhs, t0, t1, &mut y, breakpoints, observer)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        for (d, v) in dy.iter_mut().zip(y) {
            *d = -v;
        }
    }

    fn growth(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy.copy_from_slice(y);
    }

    #[test]
    fn tableau_is_consistent() {
        for (i, row) in A.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - C[i]).abs() < 1e-14, "row {i}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(B_ERR.iter().sum::<f64>().abs() < 1e-14);
        for j in 0..6 {
            assert_eq!(B[j], A[6][j]);
        }
    }

    #[test]
    fn zero_field_is_fixed() {
        let mut rhs = |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0);
        let y = [1.5, -2.0, 0.25];
        let (y5, err) = tsit5_step(&mut rhs, 0.0, &y, 0.3).unwrap();
        assert_eq!(y5, y.to_vec());
        assert!(err.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn single_step_matches_exponential() {
        let (y5, _) = tsit5_step(&mut decay, 0.0, &[1.0], 0.1).unwrap();
        assert!((y5[0] - (-0.1f64).exp()).abs() <= 1e-8);
    }

    /// On y' = y a Tsit5 step reproduces the degree-7 polynomial
    /// sum_k gamma_k h^k with gamma_k = b . A^(k-2) c, so its local error is
    /// (gamma_6 - 1/720) h^6 + (gamma_7 - 1/5040) h^7 minus the exponential's
    /// tail beyond h^7. The h^6 and h^7 coefficients have opposite signs and
    /// nearly cancel near dt = 0.2, so a raw log-log slope over 0.2..0.05 is
    /// not 6; the expansion itself is checked.
    #[test]
    fn local_error_on_growth_follows_taylor_expansion() {
        let mut gamma = [0.0f64; 8];
        gamma[0] = 1.0;
        gamma[1] = B.iter().sum();
        let mut v: Vec<f64> = C.to_vec();
        for g in gamma.iter_mut().skip(2) {
            *g = B.iter().zip(&v).map(|(b, x)| b * x).sum();
            let mut next = vec![0.0; 7];
            for i in 0..7 {
                for j in 0..i.min(6) {
                    next[i] += A[i][j] * v[j];
                }
            }
            v = next;
        }
        let fact = |k: i32| (1..=k).map(f64::from).product::<f64>();
        let c6 = gamma[6] - 1.0 / fact(6);
        let c7 = gamma[7] - 1.0 / fact(7);
        assert!(c6 > 0.0 && c7 < 0.0);
        for dt in [0.2, 0.1, 0.05] {
            let (y5, _) = tsit5_step(&mut growth, 0.0, &[1.0], dt).unwrap();
            let local = y5[0] - f64::exp(dt);
            let tail: f64 = (8..20).map(|k| dt.powi(k) / fact(k)).sum();
            let predicted = c6 * dt.powi(6) + c7 * dt.powi(7) - tail;
            assert!((local - predicted).abs() <= 0.01 * predicted.abs(), "dt={dt}: {local} vs {predicted}");
        }
    }

    #[test]
    fn neutral_error_scales_by_safety() {
        let cfg = SolverConfig::default();
        let dt = 0.01;
        let next = pid_controller(1.0, (1.0, 1.0), dt, &cfg);
        assert!((next - cfg.safety * dt).abs() < 1e-15);
        assert!(next <= dt);
    }

    #[test]
    fn huge_error_clamps_to_dt_min() {
        let cfg = SolverConfig { dt_min: 1e-3, dt_init: 1e-3, ..SolverConfig::default() };
        let next = pid_controller(1e6, (1.0, 1.0), 2e-3, &cfg);
        assert_eq!(next, cfg.dt_min);
    }

    #[test]
    fn rejection_always_shrinks_step() {
        let cfg = SolverConfig { pid_ki: 0.5, ..SolverConfig::default() };
        for err in [1.0001, 2.0, 50.0] {
            for prev in [1e-6, 0.5, 1.0] {
                assert!(pid_controller(err, (prev, prev), 0.01, &cfg) < 0.01);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig { safety: 1.0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { dt_init: 1.0, dt_max: 0.5, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { rtol: 0.0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_field_integration_is_identity() {
        let mut rhs = |_t: f64, _y: &[f64], dy: &mut [f64]| dy.fill(0.0);
        let y0 = [3.0, -1.0];
        let y = integrate(&mut rhs, 0.0, 1.0, &y0, &[], &SolverConfig::default(), |_, _| Control::Continue).unwrap();
        assert_eq!(y, y0.to_vec());
    }

    #[test]
    fn breakpoint_is_hit_exactly() {
        let mut hits = Vec::new();
        integrate(&mut decay, 0.0, 1.0, &[1.0], &[0.5], &SolverConfig::default(), |info, _| {
            hits.push(info.t);
            Control::Continue
        })
        .unwrap();
        assert_eq!(hits.iter().filter(|&&t| t == 0.5).count(), 1);
        assert_eq!(*hits.last().unwrap(), 1.0);
        assert!(hits.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn jump_at_breakpoint_needs_no_tiny_steps() {
        let mut rhs = |t: f64, _: &[f64], dy: &mut [f64]| dy[0] = if t >= 0.25 { 1.0 } else { 0.0 };
        let cfg = SolverConfig { rtol: 1e-10, atol: 1e-12, ..SolverConfig::default() };
        let mut integrator = Integrator::new(cfg).unwrap();
        let mut y = vec![0.0];
        integrator.integrate(&mut rhs, 0.0, 1.0, &mut y, &[0.25], |_, _| Control::Continue).unwrap();
        assert!((y[0] - 0.75).abs() <= 1e-12);
        assert_eq!(integrator.stats().rejected, 0);
    }

    #[test]
    fn accepted_fraction_on_decay() {
        let mut integrator = Integrator::new(SolverConfig::default()).unwrap();
        let mut y = vec![1.0];
        // warm-up
        integrator.integrate(&mut decay, 0.0, 0.5, &mut y, &[], |_, _| Control::Continue).unwrap();
        let before = integrator.stats();
        integrator.integrate(&mut decay, 0.5, 10.0, &mut y, &[], |_, _| Control::Continue).unwrap();
        let after = integrator.stats();
        let acc = (after.accepted - before.accepted) as f64;
        let rej = (after.rejected - before.rejected) as f64;
        assert!(acc / (acc + rej) >= 0.8, "accepted {acc} rejected {rej}");
        assert!((y[0] - (-10.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn stiff_diagonal_system_completes() {
        let rates = [-1.0 / 0.01, -1.0 / 10.0];
        let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            for i in 0..2 {
                dy[i] = rates[i] * y[i];
            }
        };
        let cfg = SolverConfig { dt_max: 1.0, max_steps: 1_000_000, ..SolverConfig::default() };
        let y = integrate(&mut rhs, 0.0, 1.0, &[1.0, 1.0], &[], &cfg, |_, _| Control::Continue).unwrap();
        for i in 0..2 {
            let exact = rates[i].exp();
            let bound = cfg.atol + cfg.rtol * exact.abs();
            assert!((y[i] - exact).abs() <= 10.0 * bound, "component {i}: {} vs {exact}", y[i]);
        }
    }

    #[test]
    fn non_finite_derivative_is_reported() {
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy.copy_from_slice(y);
            if t > 0.3 {
                dy[1] = f64::NAN;
            }
        };
        let err = integrate(&mut rhs, 0.0, 1.0, &[1.0, 1.0], &[], &SolverConfig::default(), |_, _| Control::Continue)
            .unwrap_err();
        match err {
            SolverError::IntegrationFailure { t, index, .. } => {
                assert_eq!(index, 1);
                assert!(t > 0.3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn budget_error_reports_progress() {
        let cfg = SolverConfig { max_steps: 5, dt_max: 0.01, dt_init: 0.01, ..SolverConfig::default() };
        let err = integrate(&mut decay, 0.0, 1.0, &[1.0], &[], &cfg, |_, _| Control::Continue).unwrap_err();
        match err {
            SolverError::BudgetExhausted { progress, .. } => assert!(progress > 0.0 && progress < 0.1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attempt_step_reports_acceptance() {
        let mut integrator = Integrator::new(SolverConfig::default()).unwrap();
        let small = integrator.attempt_step(&mut decay, 0.0, &[1.0], 1e-3).unwrap();
        assert!(small.accepted && small.error_ratio <= 1.0);
        let big = integrator.attempt_step(&mut decay, 0.0, &[1.0], 3.0).unwrap();
        assert!(!big.accepted && big.error_ratio > 1.0 && big.dt_next < big.dt_used);
        let cfg = integrator.config();
        for o in [&small, &big] {
            assert!(o.dt_next >= cfg.dt_min && o.dt_next <= cfg.dt_max);
        }
    }
}
