//! Expected synaptic update as a function of input/error timing.
//!
//! A presynaptic signal active on `[0, T]` and an error drive active on
//! `[delta, delta + T]` are filtered by the causal plasticity kernel
//! `k(t) = exp(-(T - t) / tau_plas)` read out at the end of the window.
//! Values are in time units: with a flat kernel and no delay the update is `T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{per_neuron_rhs, Activation, NeuronConstants};
use crate::ode::{Control, Integrator, SolverConfig, SolverError};
use crate::schedule::{PresentationSchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OverlapError {
    #[error("invalid timing scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Same-duration input and error windows offset by `delay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingScenario {
    pub sample_time: f64,
    pub delay: f64,
    /// May be infinite (flat kernel).
    pub tau_plas: f64,
}

impl TimingScenario {
    pub fn new(sample_time: f64, delay: f64, tau_plas: f64) -> Result<Self, OverlapError> {
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(OverlapError::Invalid(format!("sample time must be positive, got {sample_time}")));
        }
        if !(tau_plas > 0.0) || tau_plas.is_nan() {
            return Err(OverlapError::Invalid(format!("tau_plas must be positive, got {tau_plas}")));
        }
        if !delay.is_finite() {
            return Err(OverlapError::Invalid("delay must be finite".into()));
        }
        Ok(Self { sample_time, delay, tau_plas })
    }

    /// Start of the input/error overlap inside the window.
    pub fn t0(&self) -> f64 {
        self.delay.max(0.0)
    }

    /// End of the input/error overlap inside the window.
    pub fn t1(&self) -> f64 {
        self.sample_time.min(self.delay + self.sample_time)
    }

    /// Overlap length `(T - |delta|)+`.
    pub fn overlap(&self) -> f64 {
        (self.sample_time - self.delay.abs()).max(0.0)
    }
}

/// Weighting of coincidences across the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Flat,
    Exponential { tau: f64 },
}

impl Kernel {
    pub fn of(s: &TimingScenario) -> Self {
        if s.tau_plas.is_infinite() {
            Kernel::Flat
        } else {
            Kernel::Exponential { tau: s.tau_plas }
        }
    }

    pub fn eval(&self, t: f64, window: f64) -> f64 {
        match *self {
            Kernel::Flat => 1.0,
            Kernel::Exponential { tau } => (-(window - t) / tau).exp(),
        }
    }

    /// Exact integral over `[a, b]` for a window ending at `window`.
    pub fn integral(&self, a: f64, b: f64, window: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match *self {
            Kernel::Flat => b - a,
            Kernel::Exponential { tau } => tau * ((-(window - b) / tau).exp() - (-(window - a) / tau).exp()),
        }
    }
}

/// Numerical `int_0^T presyn(t) error(t) k(t) dt`.
///
/// `kinks` lists the points where the envelopes are not smooth; the integral
/// is split there and each smooth piece is integrated adaptively.
pub fn kernel_update_quadrature<P, E>(presyn: P, error: E, sample_time: f64, tau_plas: f64, kinks: &[f64]) -> f64
where
    P: Fn(f64) -> f64,
    E: Fn(f64) -> f64,
{
    let kernel = if tau_plas.is_infinite() { Kernel::Flat } else { Kernel::Exponential { tau: tau_plas } };
    let mut cuts: Vec<f64> = kinks.iter().copied().filter(|&k| k > 0.0 && k < sample_time).collect();
    cuts.push(0.0);
    cuts.push(sample_time);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let tol = 1e-14 * sample_time;
    cuts.windows(2)
        .map(|w| {
            let f = |t: f64| presyn(t) * error(t) * kernel.eval(t, sample_time);
            quadrature::integrate(f, w[0], w[1], tol).integral
        })
        .sum()
}

/// Quadrature of the canonical indicator scenario.
pub fn scenario_quadrature(s: &TimingScenario) -> f64 {
    let (lo, hi) = (s.delay, s.delay + s.sample_time);
    let error = |t: f64| if t >= lo && t <= hi { 1.0 } else { 0.0 };
    kernel_update_quadrature(|_| 1.0, error, s.sample_time, s.tau_plas, &[lo, hi])
}

/// `tau e^{-(T - t1)/tau} (1 - e^{-L/tau})`, or `L` for a flat kernel.
pub fn closed_form_update(s: &TimingScenario) -> f64 {
    let l = s.overlap();
    if l == 0.0 {
        return 0.0;
    }
    if s.tau_plas.is_infinite() {
        return l;
    }
    let tau = s.tau_plas;
    tau * (-(s.sample_time - s.t1()) / tau).exp() * -(-l / tau).exp_m1()
}

/// The flat-kernel triangular law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triangular {
    /// `(T - |delta|)+`.
    pub value: f64,
    /// Set when `T / tau_plas > 0.1`, where the flat approximation is poor.
    pub outside_regime: bool,
}

pub fn triangular_limit(s: &TimingScenario) -> Triangular {
    Triangular { value: s.overlap(), outside_regime: s.sample_time / s.tau_plas > 0.1 }
}

/// Kernel mass on the correct-overlap set, on its complement in the window,
/// and in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapBudget {
    pub correct: f64,
    pub incorrect: f64,
    pub total: f64,
}

pub fn overlap_budget(s: &TimingScenario, kernel: Kernel) -> OverlapBudget {
    let t = s.sample_time;
    let total = kernel.integral(0.0, t, t);
    let (a, b) = (s.t0(), s.t1());
    let correct = kernel.integral(a, b, t);
    let incorrect = if b > a { kernel.integral(0.0, a, t) + kernel.integral(b, t, t) } else { total };
    OverlapBudget { correct, incorrect, total }
}

/// Smallest `tau_plas` whose kernel attenuates the start of a window of
/// length `sample_time` by at most a fraction `eta`: `T / ln(1 / (1 - eta))`.
pub fn plasticity_threshold(sample_time: f64, eta: f64) -> Result<f64, OverlapError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(OverlapError::Invalid(format!("attenuation must lie in (0, 1), got {eta}")));
    }
    if !(sample_time > 0.0) {
        return Err(OverlapError::Invalid("sample time must be positive".into()));
    }
    Ok(sample_time / -(-eta).ln_1p())
}

/// Parameters of the single-synapse simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynapseSimulation {
    pub scenario: TimingScenario,
    /// Passive decay of the synapse; `inf` for none. Setting it equal to
    /// `tau_plas` makes the synapse a leaky integrator whose end-of-window
    /// value is exactly the kernel-weighted coincidence.
    pub tau_dec: f64,
    /// Fraction of the window used for the smooth on/off ramps.
    pub buffer_fraction: f64,
}

impl SynapseSimulation {
    pub fn flat(scenario: TimingScenario) -> Self {
        Self { scenario, tau_dec: f64::INFINITY, buffer_fraction: 1e-3 }
    }

    pub fn leaky(scenario: TimingScenario) -> Self {
        Self { scenario, tau_dec: scenario.tau_plas, buffer_fraction: 1e-3 }
    }
}

/// Integrates one synapse driven by a unit input on `[0, T]` and a unit
/// error on `[delta, delta + T]` through the single-neuron dynamics, and
/// returns `w(T) * tau_plas` (so a flat, fully overlapping window gives `T`).
pub fn simulate_single_synapse(sim: &SynapseSimulation, solver: &SolverConfig) -> Result<f64, OverlapError> {
    let s = sim.scenario;
    let t = s.sample_time;
    let buffer = t * sim.buffer_fraction;
    let sched = PresentationSchedule::new(t, buffer, s.delay, 0.0, vec![vec![1.0]], vec![vec![1.0]])?;
    let consts = NeuronConstants {
        tau_prop: 1.0,
        tau_plas_w: s.tau_plas,
        tau_plas_v: f64::INFINITY,
        tau_dec_w: sim.tau_dec,
        tau_dec_v: f64::INFINITY,
        activation: Activation::Linear,
    };
    let mut rhs = |time: f64, y: &[f64], dy: &mut [f64]| {
        let (mut x, mut e) = ([0.0], [0.0]);
        sched.input_into(time, &mut x);
        sched.label_into(time, &mut e);
        let (_, dw, _) = per_neuron_rhs(&y[..1], &[1.0], &x, &e, 0.0, &consts).expect("scalar shapes");
        dy[0] = dw[0];
    };
    let mut y = [0.0];
    let mut integrator = Integrator::new(*solver)?;
    integrator.integrate(&mut rhs, 0.0, t, &mut y, &sched.breakpoints(0.0, t), |_: &_, _: &mut [f64]| Control::Continue)?;
    Ok(y[0] * s.tau_plas)
}

/// One row of a kernel curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelPoint {
    pub delay: f64,
    pub closed_form: f64,
    pub triangular: f64,
    pub quadrature: f64,
}

/// Expected update against delay for a fixed window and kernel.
pub fn kernel_curve(sample_time: f64, tau_plas: f64, delays: &[f64]) -> Result<Vec<KernelPoint>, OverlapError> {
    delays
        .iter()
        .map(|&d| {
            let s = TimingScenario::new(sample_time, d, tau_plas)?;
            Ok(KernelPoint {
                delay: d,
                closed_form: closed_form_update(&s),
                triangular: triangular_limit(&s).value,
                quadrature: scenario_quadrature(&s),
            })
        })
        .collect()
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sc(t: f64, d: f64, tau: f64) -> TimingScenario {
        TimingScenario::new(t, d, tau).unwrap()
    }

    /// Independent oracle: midpoint rule on a fine grid.
    fn brute_force(s: &TimingScenario, n: usize) -> f64 {
        let h = s.sample_time / n as f64;
        (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                let on = t >= s.delay && t <= s.delay + s.sample_time;
                if on {
                    (-(s.sample_time - t) / s.tau_plas).exp() * h
                } else {
                    0.0
                }
            })
            .sum()
    }

    #[test]
    fn closed_form_special_cases() {
        let tau: f64 = 0.3;
        let t = 0.05;
        let expected = tau * (1.0 - (-t / tau).exp());
        assert!((closed_form_update(&sc(t, 0.0, tau)) - expected).abs() < 1e-15);
        assert_eq!(closed_form_update(&sc(t, t, tau)), 0.0);
        assert_eq!(closed_form_update(&sc(t, -1.3 * t, tau)), 0.0);
        assert!(closed_form_update(&sc(t, t / 2.0, t)) > closed_form_update(&sc(t, -t / 2.0, t)));
        assert_eq!(closed_form_update(&sc(t, 0.01, f64::INFINITY)), 0.04);
    }

    #[test]
    fn quadrature_agrees_with_closed_form() {
        for &(d, tau) in &[(0.025, 0.05), (-0.025, 0.05), (0.0, 1.0), (0.01, 0.02), (0.049, 5.0)] {
            let s = sc(0.05, d, tau);
            let q = scenario_quadrature(&s);
            let c = closed_form_update(&s);
            assert!((q - c).abs() <= 1e-8 * c, "delta {d}, tau {tau}: {q} vs {c}");
            assert!((brute_force(&s, 200_000) - c).abs() <= 1e-6 * c);
        }
        assert_eq!(kernel_update_quadrature(|_| 1.0, |_| 0.0, 0.05, 0.1, &[]), 0.0);
        let flat = kernel_update_quadrature(|_| 1.0, |_| 1.0, 0.05, f64::INFINITY, &[]);
        assert!((flat - 0.05).abs() < 1e-12, "{flat}");
    }

    #[test]
    fn triangular_law_and_its_regime() {
        let t = 0.05;
        assert_eq!(triangular_limit(&sc(t, 0.0, 10.0)).value, t);
        assert_eq!(triangular_limit(&sc(t, t, 10.0)).value, 0.0);
        assert_eq!(triangular_limit(&sc(t, -t, 10.0)).value, 0.0);
        assert!(triangular_limit(&sc(t, 0.0, 0.1)).outside_regime);
        assert!(!triangular_limit(&sc(t, 0.0, 10.0)).outside_regime);
        let s = sc(t, t / 2.0, 100.0 * t);
        let tri = triangular_limit(&s).value;
        assert!((closed_form_update(&s) - tri).abs() / tri <= 0.02);
    }

    #[test]
    fn overlap_budget_cases() {
        let t = 0.05;
        let b = overlap_budget(&sc(t, 0.0, 1.0), Kernel::Flat);
        assert_eq!((b.correct, b.incorrect, b.total), (t, 0.0, t));
        let b = overlap_budget(&sc(t, 0.02, 1.0), Kernel::Flat);
        assert!((b.correct - 0.03).abs() < 1e-15);
        let tau: f64 = 0.04;
        let b = overlap_budget(&sc(t, -0.01, tau), Kernel::Exponential { tau });
        assert!((b.total - tau * (1.0 - (-t / tau).exp())).abs() < 1e-15);
    }

    #[test]
    fn threshold_formula() {
        assert!((plasticity_threshold(0.05, 0.025).unwrap() - 1.975).abs() < 0.01);
        let eta = 1.0 - (-1.0f64).exp();
        assert!((plasticity_threshold(0.05, eta).unwrap() - 0.05).abs() < 1e-15);
        assert!(plasticity_threshold(0.05, 1.0 - 1e-12).unwrap() < 0.002);
        assert!(plasticity_threshold(0.05, 0.0).is_err());
        assert!(plasticity_threshold(0.05, 1.0).is_err());
    }

    #[test]
    fn leaky_synapse_reproduces_the_kernel() {
        let t = 0.05;
        for d in [-0.025, 0.0, 0.025] {
            let s = sc(t, d, t);
            let sim = simulate_single_synapse(&SynapseSimulation::leaky(s), &SolverConfig::default()).unwrap();
            let c = closed_form_update(&s);
            assert!((sim - c).abs() <= 0.01 * c, "delta {d}: {sim} vs {c}");
        }
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
    }

    proptest! {
        #[test]
        fn budget_sums_to_total(d in -0.08f64..0.08, tau in 0.01f64..50.0) {
            let s = sc(0.05, d, tau);
            for k in [Kernel::Flat, Kernel::Exponential { tau }] {
                let b = overlap_budget(&s, k);
                prop_assert!((b.correct + b.incorrect - b.total).abs() <= 1e-10);
            }
            let flat = overlap_budget(&s, Kernel::Flat);
            prop_assert!((flat.correct - s.overlap()).abs() <= 1e-15);
        }

        #[test]
        fn triangle_is_symmetric(d in 0.0f64..0.1, tau in 0.01f64..50.0) {
            prop_assert_eq!(triangular_limit(&sc(0.05, d, tau)).value, triangular_limit(&sc(0.05, -d, tau)).value);
        }

        #[test]
        fn late_errors_weigh_more(d in 0.0005f64..0.0495, tau in 0.01f64..50.0) {
            let late = closed_form_update(&sc(0.05, d, tau));
            let early = closed_form_update(&sc(0.05, -d, tau));
            prop_assert!(late > early);
        }

        #[test]
        fn monotone_in_delay_and_window(d in 0.0f64..0.06, dd in 0.0f64..0.01, tau in 0.01f64..50.0) {
            let near = closed_form_update(&sc(0.05, d, tau));
            let far = closed_form_update(&sc(0.05, d + dd, tau));
            prop_assert!(far <= near + 1e-15);
            let far_neg = closed_form_update(&sc(0.05, -d - dd, tau));
            prop_assert!(far_neg <= closed_form_update(&sc(0.05, -d, tau)) + 1e-15);
            let longer = closed_form_update(&sc(0.05 + dd, d, tau));
            prop_assert!(longer >= near - 1e-15);
        }
    }
}
