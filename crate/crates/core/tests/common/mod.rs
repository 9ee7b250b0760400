//! Invariant checks shared by the property tests and the acceptance run.
//! Each returns a description of the first violation it finds.

#![allow(dead_code)]

use ctlearn_core::data::{average_pool, default_circles};
use ctlearn_core::harness::{run_with_data, DataConfig, ExperimentConfig, RunRecord};
use ctlearn_core::linalg::relative_error;
use ctlearn_core::network::{
    per_neuron_rhs, Network, NetworkConfig, NetworkState, NeuronConstants, OutputError, VInit,
};
use ctlearn_core::ode::{integrate, Control, SolverConfig};
use ctlearn_core::overlap::{overlap_budget, Kernel, TimingScenario};
use ctlearn_core::routing::RoutingStrategy;

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn tight() -> SolverConfig {
    SolverConfig { rtol: 1e-10, atol: 1e-12, ..SolverConfig::default() }
}

pub fn small_net(widths: &[usize], routing: RoutingStrategy, seed: u64) -> Network {
    Network::new(NetworkConfig {
        layer_widths: widths.to_vec(),
        routing: routing.kind,
        error_source: routing.source,
        tau_prop: 0.01,
        tau_plas_w: 1.0,
        tau_plas_v: 1.0,
        seed,
        init_v: VInit::Normal { std: 0.5 },
        ..NetworkConfig::default()
    })
    .expect("valid network")
}

/// Every breakpoint in `(0, 1)` is an accepted step end, exactly once.
pub fn breakpoints_are_hit(breakpoints: &[f64]) -> Check {
    let mut ends = Vec::new();
    let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
    integrate(&mut rhs, 0.0, 1.0, &[1.0], breakpoints, &SolverConfig::default(), |info, _| {
        ends.push(info.t);
        Control::Continue
    })
    .map_err(|e| e.to_string())?;
    ensure(ends.windows(2).all(|w| w[0] < w[1]), || "step ends not increasing".into())?;
    ensure(ends.last() == Some(&1.0), || format!("last step ends at {:?}", ends.last()))?;
    for &b in breakpoints.iter().filter(|b| **b > 0.0 && **b < 1.0) {
        let hits = ends.iter().filter(|&&t| t == b).count();
        ensure(hits == 1, || format!("breakpoint {b} hit {hits} times"))?;
    }
    Ok(())
}

pub fn flatten_round_trips(net: &Network) -> Check {
    let st = net.init_state();
    let flat = st.flatten();
    ensure(flat.len() == net.layout().len(), || format!("{} values for layout of {}", flat.len(), net.layout().len()))?;
    let back = NetworkState::unflatten(net.layout(), st.t, &flat).map_err(|e| e.to_string())?;
    ensure(back == st, || "unflatten(flatten(s)) != s".into())
}

/// With the error switched off, weights follow pure exponential decay.
pub fn decay_is_exponential(tau_w: f64, tau_v: f64, duration: f64, seed: u64) -> Check {
    let net = Network::new(NetworkConfig {
        tau_dec_w: tau_w,
        tau_dec_v: tau_v,
        ..small_net(&[3, 4, 2], RoutingStrategy::kp_layerwise(), seed).config().clone()
    })
    .map_err(|e| e.to_string())?;
    let st = net.init_state();
    let x = [0.3, -0.2, 0.9];
    let mut s = net.scratch();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| net.rhs_with(t, y, dy, &x, OutputError::Off, &mut s);
    let y = integrate(&mut rhs, 0.0, duration, &st.flatten(), &[], &tight(), |_, _| Control::Continue)
        .map_err(|e| e.to_string())?;
    let end = NetworkState::unflatten(net.layout(), duration, &y).map_err(|e| e.to_string())?;
    for l in 0..net.num_layers() {
        let w = st.w[l].scaled((-duration / tau_w).exp());
        let err = relative_error(&end.w[l].data, &w.data);
        ensure(err <= 1e-6, || format!("W_{l} off by {err:e}"))?;
    }
    let v = st.v[0].scaled((-duration / tau_v).exp());
    let err = relative_error(&end.v[0].data, &v.data);
    ensure(err <= 1e-6, || format!("V_0 off by {err:e}"))
}

/// Stacking the single-neuron derivative over every unit reproduces the
/// layer derivative.
pub fn neurons_stack_to_layers(net: &Network, x: &[f64], target: &[f64]) -> Check {
    let c = net.config();
    let mut st = net.init_state();
    for (l, z) in st.z.iter_mut().enumerate() {
        z.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0) - 0.2 * l as f64);
    }
    let y = st.flatten();
    let mut dy = vec![0.0; y.len()];
    let mut s = net.scratch();
    net.rhs_with(0.0, &y, &mut dy, x, OutputError::Target(target), &mut s);
    let d = NetworkState::unflatten(net.layout(), 0.0, &dy).map_err(|e| e.to_string())?;
    let top = net.num_layers() - 1;
    for l in 0..net.num_layers() {
        let mut input = if l == 0 { x.to_vec() } else { st.z[l - 1].clone() };
        if c.bias {
            input.push(1.0);
        }
        let consts = NeuronConstants {
            tau_prop: c.tau_prop,
            tau_plas_w: c.tau_plas_w,
            tau_plas_v: c.tau_plas_v,
            tau_dec_w: c.tau_dec_w,
            tau_dec_v: c.tau_dec_v,
            activation: c.activation(l),
        };
        for i in 0..net.layout().width(l) {
            let (dz, dw, dv) = per_neuron_rhs(st.w[l].row(i), st.v[l].row(i), &input, &s.eps[l], st.z[l][i], &consts)
                .map_err(|e| e.to_string())?;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            ensure(close(dz, d.z[l][i]), || format!("dz[{l}][{i}]: {dz} vs {}", d.z[l][i]))?;
            ensure(dw.iter().zip(d.w[l].row(i)).all(|(a, b)| close(*a, *b)), || format!("dW_{l} row {i}"))?;
            if l < top && net.routing().v_trainable() {
                ensure(dv.iter().zip(d.v[l].row(i)).all(|(a, b)| close(*a, *b)), || format!("dV_{l} row {i}"))?;
            }
        }
    }
    Ok(())
}

/// Correct and incorrect kernel mass add up to the whole window.
pub fn budget_adds_up(sample_time: f64, delay: f64, tau_plas: f64) -> Check {
    let s = TimingScenario::new(sample_time, delay, tau_plas).map_err(|e| e.to_string())?;
    let b = overlap_budget(&s, Kernel::of(&s));
    let gap = (b.correct + b.incorrect - b.total).abs();
    ensure(gap <= 1e-12 * b.total.max(1e-300), || format!("K_C + K_I - K_T = {gap:e} at delay {delay}"))
}

/// Pooling an image whose sides divide by the window keeps its mean.
pub fn pooling_keeps_mean(image: &[u8], side: usize, window: usize) -> Check {
    let pooled = average_pool(image, side, side, window);
    let raw = image.iter().map(|&p| p as f64).sum::<f64>() / (255.0 * image.len() as f64);
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    ensure((raw - mean).abs() <= 1e-12, || format!("pooled mean {mean} vs {raw}"))
}

pub fn tiny_experiment(seed: u64, samples: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        network: NetworkConfig {
            layer_widths: vec![2, 6, 2],
            tau_prop: 0.005,
            tau_plas_w: 2.0,
            tau_plas_v: 2.0,
            seed,
            ..NetworkConfig::default()
        },
        data: DataConfig::Circles { train_size: 60, test_size: 20, noise_std: 0.08, factor: 0.5, seed },
        ..ExperimentConfig::default()
    };
    cfg.schedule.num_samples = samples;
    cfg.eval.checkpoint_every = 10;
    cfg.eval.checkpoint_test_size = 20;
    cfg
}

fn strip_clock(mut r: RunRecord) -> RunRecord {
    r.wall_time_s = 0.0;
    r
}

/// Frozen evaluation between presentations leaves the training trajectory
/// untouched, and repeated evaluation of one state agrees with itself.
pub fn evaluation_is_pure(seed: u64, samples: usize) -> Check {
    let (train, test) = default_circles(60, 20, seed).map_err(|e| e.to_string())?;
    let quiet = tiny_experiment(seed, samples);
    let mut probing = quiet.clone();
    probing.eval.test_every = 10;
    let a = run_with_data(&quiet, &train, &test).map_err(|e| e.to_string())?;
    let b = run_with_data(&probing, &train, &test).map_err(|e| e.to_string())?;
    ensure(a.final_state == b.final_state, || "interleaved evaluation changed the trained state".into())?;
    ensure(a.final_test_accuracy == b.final_test_accuracy, || "final accuracy differs".into())?;
    let state = a.final_state.expect("state saved");
    let first = ctlearn_core::harness::evaluate_state(&quiet, &state, &test).map_err(|e| e.to_string())?;
    let again = ctlearn_core::harness::evaluate_state(&quiet, &state, &test).map_err(|e| e.to_string())?;
    ensure(first == again, || format!("re-evaluation gave {first} then {again}"))
}

/// The same config and data give the same record, bit for bit.
pub fn runs_are_deterministic(seed: u64, samples: usize) -> Check {
    let (train, test) = default_circles(60, 20, seed).map_err(|e| e.to_string())?;
    let cfg = tiny_experiment(seed, samples);
    let a = run_with_data(&cfg, &train, &test).map_err(|e| e.to_string())?;
    let b = run_with_data(&cfg, &train, &test).map_err(|e| e.to_string())?;
    ensure(strip_clock(a) == strip_clock(b), || format!("seed {seed}: records differ"))
}
