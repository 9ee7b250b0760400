//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits successfully either way, so the learning results can
//! be read off `cargo test` output without blocking the unit suites.
//!
//! `CTLEARN_ACCEPTANCE=1,2,5` runs a subset; `CTLEARN_ACCEPTANCE_STRICT=1`
//! turns any failure into a non-zero exit.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use ctlearn_core::baseline::BaselineConfig;
use ctlearn_core::data::Dataset;
use ctlearn_core::harness::{
    compare_with_data, run_sweep_with_data, Comparison, DataConfig, ExperimentConfig, RunRecord, SweepParameter,
    SweepResult,
};
use ctlearn_core::linalg::{relative_error, Matrix};
use ctlearn_core::network::{Activation, Network, NetworkConfig, OutputError, VInit};
use ctlearn_core::ode::{tsit5_step, SolverConfig};
use ctlearn_core::overlap::{
    closed_form_update, pearson, plasticity_threshold, simulate_single_synapse, SynapseSimulation, TimingScenario,
};
use ctlearn_core::routing::RoutingStrategy;

type Verdict = Result<(bool, String), String>;

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(repo().join("configs").join(name)).map_err(|e| e.to_string())?;
    if let DataConfig::Mnist { dir, .. } = &mut cfg.data {
        *dir = repo().join("data/mnist");
    }
    Ok(cfg)
}

fn baseline() -> Result<BaselineConfig, String> {
    let text = std::fs::read_to_string(repo().join("configs/baseline.toml")).map_err(|e| e.to_string())?;
    toml::from_str(&text).map_err(|e| e.to_string())
}

fn accuracies(records: &[RunRecord]) -> Vec<f64> {
    records.iter().filter_map(|r| r.final_test_accuracy).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn sweep(cfg: &ExperimentConfig, data: &(Dataset, Dataset)) -> Result<SweepResult, String> {
    run_sweep_with_data(cfg, &data.0, &data.1).map_err(|e| e.to_string())
}

fn failures(records: &[RunRecord]) -> String {
    let n = records.iter().filter(|r| r.failure.is_some()).count();
    if n == 0 {
        String::new()
    } else {
        format!(", {n} run(s) stopped early")
    }
}

/// Shared MNIST work: the zero-delay runs feed both the learning check and
/// the baseline comparison.
#[derive(Default)]
struct Context {
    mnist: Option<(Dataset, Dataset)>,
    mnist_comparison: Option<Comparison>,
}

impl Context {
    fn mnist(&mut self) -> Result<(Dataset, Dataset), String> {
        if self.mnist.is_none() {
            let cfg = config("mnist_direct.toml")?;
            let data = cfg.data.load().map_err(|e| format!("{e} (fetch it with `ctlearn fetch-mnist`)"))?;
            self.mnist = Some(data);
        }
        Ok(self.mnist.clone().unwrap())
    }

    fn mnist_comparison(&mut self) -> Result<Comparison, String> {
        if self.mnist_comparison.is_none() {
            let data = self.mnist()?;
            let cfg = config("mnist_direct.toml")?;
            let cmp = compare_with_data(&cfg, &baseline()?, &data.0, &data.1).map_err(|e| e.to_string())?;
            self.mnist_comparison = Some(cmp);
        }
        Ok(self.mnist_comparison.clone().unwrap())
    }
}

fn solver_order(_: &mut Context) -> Verdict {
    let dts = [0.1, 0.05, 0.025, 0.0125];
    let mut rhs = |_: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
    let mut errors = Vec::new();
    for dt in dts {
        let steps = (1.0 / dt as f64).round() as usize;
        let mut y = vec![1.0];
        for k in 0..steps {
            y = tsit5_step(&mut rhs, k as f64 * dt, &y, dt).map_err(|e| e.to_string())?.0;
        }
        errors.push((y[0] - (-1.0f64).exp()).abs());
    }
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    let detail = format!("global-error slope {slope:.3} (errors {})", errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "));
    Ok(((slope - 5.0).abs() <= 0.3, detail))
}

fn synapse_solver() -> SolverConfig {
    SolverConfig { rtol: 1e-9, atol: 1e-12, ..SolverConfig::default() }
}

fn triangular_law(_: &mut Context) -> Verdict {
    let t = 0.05;
    let tau = 200.0 * t;
    let delays: Vec<f64> = (0..21).map(|k| -1.2 * t + 2.4 * t * k as f64 / 20.0).collect();
    let mut sim = Vec::new();
    for &d in &delays {
        let s = TimingScenario::new(t, d, tau).map_err(|e| e.to_string())?;
        sim.push(simulate_single_synapse(&SynapseSimulation::leaky(s), &synapse_solver()).map_err(|e| e.to_string())?);
    }
    let tri: Vec<f64> = delays.iter().map(|d| (t - d.abs()).max(0.0)).collect();
    let r = pearson(&sim, &tri).ok_or("constant series")?;
    let peak = sim.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = delays
        .iter()
        .zip(&sim)
        .filter(|(d, _)| d.abs() >= t * (1.0 - 1e-9))
        .map(|(_, u)| u.abs())
        .fold(0.0, f64::max);
    Ok((r >= 0.99 && tail <= 0.02 * peak, format!("pearson {r:.5}, outside-window max {:.2e} of peak", tail / peak)))
}

fn skewed_kernel(_: &mut Context) -> Verdict {
    let t = 0.05;
    let at = |d: f64| -> Result<(f64, f64), String> {
        let s = TimingScenario::new(t, d, t).map_err(|e| e.to_string())?;
        let sim = simulate_single_synapse(&SynapseSimulation::leaky(s), &synapse_solver()).map_err(|e| e.to_string())?;
        Ok((sim, closed_form_update(&s)))
    };
    let (late, late_cf) = at(0.5 * t)?;
    let (early, early_cf) = at(-0.5 * t)?;
    let (ratio, predicted) = (late / early, late_cf / early_cf);
    let gap = (ratio / predicted - 1.0).abs();
    Ok((late > early && gap <= 0.05, format!("late/early {ratio:.4}, closed form {predicted:.4}, off by {:.2}%", 100.0 * gap)))
}

fn limiting_case(_: &mut Context) -> Verdict {
    let t = 0.05;
    let x = [0.6, -0.3, 0.8, 0.1];
    let y = [1.0, 0.0];
    let solver = SolverConfig { rtol: 1e-8, atol: 1e-10, ..SolverConfig::default() };
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, routing) in
        [("tied", RoutingStrategy::tied()), ("fa", RoutingStrategy::fa()), ("dfa", RoutingStrategy::dfa())]
    {
        let net = Network::new(NetworkConfig {
            layer_widths: vec![4, 3, 2],
            activations: vec![Activation::Linear; 2],
            routing: routing.kind,
            error_source: routing.source,
            tau_prop: t / 200.0,
            tau_plas_w: 200.0 * t,
            tau_plas_v: 200.0 * t,
            init_v: VInit::Normal { std: 0.5 },
            seed: 11,
            ..NetworkConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let st = net.init_state();
        let got = net.quasi_static_update(&st, &x, OutputError::Target(&y), t, &solver).map_err(|e| e.to_string())?;

        // Independent forward pass and backward chain on the raw matrices.
        let with_bias = |v: &[f64]| v.iter().copied().chain([1.0]).collect::<Vec<f64>>();
        let (x1, z1) = (with_bias(&x), st.w[0].matvec(&with_bias(&x)));
        let z2 = st.w[1].matvec(&with_bias(&z1));
        let e: Vec<f64> = y.iter().zip(&z2).map(|(a, b)| a - b).collect();
        let back = if name == "tied" { st.w[1].columns(3).transpose() } else { st.v[0].clone() };
        let delta = back.matvec(&e);
        let expected = [Matrix::outer(&delta, &x1), Matrix::outer(&e, &with_bias(&z1))];
        let errs: Vec<f64> = (0..2).map(|l| relative_error(&got[l].data, &expected[l].data)).collect();
        ok &= errs.iter().all(|r| *r <= 0.05);
        parts.push(format!("{name} {:.2e}/{:.2e}", errs[0], errs[1]));
    }
    Ok((ok, format!("relative error per layer: {}", parts.join(", "))))
}

fn kp_alignment(_: &mut Context) -> Verdict {
    let cfg = config("circles_alignment.toml")?;
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let result = sweep(&cfg, &data)?;
    let records = &result.cells[0].records;
    let mut good = 0;
    let mut parts = Vec::new();
    for r in records {
        let first = r.checkpoints.first().and_then(|c| c.feedback_alignment[0]).unwrap_or(f64::NAN);
        let last = r.checkpoints.last().and_then(|c| c.feedback_alignment[0]).unwrap_or(f64::NAN);
        if last > first && last > 0.5 {
            good += 1;
        }
        parts.push(format!("{first:.3}->{last:.3}"));
    }
    let detail = format!(
        "cos(V_0, W_1^T) {} on {good}/{} seeds, test {}{}",
        parts.join(", "),
        records.len(),
        list(&accuracies(records)),
        failures(records)
    );
    Ok((good >= 2, detail))
}

fn zero_delay(ctx: &mut Context) -> Verdict {
    let cmp = ctx.mnist_comparison()?;
    let accs = accuracies(&cmp.continuous);
    let m = mean(&accs);
    Ok((m >= 0.80, format!("mean test {m:.4} over seeds {}{}", list(&accs), failures(&cmp.continuous))))
}

fn super_sample_delay(ctx: &mut Context) -> Verdict {
    let data = ctx.mnist()?;
    let cfg = config("mnist_direct.toml")?
        .with_assignments(&[(SweepParameter::DelayRatio, 1.5)])
        .map_err(|e| e.to_string())?;
    let result = sweep(&cfg, &data)?;
    let records = &result.cells[0].records;
    let accs = accuracies(records);
    let m = mean(&accs);
    Ok(((0.06..=0.14).contains(&m), format!("mean test {m:.4} over seeds {}{}", list(&accs), failures(records))))
}

fn threshold(ctx: &mut Context) -> Verdict {
    let formula = plasticity_threshold(0.05, 0.025).map_err(|e| e.to_string())?;
    let data = ctx.mnist()?;
    let result = sweep(&config("mnist_threshold.toml")?, &data)?;
    let cell = |tau: f64| result.rows.iter().find(|r| r.value1 == tau).map(|r| r.mean_accuracy).unwrap_or(f64::NAN);
    let slow = cell(2.0).min(cell(10.0));
    let fast = cell(0.1).max(cell(0.5));
    let gap = slow - fast;
    let detail = format!(
        "accuracy at tau_plas 0.1/0.5/2/10 s = {:.3}/{:.3}/{:.3}/{:.3}, gap {gap:.3}; threshold {formula:.4} s",
        cell(0.1),
        cell(0.5),
        cell(2.0),
        cell(10.0)
    );
    Ok((gap >= 0.25 && (formula - 1.975).abs() <= 0.01, detail))
}

fn depth_fragility(_: &mut Context) -> Verdict {
    let cfg = config("circles_depth.toml")?;
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let result = sweep(&cfg, &data)?;
    let depths = [1.0, 2.0, 3.0];
    let times = [0.025, 0.05, 0.1, 0.2];
    let acc = |depth: f64, t: f64, seed: u64| -> f64 {
        result
            .cells
            .iter()
            .find(|c| c.assignments == [(SweepParameter::HiddenLayers, depth), (SweepParameter::SampleTime, t)])
            .and_then(|c| c.records.iter().find(|r| r.seed == seed))
            .and_then(|r| r.final_test_accuracy)
            .unwrap_or(0.0)
    };
    let mut good = 0;
    let mut parts = Vec::new();
    for r in 0..cfg.sweep.repeats as u64 {
        let seed = cfg.sweep.base_seed + r;
        let min_t: Vec<f64> = depths
            .iter()
            .map(|&d| times.iter().copied().find(|&t| acc(d, t, seed) >= 0.85).unwrap_or(f64::INFINITY))
            .collect();
        // A shallow network that never learns would make the ordering vacuous.
        if min_t[0].is_finite() && min_t.windows(2).all(|w| w[0] <= w[1]) {
            good += 1;
        }
        parts.push(min_t.iter().map(|t| if t.is_finite() { format!("{t}") } else { "none".into() }).collect::<Vec<_>>().join("<="));
    }
    let fails: usize = result.rows.iter().map(|r| r.failures).sum();
    let detail = format!(
        "min T by depth 1/2/3 per seed: {}; holds on {good}/{} seeds{}",
        parts.join(", "),
        cfg.sweep.repeats,
        if fails > 0 { format!(", {fails} run(s) stopped early") } else { String::new() }
    );
    Ok((good >= 2, detail))
}

fn baseline_parity(ctx: &mut Context) -> Verdict {
    let cfg = config("circles_parity.toml")?;
    let data = cfg.data.load().map_err(|e| e.to_string())?;
    let circles = compare_with_data(&cfg, &baseline()?, &data.0, &data.1).map_err(|e| e.to_string())?;
    let mnist = ctx.mnist_comparison()?;
    let test = |c: &Comparison, m: &str| c.row(m).map(|r| r.test_mean).unwrap_or(f64::NAN);
    let (cc, cd) = (test(&circles, "continuous"), test(&circles, "discrete"));
    let (mc, md) = (test(&mnist, "continuous"), test(&mnist, "discrete"));
    let circles_ok = cc >= 0.90 && cc >= cd - 0.05;
    let mnist_ok = mc >= md - 0.05;
    let detail = format!(
        "circles continuous {cc:.4} vs discrete {cd:.4} ({}); mnist continuous {mc:.4} vs discrete {md:.4} ({})",
        if circles_ok { "ok" } else { "short" },
        if mnist_ok { "ok" } else { "short" }
    );
    Ok((circles_ok && mnist_ok, detail))
}

fn property_suites(_: &mut Context) -> Verdict {
    use common::*;
    let mut checked = 0usize;
    let mut run = |r: Check| -> Result<(), String> {
        checked += 1;
        r
    };
    let routings = [
        RoutingStrategy::tied(),
        RoutingStrategy::fa(),
        RoutingStrategy::dfa(),
        RoutingStrategy::kp_layerwise(),
        RoutingStrategy::kp_direct(),
    ];
    let outcome = (|| -> Result<(), String> {
        run(breakpoints_are_hit(&[0.1, 0.25, 0.5, 0.75, 0.999]))?;
        for (i, widths) in [vec![2, 3], vec![4, 3, 2], vec![3, 5, 4, 2], vec![49, 49, 10]].iter().enumerate() {
            for r in routings {
                run(flatten_round_trips(&small_net(widths, r, i as u64)))?;
                if widths.len() > 2 {
                    let x: Vec<f64> = (0..widths[0]).map(|k| 0.1 * k as f64 - 0.4).collect();
                    let mut target = vec![0.0; *widths.last().unwrap()];
                    target[0] = 1.0;
                    run(neurons_stack_to_layers(&small_net(widths, r, i as u64), &x, &target))?;
                }
            }
        }
        for (tw, tv) in [(0.5, 0.25), (2.0, 1.0), (1e3, 0.3)] {
            run(decay_is_exponential(tw, tv, 1.0, 3))?;
        }
        for k in -15..=15 {
            for tau in [0.01, 0.05, 10.0, f64::INFINITY] {
                run(budget_adds_up(0.05, 0.01 * k as f64, tau))?;
            }
        }
        let image: Vec<u8> = (0..784u32).map(|i| (i * 37 % 256) as u8).collect();
        run(pooling_keeps_mean(&image, 28, 4))?;
        for seed in 0..3 {
            run(evaluation_is_pure(seed, 30))?;
            run(runs_are_deterministic(seed, 30))?;
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => Ok((true, format!("{checked} invariant checks hold (see also the `properties` test target)"))),
        Err(e) => Ok((false, format!("violated after {checked} checks: {e}"))),
    }
}

type Criterion = (usize, &'static str, fn(&mut Context) -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "solver order", solver_order),
        (2, "triangular law", triangular_law),
        (3, "skewed kernel", skewed_kernel),
        (4, "limiting-case equivalence", limiting_case),
        (5, "feedback alignment", kp_alignment),
        (6, "learning at zero delay", zero_delay),
        (7, "failure at super-sample delay", super_sample_delay),
        (8, "plasticity threshold", threshold),
        (9, "depth fragility", depth_fragility),
        (10, "baseline parity", baseline_parity),
        (11, "property suites", property_suites),
    ];
    let only: Option<Vec<usize>> = std::env::var("CTLEARN_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("CTLEARN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut ctx = Context::default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let (pass, detail) = check(&mut ctx).unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = started.elapsed().as_secs_f64();
        failed += usize::from(!pass);
        println!("[{}] AC-{id} {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
    }
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
