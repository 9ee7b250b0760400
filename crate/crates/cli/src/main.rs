use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctlearn_core::baseline::BaselineConfig;
use ctlearn_core::harness::{self, DataConfig, ExperimentConfig, HarnessError, RunRecord};
use ctlearn_core::overlap::{kernel_curve, KernelPoint, OverlapError};

mod fetch;

#[derive(Parser)]
#[command(name = "ctlearn", version, about = "Continuous-time learning experiments")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and checkpoint metrics.
    Run(ConfigArgs),
    /// Run every cell of the configured sweep grid.
    Sweep(ConfigArgs),
    /// Evaluate a saved final state with frozen dynamics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A record.json written by `run` with the final state included.
        #[arg(long)]
        state: PathBuf,
    },
    /// Continuous model against the Adam-trained discrete network.
    CompareBaseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML file with optimizer settings (lr, beta1, beta2, eps).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Expected update against input/error delay.
    KernelCurve {
        #[arg(long, default_value_t = 0.05)]
        sample_time: f64,
        #[arg(long, default_value_t = 10.0)]
        tau_plas: f64,
        /// Delays span `[-range, range]` in multiples of the sample time.
        #[arg(long, default_value_t = 1.5)]
        range: f64,
        #[arg(long, default_value_t = 31)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download the MNIST IDX files.
    FetchMnist {
        #[arg(long, default_value = "data/mnist")]
        out: PathBuf,
        #[arg(long, default_value = fetch::DEFAULT_BASE_URL)]
        base_url: String,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set network.tau_prop=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `schedule.num_samples`.
    #[arg(long)]
    samples: Option<usize>,
    /// Shorthand for `network.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `schedule.delay` in seconds.
    #[arg(long)]
    delay: Option<f64>,
    /// Shorthand for `schedule.sample_time` in seconds.
    #[arg(long)]
    sample_time: Option<f64>,
    /// Shorthand for both plasticity time constants.
    #[arg(long)]
    tau_plas: Option<f64>,
    /// Shorthand for `network.tau_prop`.
    #[arg(long)]
    tau_prop: Option<f64>,
    /// Shorthand for `sweep.repeats`.
    #[arg(long)]
    repeats: Option<usize>,
    /// MNIST directory; switches the data source to MNIST.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Harness(HarnessError),
    Overlap(OverlapError),
    Fetch(String),
    /// The run finished but stopped early; the record was still written.
    Incomplete(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Harness(HarnessError::Config(_) | HarnessError::Parse(_)) => 3,
            CliError::Overlap(_) => 3,
            CliError::Harness(HarnessError::Data(_)) => 4,
            CliError::Harness(
                HarnessError::Network(_)
                | HarnessError::Solver(_)
                | HarnessError::Schedule(_)
                | HarnessError::Baseline(_),
            ) => 5,
            CliError::Incomplete(_) => 5,
            CliError::Harness(HarnessError::Io { .. } | HarnessError::Serialize(_)) => 6,
            CliError::Fetch(_) => 7,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Fetch(m) | CliError::Incomplete(m) => f.write_str(m),
            CliError::Harness(e) => write!(f, "{e}"),
            CliError::Overlap(e) => write!(f, "{e}"),
        }
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| CliError::Usage(format!("{key}: {part} is not a section")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| CliError::Usage(format!("{key}: parent is not a section")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = toml::Value::try_from(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    for kv in overrides {
        let (key, raw) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got {kv}")))?;
        set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
    }
    root.try_into().map_err(|e: toml::de::Error| CliError::Harness(HarnessError::Config(e.to_string())))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.samples {
            cfg.schedule.num_samples = n;
        }
        if let Some(s) = self.seed {
            cfg.network.seed = s;
            cfg.sweep.base_seed = s;
        }
        if let Some(d) = self.delay {
            cfg.schedule.delay = d;
            cfg.schedule.delay_ratio = None;
        }
        if let Some(t) = self.sample_time {
            cfg.schedule.sample_time = t;
        }
        if let Some(t) = self.tau_plas {
            cfg.network.tau_plas_w = t;
            cfg.network.tau_plas_v = t;
        }
        if let Some(t) = self.tau_prop {
            cfg.network.tau_prop = t;
        }
        if let Some(r) = self.repeats {
            cfg.sweep.repeats = r;
        }
        if let Some(dir) = &self.data_dir {
            cfg.data = DataConfig::Mnist { dir: dir.clone(), train_size: None, test_size: None };
        }
        let cfg = apply_overrides(&cfg, &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.output.clone())
    }
}

fn summarize(r: &RunRecord) {
    let test = r.final_test_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "samples {}  train {:.4}  test {}  steps {} (+{} rejected)  {:.1}s",
        r.samples_trained, r.final_train_accuracy, test, r.solver.accepted, r.solver.rejected, r.wall_time_s
    );
    if let Some(f) = &r.failure {
        println!("stopped early at sample {}: {:?}: {}", f.sample, f.kind, f.message);
    }
}

fn write_kernel_csv(points: &[KernelPoint], out: Option<&Path>) -> Result<(), CliError> {
    let mut text = String::from("delay,closed_form,triangular,quadrature\n");
    for p in points {
        text.push_str(&format!("{},{},{},{}\n", p.delay, p.closed_form, p.triangular, p.quadrature));
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(dir.join("kernel.csv"), text))
                .map_err(|source| HarnessError::Io { path: dir.into(), source })?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let record = harness::run_single(&cfg)?;
            summarize(&record);
            if let Some(dir) = args.out_dir(&cfg) {
                harness::write_json(&record, dir.join("record.json"))?;
                if !record.traces.is_empty() {
                    harness::write_traces_csv(&record.traces, dir.join("traces.csv"))?;
                }
            }
            if let Some(f) = record.failure {
                return Err(CliError::Incomplete(format!("run stopped early: {}", f.message)));
            }
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            if cfg.sweep.axes.is_empty() {
                log::warn!("no sweep axes configured; running a single cell");
            }
            let result = harness::run_sweep(&cfg)?;
            for r in &result.rows {
                println!(
                    "{} {:<8} {} {:<8} mean {:.4} std {:.4} n {} failures {}",
                    r.param1, r.value1, r.param2, r.value2, r.mean_accuracy, r.std_accuracy, r.n, r.failures
                );
            }
            if let Some(dir) = args.out_dir(&cfg) {
                harness::write_heatmap_csv(&result.rows, dir.join("heatmap.csv"))?;
                harness::write_json(&result, dir.join("record.json"))?;
            }
        }
        Command::Eval { cfg: args, state } => {
            let cfg = args.resolve()?;
            let text = std::fs::read_to_string(&state).map_err(|source| HarnessError::Io { path: state.clone(), source })?;
            let record: RunRecord = serde_json::from_str(&text).map_err(|e| HarnessError::Serialize(e.to_string()))?;
            let final_state = record
                .final_state
                .ok_or_else(|| CliError::Usage(format!("{} holds no final state", state.display())))?;
            let (_, test) = cfg.data.load()?;
            let accuracy = harness::evaluate_state(&cfg, &final_state, &test)?;
            println!("test accuracy {accuracy:.4} on {} samples", test.len());
            if let Some(dir) = args.out_dir(&cfg) {
                let summary = serde_json::json!({ "accuracy": accuracy, "test_size": test.len() });
                harness::write_json(&summary, dir.join("eval.json"))?;
            }
        }
        Command::CompareBaseline { cfg: args, baseline } => {
            let cfg = args.resolve()?;
            let base = match baseline {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| HarnessError::Io { path: p.clone(), source })?;
                    toml::from_str::<BaselineConfig>(&text).map_err(HarnessError::Parse)?
                }
                None => BaselineConfig::default(),
            };
            let cmp = harness::compare_with_baseline(&cfg, &base)?;
            for r in &cmp.rows {
                println!(
                    "{:<10} train {:.4} ± {:.4}  test {:.4} ± {:.4}  (n = {})",
                    r.model, r.train_mean, r.train_std, r.test_mean, r.test_std, r.n
                );
            }
            if let Some(dir) = args.out_dir(&cfg) {
                harness::write_comparison_csv(&cmp.rows, dir.join("comparison.csv"))?;
                harness::write_json(&cmp, dir.join("record.json"))?;
            }
        }
        Command::KernelCurve { sample_time, tau_plas, range, points, out } => {
            if points < 2 {
                return Err(CliError::Usage("need at least two points".into()));
            }
            let delays: Vec<f64> = (0..points)
                .map(|i| sample_time * range * (2.0 * i as f64 / (points - 1) as f64 - 1.0))
                .collect();
            let curve = kernel_curve(sample_time, tau_plas, &delays).map_err(CliError::Overlap)?;
            write_kernel_csv(&curve, out.as_deref())?;
        }
        Command::FetchMnist { out, base_url } => {
            fetch::fetch_mnist(&base_url, &out).map_err(CliError::Fetch)?;
            println!("MNIST written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
