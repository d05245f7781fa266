use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hyperlb::des::{run_replications, SimConfig};
use hyperlb::experiments::{
    fixed_point_report, log_grid, q_tilde_sweep, run_fluid, run_sweep, write_sweep_csv,
    ExperimentConfig, FluidKind, FluidRequest, InitialState, Overlay,
};
use hyperlb::validate::{validate, Budget, Effort};
use hyperlb::{ModelParams, PolicySpec};

#[derive(Parser)]
#[command(
    name = "hyperlb",
    version,
    about = "Hyper-scalable load-balancing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean wait and messages per job across policies and parameters (CSV).
    Sweep(SweepArgs),
    /// Fluid-limit trajectory, optionally with averaged simulations (CSV).
    Fluid(FluidArgs),
    /// Fixed point of the asynchronous fluid limit (JSON).
    FixedPoint(FixedPointArgs),
    /// Replicated simulation of one policy (JSON).
    Simulate(SimulateArgs),
    /// Oracle, fluid and invariant self-checks (JSON); fails on any violation.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment manifest; defaults to the lambda = 0.7, N = 200 comparison.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    /// Replaces the manifest's policy list; repeatable.
    #[arg(long)]
    policy: Vec<String>,
    /// Replaces the manifest's update-frequency axis; repeatable.
    #[arg(long)]
    delta: Vec<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// CSV destination; defaults to `<output_dir>/<name>.csv` or stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sync,
    Async,
}

#[derive(Args)]
struct FluidArgs {
    #[arg(long, value_enum, default_value = "async")]
    kind: Kind,
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    #[arg(long)]
    delta: f64,
    /// End time of the trajectory.
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    /// `empty`, `fixed-point`, or a `t,i,j,y` CSV whose first state is used.
    #[arg(long, default_value = "empty")]
    y0: String,
    #[arg(long, default_value_t = 0.1)]
    grid_dt: f64,
    #[arg(long)]
    jmax: Option<usize>,
    /// Servers per overlaid simulation; enables the overlay.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV destination; the overlay goes next to it with a `.des.csv` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixedPointArgs {
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    /// One value gives the full report; several give a q-tilde curve.
    #[arg(long)]
    delta: Vec<f64>,
    /// Log-spaced q-tilde curve over [0.02, 5] with this many points.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 5000.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1000.0)]
    warmup: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Include the averaged fluid-scaled trajectory on this grid.
    #[arg(long)]
    grid_dt: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Shorter simulation horizons.
    #[arg(long)]
    quick: bool,
    /// Multiplies every tolerance; below one tightens the checks.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            Box::new(BufWriter::new(file))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        )?,
        None => ExperimentConfig::wait_vs_messages(),
    };
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if !args.policy.is_empty() {
        cfg.policies = args.policy;
    }
    if !args.delta.is_empty() {
        cfg.sweep.delta = args.delta;
    }
    if let Some(v) = args.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.runs {
        cfg.runs = v;
    }
    let rows = run_sweep(&cfg)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} {:?}: {}",
            r.policy,
            r.param,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let out = args.out.or_else(|| {
        cfg.output_dir
            .as_ref()
            .map(|d| d.join(format!("{}.csv", cfg.name)))
    });
    let mut w = sink(out.as_deref())?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn fluid(args: FluidArgs) -> Result<()> {
    let req = FluidRequest {
        kind: match args.kind {
            Kind::Sync => FluidKind::Sync,
            Kind::Async => FluidKind::Async,
        },
        lambda: args.lambda,
        delta: args.delta,
        t_end: args.horizon,
        y0: args.y0.parse()?,
        grid_dt: args.grid_dt,
        jmax: args.jmax,
        overlay: args.n.map(|n| Overlay {
            n,
            runs: args.runs,
            seed: args.seed,
        }),
    };
    if req.overlay.is_some() && args.out.is_none() {
        bail!("--n (simulation overlay) needs --out");
    }
    if let InitialState::File(path) = &req.y0 {
        if !path.exists() {
            bail!("initial state must be `empty`, `fixed-point` or an existing CSV file");
        }
    }
    let output = run_fluid(&req)?;
    let mut w = sink(args.out.as_deref())?;
    output.fluid.write_csv(&mut w)?;
    w.flush()?;
    if let (Some(traj), Some(out)) = (output.overlay, args.out) {
        let path = out.with_extension("des.csv");
        traj.write_csv(sink(Some(&path))?)?;
    }
    Ok(())
}

fn fixed_point(args: FixedPointArgs) -> Result<()> {
    let deltas = match (args.grid, args.delta.len()) {
        (Some(count), _) => log_grid(0.02, 5.0, count),
        (None, 0) => bail!("give --delta (repeatable) or --grid"),
        (None, _) => args.delta,
    };
    if deltas.len() == 1 && args.grid.is_none() {
        write_json(
            &fixed_point_report(args.lambda, deltas[0])?,
            args.out.as_deref(),
        )
    } else {
        write_json(&q_tilde_sweep(args.lambda, &deltas)?, args.out.as_deref())
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    policy: PolicySpec,
    n: usize,
    lambda: f64,
    horizon: f64,
    warmup: f64,
    seed: u64,
    runs: usize,
    mean_wait: f64,
    ci_mean_wait: f64,
    msgs_per_job: f64,
    ci_msgs_per_job: f64,
    mean_queue: f64,
    ci_mean_queue: f64,
    frac_delayed: f64,
    queue_len_hist: Vec<f64>,
    trajectory: Option<hyperlb::Trajectory>,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let policy: PolicySpec = args.policy.parse()?;
    let params = ModelParams::new(
        args.n,
        args.lambda,
        policy.update_frequency().unwrap_or(1.0),
    )?;
    let mut cfg = SimConfig::new(params, policy, args.horizon, args.seed).with_warmup(args.warmup);
    if let Some(g) = args.grid_dt {
        cfg = cfg.with_trajectory(g);
    }
    let r = run_replications(&cfg, args.runs)?;
    let summary = SimulateSummary {
        policy,
        n: args.n,
        lambda: args.lambda,
        horizon: args.horizon,
        warmup: args.warmup,
        seed: args.seed,
        runs: args.runs,
        mean_wait: r.mean.mean_wait,
        ci_mean_wait: r.ci_mean_wait,
        msgs_per_job: r.mean.msgs_per_job,
        ci_msgs_per_job: r.ci_msgs_per_job,
        mean_queue: r.mean.mean_queue_per_server,
        ci_mean_queue: r.ci_mean_queue,
        frac_delayed: r.mean.frac_delayed,
        queue_len_hist: r.mean.queue_len_hist,
        trajectory: r.mean.trajectory,
    };
    write_json(&summary, args.out.as_deref())
}

fn validate_cmd(args: ValidateArgs) -> Result<bool> {
    let budget = Budget {
        effort: if args.quick {
            Effort::Quick
        } else {
            Effort::Full
        },
        tolerance_scale: args.tolerance_scale,
        seed: args.seed,
    };
    let report = validate(&budget)?;
    write_json(&report, args.out.as_deref())?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("FAIL {}: {} > {}", c.name, c.value, c.tolerance);
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Fluid(a) => fluid(a).map(|_| true),
        Command::FixedPoint(a) => fixed_point(a).map(|_| true),
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Validate(a) => validate_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
