//! Experiment manifests and the table-producing drivers behind the CLI:
//! policy sweeps, fluid trajectories with optional simulation overlays, and
//! fixed-point summaries.

use std::io::{Read, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::des::{run_replications, SimConfig};
use crate::error::{Error, Result};
use crate::fixed_point::{m_star_det, FixedPoint};
use crate::fluid_async::{integrate_async, AsyncOptions};
use crate::fluid_sync::{integrate_sync, sync_fixed_point, SyncOptions};
use crate::model::{default_jmax, FluidState, ModelParams};
use crate::policy::PolicySpec;
use crate::trajectory::Trajectory;

/// Parameter values per sweep axis; a family takes the axis it is
/// parameterised by.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    #[serde(default)]
    pub delta: Vec<f64>,
    #[serde(default)]
    pub d: Vec<f64>,
    #[serde(default)]
    pub p: Vec<f64>,
}

impl SweepAxis {
    fn values_for(&self, family: &str) -> Option<&[f64]> {
        match family {
            "sujsq-det" | "sujsq-exp" | "aujsq-det" | "aujsq-exp" | "sujsq-det-idle" => {
                Some(&self.delta)
            }
            "jsq-d" => Some(&self.d),
            "jiq-p" => Some(&self.p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub lambda: f64,
    pub n: usize,
    /// Full selectors (`jsq-d:2`, `random`) or bare families swept over
    /// their axis (`sujsq-det`).
    pub policies: Vec<String>,
    #[serde(default)]
    pub sweep: SweepAxis,
    #[serde(default = "defaults::runs")]
    pub runs: usize,
    #[serde(default = "defaults::horizon")]
    pub horizon: f64,
    #[serde(default = "defaults::warmup")]
    pub warmup: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

mod defaults {
    pub fn runs() -> usize {
        10
    }
    pub fn horizon() -> f64 {
        5000.0
    }
    pub fn warmup() -> f64 {
        1000.0
    }
    pub fn seed() -> u64 {
        1
    }
}

impl ExperimentConfig {
    /// The mean-wait versus messages-per-job comparison at `lambda = 0.7`,
    /// `N = 200`.
    pub fn wait_vs_messages() -> Self {
        Self {
            name: "wait-vs-messages".into(),
            lambda: 0.7,
            n: 200,
            policies: vec![
                "sujsq-det".into(),
                "sujsq-exp".into(),
                "aujsq-det".into(),
                "aujsq-exp".into(),
                "sujsq-det-idle".into(),
                "jiq-p".into(),
                "jsq-d".into(),
                "jiq".into(),
                "random".into(),
            ],
            sweep: SweepAxis {
                delta: vec![0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0, 1.5, 2.5],
                d: vec![1.0, 2.0, 3.0],
                p: vec![0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            },
            runs: defaults::runs(),
            horizon: defaults::horizon(),
            warmup: defaults::warmup(),
            seed: defaults::seed(),
            output_dir: None,
        }
    }

    pub fn from_json<R: Read>(reader: R) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(reader)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ModelParams::new(self.n, self.lambda, 1.0)?;
        let axis = [&self.sweep.delta, &self.sweep.d, &self.sweep.p];
        if axis
            .iter()
            .flat_map(|v| v.iter())
            .any(|&x| !(x > 0.0 && x.is_finite()))
        {
            return Err(Error::params("sweep values must be positive and finite"));
        }
        if self.runs == 0 {
            return Err(Error::params("runs must be at least 1"));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(Error::params("need 0 <= warmup < horizon"));
        }
        self.points().map(|_| ())
    }

    /// Every policy instance of the sweep, in manifest order.
    pub fn points(&self) -> Result<Vec<PolicySpec>> {
        let mut out = Vec::new();
        for entry in &self.policies {
            if entry.contains(':') {
                let spec: PolicySpec = entry.parse()?;
                spec.validate(self.n)?;
                out.push(spec);
                continue;
            }
            match self.sweep.values_for(entry) {
                Some(values) => {
                    if values.is_empty() {
                        return Err(Error::params(format!("no sweep values for `{entry}`")));
                    }
                    for &v in values {
                        let spec = PolicySpec::with_parameter(entry, v)?;
                        spec.validate(self.n)?;
                        out.push(spec);
                    }
                }
                None => {
                    let spec: PolicySpec = entry.parse()?;
                    spec.validate(self.n)?;
                    out.push(spec);
                }
            }
        }
        Ok(out)
    }
}

/// One sweep point: replication means, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub param: Option<f64>,
    pub msgs_per_job: f64,
    pub mean_wait: f64,
    pub mean_queue: f64,
    pub ci_halfwidth: f64,
    pub error: Option<String>,
}

/// Runs every sweep point; a failing point yields a row carrying the error.
/// Rows are sorted by `(policy, param)`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let points = cfg.points()?;
    let mut rows: Vec<SweepRow> = points
        .par_iter()
        .map(|spec| {
            let sim = ModelParams::new(cfg.n, cfg.lambda, spec.update_frequency().unwrap_or(1.0))
                .map(|params| {
                    SimConfig::new(params, *spec, cfg.horizon, cfg.seed).with_warmup(cfg.warmup)
                })
                .and_then(|sim| run_replications(&sim, cfg.runs));
            match sim {
                Ok(r) => SweepRow {
                    policy: spec.family().to_string(),
                    param: spec.parameter(),
                    msgs_per_job: r.mean.msgs_per_job,
                    mean_wait: r.mean.mean_wait,
                    mean_queue: r.mean.mean_queue_per_server,
                    ci_halfwidth: r.ci_mean_wait,
                    error: None,
                },
                Err(e) => SweepRow {
                    policy: spec.family().to_string(),
                    param: spec.parameter(),
                    msgs_per_job: f64::NAN,
                    mean_wait: f64::NAN,
                    mean_queue: f64::NAN,
                    ci_halfwidth: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.param.unwrap_or(0.0).total_cmp(&b.param.unwrap_or(0.0)))
    });
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 7] = [
    "policy",
    "param",
    "msgs_per_job",
    "mean_wait",
    "mean_queue",
    "ci_halfwidth",
    "error",
];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluidKind {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Empty,
    FixedPoint,
    File(PathBuf),
}

impl std::str::FromStr for InitialState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "empty" => InitialState::Empty,
            "fixed-point" => InitialState::FixedPoint,
            path => InitialState::File(PathBuf::from(path)),
        })
    }
}

/// Simulation runs averaged onto the fluid grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlay {
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidRequest {
    pub kind: FluidKind,
    pub lambda: f64,
    pub delta: f64,
    pub t_end: f64,
    pub y0: InitialState,
    pub grid_dt: f64,
    pub jmax: Option<usize>,
    pub overlay: Option<Overlay>,
}

#[derive(Debug, Clone)]
pub struct FluidOutput {
    pub fluid: Trajectory,
    pub overlay: Option<Trajectory>,
}

pub fn initial_state(req: &FluidRequest) -> Result<FluidState> {
    let jmax = req
        .jmax
        .unwrap_or_else(|| default_jmax(req.lambda, req.delta));
    match &req.y0 {
        InitialState::Empty => Ok(FluidState::empty(jmax)),
        InitialState::FixedPoint => match req.kind {
            FluidKind::Async => Ok(FixedPoint::with_jmax(req.lambda, req.delta, jmax)?.y_star),
            FluidKind::Sync => sync_fixed_point(req.lambda, req.delta, jmax),
        },
        InitialState::File(path) => {
            let traj = Trajectory::read_csv(std::fs::File::open(path)?)?;
            let first = traj
                .states
                .first()
                .ok_or_else(|| Error::params(format!("{} holds no state", path.display())))?;
            first.with_jmax(jmax.max(first.jmax()))
        }
    }
}

pub fn run_fluid(req: &FluidRequest) -> Result<FluidOutput> {
    let y0 = initial_state(req)?;
    let fluid = match req.kind {
        FluidKind::Sync => {
            let mut opts = SyncOptions::for_delta(req.delta);
            opts.grid_dt = req.grid_dt;
            integrate_sync(&y0, req.lambda, req.delta, req.t_end, opts)?.trajectory
        }
        FluidKind::Async => {
            let mut opts = AsyncOptions::for_delta(req.delta);
            opts.grid_dt = req.grid_dt;
            integrate_async(&y0, req.lambda, req.delta, req.t_end, opts)?.trajectory
        }
    };
    let overlay = match req.overlay {
        None => None,
        Some(o) => {
            if req.y0 != InitialState::Empty {
                return Err(Error::params(
                    "simulation overlays start from the empty system",
                ));
            }
            let policy = match req.kind {
                FluidKind::Sync => PolicySpec::SujsqDet { delta: req.delta },
                FluidKind::Async => PolicySpec::AujsqExp { delta: req.delta },
            };
            let params = ModelParams::new(o.n, req.lambda, req.delta)?;
            let sim = SimConfig::new(params, policy, req.t_end, o.seed)
                .with_warmup(0.0)
                .with_trajectory(req.grid_dt);
            run_replications(&sim, o.runs)?.mean.trajectory
        }
    };
    Ok(FluidOutput { fluid, overlay })
}

/// Fixed-point summary emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub lambda: f64,
    pub delta: f64,
    pub m_star: usize,
    pub m_star_det: usize,
    pub nu: f64,
    pub q_tilde: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub residual: f64,
    /// Nonzero cells `(i, j, y)` of the fixed point.
    pub cells: Vec<(usize, usize, f64)>,
}

pub fn fixed_point_report(lambda: f64, delta: f64) -> Result<FixedPointReport> {
    let fp = FixedPoint::compute(lambda, delta)?;
    let m = fp.m_star as f64;
    Ok(FixedPointReport {
        lambda,
        delta,
        m_star: fp.m_star,
        m_star_det: m_star_det(lambda, delta),
        nu: fp.nu,
        q_tilde: fp.q_tilde,
        lower_bound: m - lambda / delta,
        upper_bound: m + 1.0 - lambda / delta,
        residual: fp.residual,
        cells: fp.y_star.cells().filter(|&(_, _, y)| y > 0.0).collect(),
    })
}

/// `(delta, q_tilde)` pairs with bounds, one per value of `deltas`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QTildePoint {
    pub delta: f64,
    pub m_star: usize,
    pub q_tilde: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

pub fn q_tilde_sweep(lambda: f64, deltas: &[f64]) -> Result<Vec<QTildePoint>> {
    deltas
        .iter()
        .map(|&delta| {
            let r = fixed_point_report(lambda, delta)?;
            Ok(QTildePoint {
                delta,
                m_star: r.m_star,
                q_tilde: r.q_tilde,
                lower_bound: r.lower_bound,
                upper_bound: r.upper_bound,
            })
        })
        .collect()
}

/// `count` log-spaced values in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
        .collect()
}
