//! Self-check suite: Markov-chain oracle against simulation, fluid against
//! simulation, and the deterministic invariants of the fluid engines.

use serde::Serialize;

use crate::ctmc::{solve_with_loss_target, total_variation};
use crate::des::{run, run_replications, SimConfig};
use crate::error::Result;
use crate::fixed_point::FixedPoint;
use crate::fluid_async::{integrate_async, AsyncOptions};
use crate::fluid_sync::{check_sync_invariants, integrate_sync, SyncOptions};
use crate::model::{default_jmax, FluidState, ModelParams};
use crate::policy::PolicySpec;
use crate::trajectory::Coordinate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Effort {
    /// Shorter simulation horizons.
    Quick,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub effort: Effort,
    /// Multiplies every tolerance; values below one tighten the checks.
    pub tolerance_scale: f64,
    pub seed: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            effort: Effort::Full,
            tolerance_scale: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub budget: Budget,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        tolerance,
        passed: value <= tolerance,
    }
}

pub fn validate(budget: &Budget) -> Result<ValidationReport> {
    let scale = budget.tolerance_scale;
    let full = budget.effort == Effort::Full;
    let mut checks = Vec::new();

    let (lambda, delta) = (0.7, 0.85);
    let policy = PolicySpec::AujsqExp { delta };
    let small = ModelParams::new(2, lambda, delta)?;
    let (_, _, oracle) = solve_with_loss_target(&small, &policy, 1e-4)?;
    let horizon = if full { 1e6 } else { 2e5 };
    let sim = run(&SimConfig::new(small, policy, horizon, budget.seed))?;
    checks.push(check(
        "ctmc_queue_marginal_tv",
        total_variation(&sim.queue_len_hist, &oracle.queue_marginal),
        0.02 * scale,
    ));
    checks.push(check(
        "ctmc_mean_wait_rel_error",
        (sim.mean_wait / oracle.mean_wait - 1.0).abs(),
        0.03 * scale,
    ));
    checks.push(check(
        "ctmc_truncation_loss",
        oracle.loss_rate,
        1e-4 * scale,
    ));

    let coords = [
        Coordinate::V(0),
        Coordinate::V(1),
        Coordinate::V(2),
        Coordinate::W(0),
        Coordinate::W(1),
        Coordinate::W(2),
    ];
    for delta in [0.85, 2.5] {
        let y0 = FluidState::empty(default_jmax(lambda, delta));
        let fluid = integrate_async(&y0, lambda, delta, 10.0, AsyncOptions::for_delta(delta))?;
        let cfg = SimConfig::new(
            ModelParams::new(1000, lambda, delta)?,
            PolicySpec::AujsqExp { delta },
            10.0,
            budget.seed,
        )
        .with_warmup(0.0)
        .with_trajectory(0.1);
        let mean = run_replications(&cfg, 10)?
            .mean
            .trajectory
            .unwrap_or_default();
        checks.push(check(
            &format!("fluid_vs_des_async_{delta}"),
            mean.sup_distance(&fluid.trajectory, &coords, 10.0),
            0.05 * scale,
        ));
    }

    let mut opts = SyncOptions::for_delta(0.85);
    opts.grid_dt = 0.05;
    let run_sync = integrate_sync(&FluidState::empty(40), lambda, 0.85, 30.0, opts)?;
    let report = check_sync_invariants(&run_sync, 1e-5 * scale);
    for c in report.checks {
        checks.push(CheckResult {
            name: format!("sync_invariant_{}", c.name),
            value: c.max_residual,
            tolerance: 1e-5 * scale,
            passed: c.passed,
        });
    }

    for (l, d) in [(0.7, 0.85), (0.7, 2.5), (0.5, 1.0)] {
        let residual = match FixedPoint::compute(l, d) {
            Ok(fp) => fp.residual,
            Err(_) => f64::INFINITY,
        };
        checks.push(check(
            &format!("fixed_point_residual_{l}_{d}"),
            residual,
            1e-8 * scale,
        ));
    }

    let jsq = run(&SimConfig::new(
        ModelParams::new(50, lambda, 1.0)?,
        PolicySpec::JsqD { d: 2 },
        if full { 500.0 } else { 100.0 },
        budget.seed,
    ))?;
    checks.push(check(
        "jsq_d2_messages",
        (jsq.msgs_per_job - 4.0).abs(),
        0.0,
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(ValidationReport {
        budget: *budget,
        checks,
        passed,
    })
}
