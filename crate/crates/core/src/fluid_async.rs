//! Fluid limit under asynchronous exponential updates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{tri_index, tri_len, FluidState};
use crate::ode::Rk4;
use crate::trajectory::Trajectory;

/// Slack on `u_n <= lambda` when selecting the dispatch level.
pub const LEVEL_TOLERANCE: f64 = 1e-12;

const NEG_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsyncDriver {
    /// `u[k] = delta * sum_{i<k} (k - i) v_i`, for `k = 0..=m`.
    pub u: Vec<f64>,
    /// Minimum estimate carrying mass.
    pub m: usize,
    /// Level at which the residual arrivals are dispatched.
    pub n: usize,
    /// Residual arrival rate `lambda - u_n`.
    pub zeta: f64,
}

/// `n = m` if `u_m <= lambda`, else the largest `k` with `u_k <= lambda`.
pub fn driver_of(y: &FluidState, lambda: f64, delta: f64) -> Result<AsyncDriver> {
    let jmax = y.jmax();
    let mut v = vec![0.0; jmax + 1];
    let m = marginals(y.as_slice(), jmax, jmax, &mut v).ok_or(Error::ZeroMass)?;
    let (n, zeta, u) = level(&v, m, lambda, delta);
    Ok(AsyncDriver { u, m, n, zeta })
}

/// Fills `v` over columns `0..=hi` and returns the minimum column carrying
/// positive mass.
fn marginals(y: &[f64], jmax: usize, hi: usize, v: &mut [f64]) -> Option<usize> {
    v.fill(0.0);
    let mut m = None;
    for j in 0..=hi.min(jmax) {
        for i in 0..=j {
            let c = y[tri_index(i, j)];
            v[i] += c;
            if c > 0.0 && m.is_none() {
                m = Some(j);
            }
        }
    }
    m
}

fn level(v: &[f64], m: usize, lambda: f64, delta: f64) -> (usize, f64, Vec<f64>) {
    // u_{k+1} = u_k + delta * sum_{i<=k} v_i
    let mut u = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    let mut cum = 0.0;
    for k in 0..=m {
        u.push(acc);
        cum += v[k];
        acc += delta * cum;
    }
    let n = (0..=m)
        .rev()
        .find(|&k| u[k] <= lambda + LEVEL_TOLERANCE)
        .unwrap_or(0);
    (n, (lambda - u[n]).max(0.0), u)
}

/// Derivative into `out`; returns `(n, zeta)`. With an empty dispatch
/// column, or when `inflow_first` is set, arrivals at level `n` are served
/// from the update inflow into `(n, n)`.
#[allow(clippy::too_many_arguments)]
fn rhs_into(
    y: &[f64],
    jmax: usize,
    hi: usize,
    lambda: f64,
    delta: f64,
    inflow_first: bool,
    v: &mut [f64],
    out: &mut [f64],
) -> Option<(usize, f64)> {
    let hi = hi.min(jmax);
    let m = marginals(y, jmax, hi, v)?;
    let (n, zeta, _) = level(v, m, lambda, delta);
    out.fill(0.0);
    let col = |j: usize| (0..=j).map(|i| y[tri_index(i, j)].max(0.0)).sum::<f64>();
    let w_n = col(n);
    let direct = (inflow_first || w_n <= 0.0) && n < jmax;
    let assign = if w_n > 0.0 && !direct {
        zeta / w_n
    } else {
        0.0
    };
    let below: f64 = v[..n].iter().sum();
    for j in 0..=hi {
        for i in 0..=j {
            let c = y[tri_index(i, j)];
            let mut d = -delta * c;
            if i < j {
                d += y[tri_index(i + 1, j)];
            }
            if i > 0 {
                d -= c;
            }
            if j == n {
                d -= assign * c.max(0.0);
            }
            if i > 0 && j == n + 1 {
                d += assign * y[tri_index(i - 1, n)].max(0.0);
            }
            if i == j && i >= n {
                d += delta * v[i];
                if i == n {
                    d += delta * below;
                }
            }
            out[tri_index(i, j)] = d;
        }
    }
    if direct {
        out[tri_index(n, n)] -= zeta;
        out[tri_index(n + 1, n + 1)] += zeta;
    }
    Some((n, zeta))
}

/// Time derivative of the asynchronous fluid limit.
pub fn rhs_async(y: &FluidState, lambda: f64, delta: f64) -> Result<Vec<f64>> {
    let jmax = y.jmax();
    let mut v = vec![0.0; jmax + 1];
    let mut out = vec![0.0; tri_len(jmax)];
    rhs_into(
        y.as_slice(),
        jmax,
        jmax,
        lambda,
        delta,
        false,
        &mut v,
        &mut out,
    )
    .ok_or(Error::ZeroMass)?;
    let m = y.derive().m;
    if m + 1 > jmax {
        return Err(Error::JmaxOverflow {
            t: f64::NAN,
            jmax,
            mass: y.total(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsyncOptions {
    pub dt: f64,
    pub grid_dt: f64,
}

impl AsyncOptions {
    pub fn for_delta(delta: f64) -> Self {
        Self {
            dt: (1.0 / delta).min(1.0) / 1000.0,
            grid_dt: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AsyncFluidRun {
    pub trajectory: Trajectory,
    /// `(n, zeta)` at each grid time.
    pub drivers: Vec<(usize, f64)>,
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub final_state: FluidState,
}

/// Fixed-step fourth-order integration over `[0, t_end]`. Steps that
/// would drive the dispatch column negative are shortened to the
/// depletion instant, after which the leftover mass is assigned onward.
pub fn integrate_async(
    y0: &FluidState,
    lambda: f64,
    delta: f64,
    t_end: f64,
    opts: AsyncOptions,
) -> Result<AsyncFluidRun> {
    if !(lambda > 0.0 && lambda < 1.0 && delta > 0.0) {
        return Err(Error::params("need 0 < lambda < 1 and delta > 0"));
    }
    let bound = (1.0 / delta).min(1.0) / 100.0;
    if !(opts.dt > 0.0 && opts.dt <= bound * (1.0 + 1e-12)) {
        return Err(Error::params(format!(
            "dt = {} must lie in (0, min(1/delta, 1)/100 = {bound}]",
            opts.dt
        )));
    }
    if !(opts.grid_dt > 0.0 && t_end >= 0.0) {
        return Err(Error::params("grid_dt and t_end must be positive"));
    }
    let jmax = y0.jmax();
    let len = tri_len(jmax);
    let mut x = y0.as_slice().to_vec();
    let mut trial = x.clone();
    let mut v = vec![0.0; jmax + 1];
    let mut v2 = vec![0.0; jmax + 1];
    let mut scratch = vec![0.0; len];
    let mut rk = Rk4::new(len);
    let mut hi = y0.support(0.0);

    let mut out = AsyncFluidRun {
        trajectory: Trajectory::default(),
        drivers: Vec::new(),
        zeta_min: f64::INFINITY,
        zeta_max: f64::NEG_INFINITY,
        final_state: FluidState::empty(0),
    };
    let record =
        |x: &[f64], t: f64, v: &mut [f64], scratch: &mut [f64], out: &mut AsyncFluidRun| {
            let (n, zeta) =
                rhs_into(x, jmax, jmax, lambda, delta, false, v, scratch).expect("mass");
            out.trajectory.push(t, snapshot(x, jmax));
            out.drivers.push((n, zeta));
            out.zeta_min = out.zeta_min.min(zeta);
            out.zeta_max = out.zeta_max.max(zeta);
        };
    check_overflow(&x, jmax, 0.0)?;
    if marginals(&x, jmax, jmax, &mut v).is_none() {
        return Err(Error::ZeroMass);
    }
    record(&x, 0.0, &mut v, &mut scratch, &mut out);

    let mut t = 0.0;
    for grid_t in sample_times(t_end, opts.grid_dt).into_iter().skip(1) {
        while t < grid_t {
            let h = opts.dt.min(grid_t - t);
            let span = (hi + 1).min(jmax);
            let (n0, zeta0) =
                rhs_into(&x, jmax, span, lambda, delta, false, &mut v, &mut scratch).expect("mass");
            let inflow = delta * v[..=n0].iter().sum::<f64>();
            let w0: f64 = (0..=n0).map(|i| x[tri_index(i, n0)]).sum();
            let growing = inflow - delta * w0 > zeta0;
            trial.copy_from_slice(&x);
            let mut f = |y: &[f64], dy: &mut [f64]| {
                rhs_into(y, jmax, span, lambda, delta, false, &mut v, dy);
            };
            rk.step(&mut trial, h, &mut f);
            let taken = if growing && column_negative(&trial, n0) {
                // stiff but filling column: dispatch from the inflow instead
                trial.copy_from_slice(&x);
                let mut g = |y: &[f64], dy: &mut [f64]| {
                    rhs_into(y, jmax, span, lambda, delta, true, &mut v2, dy);
                };
                rk.step(&mut trial, h, &mut g);
                h
            } else if column_negative(&trial, n0) {
                // bisect for the depletion instant of column n0
                let (mut lo, mut up) = (0.0, h);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + up);
                    trial.copy_from_slice(&x);
                    rk.step(&mut trial, mid, &mut f);
                    if column_negative(&trial, n0) {
                        up = mid;
                    } else {
                        lo = mid;
                    }
                    if up - lo < 1e-14 {
                        break;
                    }
                }
                trial.copy_from_slice(&x);
                if lo > 0.0 {
                    rk.step(&mut trial, lo, &mut f);
                }
                shift_column(&mut trial, n0, jmax);
                lo
            } else {
                h
            };
            std::mem::swap(&mut x, &mut trial);
            for c in x.iter_mut() {
                if *c < 0.0 {
                    *c = 0.0;
                }
            }
            t = if taken < h {
                t + taken
            } else if h == grid_t - t {
                grid_t
            } else {
                t + h
            };
            hi = support(&x, jmax);
            check_overflow(&x, jmax, t)?;
        }
        record(&x, grid_t, &mut v, &mut scratch, &mut out);
    }
    out.final_state = snapshot(&x, jmax);
    Ok(out)
}

/// `0, g, 2g, ...` up to `t_end`, with `t_end` appended if off-grid.
pub(crate) fn sample_times(t_end: f64, grid_dt: f64) -> Vec<f64> {
    let count = (t_end / grid_dt + 1e-9).floor() as u64;
    let mut out: Vec<f64> = (0..=count)
        .map(|k| (k as f64 * grid_dt).min(t_end))
        .collect();
    if t_end - out[out.len() - 1] > 1e-9 {
        out.push(t_end);
    }
    out
}

fn snapshot(x: &[f64], jmax: usize) -> FluidState {
    FluidState::from_raw(jmax, x.iter().map(|v| v.max(0.0)).collect())
}

fn support(x: &[f64], jmax: usize) -> usize {
    (0..=jmax)
        .rev()
        .find(|&j| (0..=j).any(|i| x[tri_index(i, j)] != 0.0))
        .unwrap_or(0)
}

fn column_negative(x: &[f64], n: usize) -> bool {
    (0..=n).any(|i| x[tri_index(i, n)] < -NEG_TOLERANCE)
}

/// Moves whatever remains in column `n` one job and one estimate up.
fn shift_column(x: &mut [f64], n: usize, jmax: usize) {
    if n + 1 > jmax {
        return;
    }
    for i in (0..=n).rev() {
        let c = x[tri_index(i, n)].max(0.0);
        x[tri_index(i, n)] = 0.0;
        x[tri_index(i + 1, n + 1)] += c;
    }
}

fn check_overflow(x: &[f64], jmax: usize, t: f64) -> Result<()> {
    let mass: f64 = (0..=jmax).map(|i| x[tri_index(i, jmax)]).sum();
    if mass > crate::fluid_sync::OVERFLOW_MASS {
        return Err(Error::JmaxOverflow { t, jmax, mass });
    }
    Ok(())
}
