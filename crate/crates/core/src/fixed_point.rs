//! Stationary point of the asynchronous fluid limit with exponential
//! update intervals, and the level bound for deterministic intervals.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluid_async::rhs_async;
use crate::fluid_sync::poisson_ab;
use crate::model::{default_jmax, tri_index, tri_len, FluidState, ModelParams};

/// Largest admissible `max |rhs|` at the computed fixed point.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const NU_TOLERANCE: f64 = 1e-12;

/// `floor(-ln(1 - lambda) / ln(1 + delta))`.
pub fn m_star_closed_form(lambda: f64, delta: f64) -> usize {
    (-(1.0 - lambda).ln() / delta.ln_1p()).floor().max(0.0) as usize
}

/// `min { m : lambda < 1 - (1 + delta)^-(m+1) }`.
pub fn m_star_min_set(lambda: f64, delta: f64) -> usize {
    let a = 1.0 / (1.0 + delta);
    let mut m = 0;
    let mut tail = a;
    while lambda >= 1.0 - tail {
        m += 1;
        tail *= a;
    }
    m
}

/// Stationary minimum queue estimate. Both characterizations are
/// evaluated; near the boundary `lambda = 1 - (1 + delta)^-m` they may
/// differ by one through rounding, and the min-set form is returned.
pub fn m_star(lambda: f64, delta: f64) -> usize {
    let min_set = m_star_min_set(lambda, delta);
    debug_assert!(m_star_closed_form(lambda, delta).abs_diff(min_set) <= 1);
    min_set
}

/// `h(nu) = a^(m+1) + a^2 b^(m-1) delta^2 / ((1 + nu)(delta + nu))`.
pub fn h(nu: f64, delta: f64, m_star: usize) -> f64 {
    let a = 1.0 / (1.0 + delta);
    let b = 1.0 / (1.0 + delta + nu);
    let m = m_star as i32;
    a.powi(m + 1) + a * a * b.powi(m - 1) * delta * delta / ((1.0 + nu) * (delta + nu))
}

/// Unique `nu >= 0` with `h(nu) = 1 - lambda`, by bisection.
pub fn solve_nu(lambda: f64, delta: f64, m_star: usize) -> f64 {
    let target = 1.0 - lambda;
    let f = |nu: f64| h(nu, delta, m_star) - target;
    if f(0.0) <= 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > NU_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form mean queue length at the fixed point.
pub fn q_tilde_closed_form(lambda: f64, delta: f64, m_star: usize, nu: f64) -> f64 {
    m_star as f64 + 1.0
        - lambda / delta
        - (1.0 + delta + nu) * delta / ((1.0 + delta) * (1.0 + nu) * (delta + nu))
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPoint {
    pub lambda: f64,
    pub delta: f64,
    pub m_star: usize,
    pub nu: f64,
    pub a: f64,
    pub b: f64,
    pub y_star: FluidState,
    pub q_tilde: f64,
    /// `max |rhs_async(y_star)|`.
    pub residual: f64,
}

impl FixedPoint {
    /// Fixed point embedded with the default truncation level.
    pub fn compute(lambda: f64, delta: f64) -> Result<Self> {
        Self::with_jmax(lambda, delta, default_jmax(lambda, delta))
    }

    pub fn with_jmax(lambda: f64, delta: f64, jmax: usize) -> Result<Self> {
        ModelParams::new(1, lambda, delta)?;
        let m = m_star(lambda, delta);
        if jmax < m + 2 {
            return Err(Error::params(format!(
                "jmax = {jmax} cannot hold the fixed point support up to column {}",
                m + 1
            )));
        }
        let nu = solve_nu(lambda, delta, m);
        let y = y_star_cells(delta, m, nu, jmax);
        let y_star = FluidState::from_raw(jmax, y);
        let residual = rhs_async(&y_star, lambda, delta)?
            .iter()
            .fold(0.0f64, |acc, d| acc.max(d.abs()));
        if residual >= RESIDUAL_TOLERANCE {
            return Err(Error::FixedPointResidual {
                residual,
                tolerance: RESIDUAL_TOLERANCE,
            });
        }
        Ok(Self {
            lambda,
            delta,
            m_star: m,
            nu,
            a: 1.0 / (1.0 + delta),
            b: 1.0 / (1.0 + delta + nu),
            y_star,
            q_tilde: q_tilde_closed_form(lambda, delta, m, nu),
            residual,
        })
    }

    /// `sum_i i * v_i` evaluated directly on `y_star`.
    pub fn mean_queue_from_cells(&self) -> f64 {
        self.y_star.cells().map(|(i, _, y)| i as f64 * y).sum()
    }
}

fn y_star_cells(delta: f64, m: usize, nu: f64, jmax: usize) -> Vec<f64> {
    let a = 1.0 / (1.0 + delta);
    let b = 1.0 / (1.0 + delta + nu);
    let mi = m as i32;
    let mut y = vec![0.0; tri_len(jmax)];
    let head = a * b.powi(mi - 1) * delta / ((1.0 + nu) * (delta + nu));
    y[tri_index(0, m)] = head;
    for i in 1..=m {
        y[tri_index(i, m)] = a * b.powi(mi - i as i32) * delta / (1.0 + nu);
    }
    let top = a.powi(mi + 1) - a * head;
    y[tri_index(0, m + 1)] = top.max(0.0);
    y[tri_index(1, m + 1)] = (delta * top).max(0.0);
    for i in 2..=m + 1 {
        let ii = i as i32;
        let value = delta * (a.powi(mi + 2 - ii) - a * b.powi(mi + 1 - ii) / (1.0 + nu));
        y[tri_index(i, m + 1)] = value.max(0.0);
    }
    y
}

/// Largest `m` with `B(m, 1/delta) <= lambda / delta`: the stationary
/// minimum level bound under deterministic asynchronous updates.
pub fn m_star_det(lambda: f64, delta: f64) -> usize {
    let t = 1.0 / delta;
    let budget = lambda / delta;
    let mut m = 0;
    while poisson_ab(m + 1, t).b <= budget {
        m += 1;
    }
    debug_assert!(m <= m_star(lambda, delta));
    m
}
