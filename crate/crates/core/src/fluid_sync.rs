//! Fluid limit under synchronous updates.
//!
//! Between update epochs the minimum-estimate column `m` receives every
//! arrival, so its mass `w_m` drains at exactly rate `lambda`. Writing that
//! column as `w_m * r` turns the vector field into a linear one: `r`
//! evolves under service only, column `m + 1` gains `lambda * r[i - 1]` in
//! row `i`, and the time at which `m` advances is `w_m / lambda`. The
//! integrator therefore splits steps exactly at epochs, at those switch
//! times and at sampling instants, and applies the diagonal collapse at
//! each epoch.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{tri_index, tri_len, FluidState};
use crate::ode::Rk4;
use crate::trajectory::Trajectory;

/// Mass in the truncation column that aborts integration.
pub const OVERFLOW_MASS: f64 = 1e-6;

/// Moments of `min(G, L)` and `max(L - G, 0)` for `G ~ Poisson(t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonMoments {
    pub t: f64,
    pub l: usize,
    /// `pmf[k] = t^k e^-t / k!` for `k < L`.
    pub pmf: Vec<f64>,
    /// Expected remaining jobs after time `t` from `L` initial jobs.
    pub a: f64,
    /// Expected completions, `L - a`.
    pub b: f64,
}

pub fn poisson_ab(l: usize, t: f64) -> PoissonMoments {
    let mut pmf = Vec::with_capacity(l);
    let mut p = (-t).exp();
    for k in 0..l {
        pmf.push(p);
        p *= t / (k + 1) as f64;
    }
    let a: f64 = pmf
        .iter()
        .enumerate()
        .map(|(k, &p)| (l - k) as f64 * p)
        .sum();
    PoissonMoments {
        t,
        l,
        pmf,
        a,
        b: l as f64 - a,
    }
}

/// `sigma(L) = (1 - (lambda T + 1) / L) B(L, T)`.
pub fn sigma(l: usize, lambda: f64, t: f64) -> f64 {
    if l == 0 {
        return 0.0;
    }
    (1.0 - (lambda * t + 1.0) / l as f64) * poisson_ab(l, t).b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncAnalysis {
    pub lambda: f64,
    pub t: f64,
    pub sigma_at_s: f64,
    /// `s(lambda, T) = min { L >= 2 : lambda T < sigma(L) }`.
    pub s_star: usize,
    /// `sigma(s) - lambda T > 0`.
    pub delta_margin: f64,
}

pub fn s_of(lambda: f64, t: f64) -> SyncAnalysis {
    let target = lambda * t;
    let mut l = 2;
    loop {
        let s = sigma(l, lambda, t);
        if target < s {
            return SyncAnalysis {
                lambda,
                t,
                sigma_at_s: s,
                s_star: l,
                delta_margin: s - target,
            };
        }
        l += 1;
    }
}

fn min_column(y: &[f64], jmax: usize) -> Option<usize> {
    (0..=jmax).find(|&j| (0..=j).any(|i| y[tri_index(i, j)] > 0.0))
}

/// Time derivative of the synchronous fluid limit between epochs.
pub fn rhs_sync(y: &FluidState, lambda: f64) -> Result<Vec<f64>> {
    let jmax = y.jmax();
    let cells = y.as_slice();
    let m = min_column(cells, jmax).ok_or(Error::ZeroMass)?;
    let w_m: f64 = (0..=m).map(|i| cells[tri_index(i, m)]).sum();
    let mut dy = vec![0.0; tri_len(jmax)];
    for j in 0..=jmax {
        for i in 0..=j {
            let mut d = 0.0;
            if i < j {
                d += cells[tri_index(i + 1, j)];
            }
            if i > 0 {
                d -= cells[tri_index(i, j)];
            }
            if j == m {
                d -= lambda * cells[tri_index(i, j)] / w_m;
            }
            if i > 0 && j == m + 1 {
                d += lambda * cells[tri_index(i - 1, m)] / w_m;
            }
            dy[tri_index(i, j)] = d;
        }
    }
    if m == jmax {
        return Err(Error::JmaxOverflow {
            t: f64::NAN,
            jmax,
            mass: w_m,
        });
    }
    Ok(dy)
}

/// Collapses every server's estimate onto its true queue length.
pub fn apply_sync_update(y: &FluidState) -> FluidState {
    let jmax = y.jmax();
    let v = y.derive().v;
    let mut out = vec![0.0; tri_len(jmax)];
    for (i, vi) in v.into_iter().enumerate() {
        out[tri_index(i, i)] = vi;
    }
    FluidState::from_raw(jmax, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncOptions {
    /// Maximal integration step.
    pub dt: f64,
    /// Sampling interval of the stored trajectory.
    pub grid_dt: f64,
}

impl SyncOptions {
    pub fn for_delta(delta: f64) -> Self {
        Self {
            dt: (1.0 / delta).min(1.0) / 1000.0,
            grid_dt: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyncFluidRun {
    pub lambda: f64,
    pub trajectory: Trajectory,
    /// `int_0^t (1 - v_0(s)) ds` at each grid time.
    pub busy_integral: Vec<f64>,
    pub update_epochs: Vec<f64>,
    /// States right after each applied epoch.
    pub epoch_states: Vec<FluidState>,
    /// Times at which the minimum estimate advanced, with the new level.
    pub m_switches: Vec<(f64, usize)>,
    pub final_state: FluidState,
}

/// Integrates from `y0` over `[0, t_end]` with epochs at `k / delta`.
pub fn integrate_sync(
    y0: &FluidState,
    lambda: f64,
    delta: f64,
    t_end: f64,
    opts: SyncOptions,
) -> Result<SyncFluidRun> {
    if !(delta > 0.0) {
        return Err(Error::params("delta must be positive"));
    }
    let bound = (1.0 / delta).min(1.0) / 100.0;
    if opts.dt > bound * (1.0 + 1e-12) {
        return Err(Error::params(format!(
            "dt = {} exceeds min(1/delta, 1)/100 = {bound}",
            opts.dt
        )));
    }
    let count = (t_end * delta + 1e-9).floor() as u64;
    let epochs: Vec<f64> = (1..=count).map(|k| k as f64 / delta).collect();
    integrate_sync_with_epochs(y0, lambda, &epochs, t_end, opts)
}

/// Integrates with an explicit increasing list of update epochs.
pub fn integrate_sync_with_epochs(
    y0: &FluidState,
    lambda: f64,
    epochs: &[f64],
    t_end: f64,
    opts: SyncOptions,
) -> Result<SyncFluidRun> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::params(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if !(opts.dt > 0.0 && opts.grid_dt > 0.0 && t_end >= 0.0) {
        return Err(Error::params("dt, grid_dt and t_end must be positive"));
    }
    if epochs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::params("update epochs must be nondecreasing"));
    }
    Integrator::new(y0, lambda)?.run(epochs, t_end, opts)
}

struct Integrator {
    lambda: f64,
    jmax: usize,
    n: usize,
    /// Cells with column `m` holding the composition `r`, then `w_m` and
    /// the busy-time integral.
    x: Vec<f64>,
    m: usize,
    hi: usize,
    rk: Rk4,
}

impl Integrator {
    fn new(y0: &FluidState, lambda: f64) -> Result<Self> {
        let jmax = y0.jmax();
        let n = tri_len(jmax);
        let mut x = vec![0.0; n + 2];
        x[..n].copy_from_slice(y0.as_slice());
        let mut it = Self {
            lambda,
            jmax,
            n,
            x,
            m: 0,
            hi: y0.support(0.0),
            rk: Rk4::new(n + 2),
        };
        it.m = min_column(&it.x[..n], jmax).ok_or(Error::ZeroMass)?;
        it.normalize_min_column();
        Ok(it)
    }

    fn normalize_min_column(&mut self) {
        let m = self.m;
        let w: f64 = (0..=m).map(|i| self.x[tri_index(i, m)]).sum();
        for i in 0..=m {
            self.x[tri_index(i, m)] /= w;
        }
        self.x[self.n] = w;
    }

    fn state(&self) -> FluidState {
        let mut y = self.x[..self.n].to_vec();
        let w = self.x[self.n];
        for i in 0..=self.m {
            y[tri_index(i, self.m)] *= w;
        }
        for v in y.iter_mut() {
            if *v < 0.0 && *v > -1e-12 {
                *v = 0.0;
            }
        }
        FluidState::from_raw(self.jmax, y)
    }

    fn check_overflow(&self, t: f64) -> Result<()> {
        if self.m >= self.jmax {
            return Err(Error::JmaxOverflow {
                t,
                jmax: self.jmax,
                mass: self.x[self.n],
            });
        }
        let j = self.jmax;
        let mass: f64 = (0..=j).map(|i| self.x[tri_index(i, j)]).sum();
        if mass > OVERFLOW_MASS {
            return Err(Error::JmaxOverflow { t, jmax: j, mass });
        }
        Ok(())
    }

    fn step(&mut self, h: f64) {
        let (m, hi, n, lambda) = (self.m, self.hi.max(self.m + 1), self.n, self.lambda);
        self.rk.step(&mut self.x, h, |x, dx| {
            dx.fill(0.0);
            for j in m..=hi {
                for i in 0..=j {
                    let mut d = 0.0;
                    if i < j {
                        d += x[tri_index(i + 1, j)];
                    }
                    if i > 0 {
                        d -= x[tri_index(i, j)];
                    }
                    if i > 0 && j == m + 1 {
                        d += lambda * x[tri_index(i - 1, m)];
                    }
                    dx[tri_index(i, j)] = d;
                }
            }
            let w = x[n];
            let mut v0 = w * x[tri_index(0, m)];
            for j in m + 1..=hi {
                v0 += x[tri_index(0, j)];
            }
            dx[n] = -lambda;
            dx[n + 1] = 1.0 - v0;
        });
        self.hi = hi;
    }

    fn advance_m(&mut self) {
        let m = self.m;
        for i in 0..=m {
            self.x[tri_index(i, m)] = 0.0;
        }
        self.m = m + 1;
        self.normalize_min_column();
    }

    fn apply_epoch(&mut self) {
        let y = apply_sync_update(&self.state());
        self.x[..self.n].copy_from_slice(y.as_slice());
        self.hi = y.support(0.0);
        self.m = min_column(&self.x[..self.n], self.jmax).expect("mass is conserved");
        self.normalize_min_column();
    }

    fn run(mut self, epochs: &[f64], t_end: f64, opts: SyncOptions) -> Result<SyncFluidRun> {
        let mut out = SyncFluidRun {
            lambda: self.lambda,
            trajectory: Trajectory::default(),
            busy_integral: Vec::new(),
            update_epochs: Vec::new(),
            epoch_states: Vec::new(),
            m_switches: Vec::new(),
            final_state: FluidState::empty(0),
        };
        self.check_overflow(0.0)?;
        let mut t = 0.0;
        let mut next_epoch = 0;
        while next_epoch < epochs.len() && epochs[next_epoch] <= 0.0 {
            next_epoch += 1;
        }
        let mut grid_k: u64 = 0;
        let grid_count = (t_end / opts.grid_dt + 1e-9).floor() as u64;
        let record = |it: &Self, out: &mut SyncFluidRun, t: f64| {
            out.trajectory.push(t, it.state());
            out.busy_integral.push(it.x[it.n + 1]);
        };
        record(&self, &mut out, 0.0);
        grid_k += 1;
        loop {
            let grid_t = if grid_k <= grid_count {
                (grid_k as f64 * opts.grid_dt).min(t_end)
            } else {
                f64::INFINITY
            };
            let epoch_t = epochs.get(next_epoch).copied().unwrap_or(f64::INFINITY);
            let switch_t = t + self.x[self.n] / self.lambda;
            let target = (t + opts.dt)
                .min(grid_t)
                .min(epoch_t)
                .min(switch_t)
                .min(t_end);
            if target > t {
                self.step(target - t);
                t = target;
            }
            if target == switch_t {
                self.advance_m();
                out.m_switches.push((t, self.m));
            }
            if target == epoch_t {
                self.apply_epoch();
                out.update_epochs.push(t);
                out.epoch_states.push(self.state());
                next_epoch += 1;
            }
            self.check_overflow(t)?;
            if target == grid_t {
                record(&self, &mut out, t);
                grid_k += 1;
            }
            if t >= t_end && grid_k > grid_count {
                break;
            }
        }
        out.final_state = self.state();
        Ok(out)
    }
}

/// Outcome of one trajectory-level property check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Checks the stored grid of a run against the structural properties of
/// the synchronous fluid limit, each with tolerance `tol`.
pub fn check_sync_invariants(run: &SyncFluidRun, tol: f64) -> InvariantReport {
    let lambda = run.lambda;
    let tr = &run.trajectory;
    let derived: Vec<_> = tr.states.iter().map(FluidState::derive).collect();
    let crosses_epoch = |t0: f64, t1: f64| run.update_epochs.iter().any(|&e| e > t0 && e <= t1);

    let mut mass = 0.0f64;
    let mut negativity = 0.0f64;
    for s in &tr.states {
        mass = mass.max((s.total() - 1.0).abs());
        for (_, _, y) in s.cells() {
            negativity = negativity.max(-y);
        }
    }

    let mut drain = 0.0f64;
    let mut monotone_m = 0.0f64;
    let mut tail = 0.0f64;
    let max_k = derived.iter().map(|d| d.v.len()).max().unwrap_or(1);
    for k in 1..tr.len() {
        let (t0, t1) = (tr.times[k - 1], tr.times[k]);
        if crosses_epoch(t0, t1) {
            continue;
        }
        let (d0, d1) = (&derived[k - 1], &derived[k]);
        if d1.m < d0.m {
            monotone_m = monotone_m.max((d0.m - d1.m) as f64);
        }
        if d0.m == d1.m {
            let h = t1 - t0;
            let m = d0.m;
            drain = drain.max(((d1.w(m) - d0.w(m)) / h + lambda).abs());
            drain = drain.max(((d1.w(m + 1) - d0.w(m + 1)) / h - lambda).abs());
        }
        for level in d0.m.max(d1.m) + 1..max_k {
            tail = tail.max(d1.q_above(level) - d0.q_above(level));
        }
    }

    let last = derived.len() - 1;
    let balance = if last > 0 {
        let t_end = tr.times[last];
        (derived[last].q_mass - derived[0].q_mass - lambda * t_end + run.busy_integral[last]).abs()
    } else {
        0.0
    };

    let check = |name, r: f64| InvariantCheck {
        name,
        passed: r <= tol,
        max_residual: r,
    };
    InvariantReport {
        checks: vec![
            check("mass_conservation", mass),
            check("nonnegativity", negativity.max(0.0)),
            check("min_estimate_nondecreasing", monotone_m),
            check("min_column_drain", drain),
            check("tail_mass_nonincreasing", tail.max(0.0)),
            check("queue_balance", balance),
        ],
    }
}

/// Post-update state of the periodic orbit: a fraction `1 - lambda` idle
/// and `lambda` with one job, all estimates exact. It is reproduced at every
/// epoch when `delta >= lambda / (1 - lambda)`.
pub fn sync_fixed_point(lambda: f64, delta: f64, jmax: usize) -> Result<FluidState> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::params(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    let threshold = lambda / (1.0 - lambda);
    if delta < threshold * (1.0 - 1e-12) {
        return Err(Error::params(format!(
            "no periodic orbit at delta = {delta} < lambda / (1 - lambda) = {threshold}"
        )));
    }
    FluidState::from_entries(jmax, [((0, 0), 1.0 - lambda), ((1, 1), lambda)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sync_fixed_point(lambda: f64, jmax: usize) -> FluidState {
        super::sync_fixed_point(lambda, lambda / (1.0 - lambda), jmax).unwrap()
    }

    #[test]
    fn sync_orbit_needs_fast_updates() {
        assert!(super::sync_fixed_point(0.7, 2.0, 10).is_err());
        assert!(super::sync_fixed_point(0.7, 7.0 / 3.0, 10).is_ok());
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_ab(1, 0.5).a - (-0.5f64).exp()).abs() < 1e-15);
        assert!((poisson_ab(1, 0.5).a - 0.6065306597126334).abs() < 1e-12);
        assert!((poisson_ab(2, 1.0).b - 0.896361676485673).abs() < 1e-12);
        let z = poisson_ab(4, 0.0);
        assert_eq!((z.a, z.b), (4.0, 0.0));
        for l in 0..=20 {
            for k in 0..=50 {
                let t = 0.1 * k as f64;
                let p = poisson_ab(l, t);
                assert_eq!(p.a + p.b, l as f64);
            }
        }
    }

    #[test]
    fn a_over_l_is_monotone() {
        for l in 1..20 {
            for k in 0..=50 {
                let t = 0.1 * k as f64;
                let lhs = poisson_ab(l, t).a / l as f64;
                let rhs = poisson_ab(l + 1, t).a / (l + 1) as f64;
                assert!(lhs <= rhs + 1e-15, "L={l} t={t}");
            }
        }
    }

    #[test]
    fn s_examples() {
        let a = s_of(0.7, 1.0 / 0.85);
        assert_eq!(a.s_star, 7);
        assert!((a.delta_margin - 0.046438).abs() < 1e-6);
        let b = s_of(0.7, 0.4);
        assert_eq!(b.s_star, 5);
        assert!((b.delta_margin - 0.017597).abs() < 1e-6);
        assert!(sigma(1, 0.7, 2.0) <= 0.0);
        for k in 1..50 {
            let r = s_of(0.5, 0.1 * k as f64);
            assert!(r.s_star >= 2 && r.delta_margin > 0.0);
        }
    }

    #[test]
    fn rhs_examples() {
        let lambda = 0.7;
        let dy = rhs_sync(&sync_fixed_point(lambda, 4), lambda).unwrap();
        assert!((dy[tri_index(0, 0)] + 0.7).abs() < 1e-15);
        assert!((dy[tri_index(0, 1)] - 0.7).abs() < 1e-15);
        assert!(dy[tri_index(1, 1)].abs() < 1e-15);

        let dy = rhs_sync(&FluidState::empty(4), lambda).unwrap();
        assert_eq!(dy[tri_index(0, 0)], -lambda);
        assert_eq!(dy[tri_index(1, 1)], lambda);
        assert_eq!(dy.iter().filter(|d| **d != 0.0).count(), 2);
    }

    #[test]
    fn update_examples() {
        let y = FluidState::from_entries(2, [((0, 1), 0.4), ((1, 1), 0.6)]).unwrap();
        let u = apply_sync_update(&y);
        assert!((u.get(0, 0) - 0.4).abs() < 1e-15 && (u.get(1, 1) - 0.6).abs() < 1e-15);
        assert_eq!(apply_sync_update(&u), u);

        let (lambda, t) = (0.7, 0.4);
        let pre = FluidState::from_entries(
            2,
            [
                ((0, 0), 1.0 - lambda - lambda * t),
                ((0, 1), lambda * t),
                ((1, 1), lambda),
            ],
        )
        .unwrap();
        assert!(apply_sync_update(&pre).sup_distance(&sync_fixed_point(lambda, 2)) < 1e-15);
    }

    #[test]
    fn fixed_point_cycle() {
        let (lambda, delta) = (0.7, 2.5);
        let y0 = sync_fixed_point(lambda, 40);
        let mut opts = SyncOptions::for_delta(delta);
        opts.grid_dt = 0.02;
        let run = integrate_sync(&y0, lambda, delta, 20.0 / delta, opts).unwrap();
        assert_eq!(run.epoch_states.len(), 20);
        for s in &run.epoch_states {
            assert!(s.sup_distance(&y0) < 1e-6);
        }
        for (t, s) in run.trajectory.times.iter().zip(&run.trajectory.states) {
            let phase = t - (t * delta + 1e-9).floor() / delta;
            assert!(
                (s.get(0, 0) - (1.0 - lambda - lambda * phase)).abs() < 1e-6,
                "t={t}"
            );
        }
        let report = check_sync_invariants(&run, 1e-6);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn empty_start_low_frequency_queues() {
        let (lambda, delta) = (0.7, 0.85);
        let mut opts = SyncOptions::for_delta(delta);
        opts.grid_dt = 0.05;
        let run = integrate_sync(&FluidState::empty(40), lambda, delta, 30.0, opts).unwrap();
        assert!(run.trajectory.states.iter().any(|s| s.derive().v(2) > 0.0));
        let report = check_sync_invariants(&run, 1e-5);
        assert!(report.passed(), "{report:?}");
        assert!(report.get("queue_balance").unwrap().max_residual < 1e-5);
        let s = s_of(lambda, 1.0 / delta).s_star;
        let late = run.trajectory.states.iter().skip(400);
        assert!(late.map(|st| st.derive().q_above(s)).fold(0.0, f64::max) < 1e-6);
    }

    #[test]
    fn matches_generic_rk4_on_rhs() {
        let (lambda, delta) = (0.7, 0.85);
        let y0 =
            FluidState::from_entries(6, [((0, 1), 0.5), ((2, 2), 0.3), ((1, 3), 0.2)]).unwrap();
        let opts = SyncOptions {
            dt: 1e-3,
            grid_dt: 0.5,
        };
        let run = integrate_sync(&y0, lambda, delta, 0.5, opts).unwrap();
        let mut y = y0.clone();
        let h = 1e-4;
        for _ in 0..5000 {
            let k1 = rhs_sync(&y, lambda).unwrap();
            let next: Vec<f64> = y
                .as_slice()
                .iter()
                .zip(&k1)
                .map(|(a, d)| (a + h * d).max(0.0))
                .collect();
            y = FluidState::from_raw(6, next);
        }
        assert!(run.final_state.sup_distance(&y) < 1e-3);
    }

    #[test]
    fn negative_control_mass_violation() {
        let (lambda, delta) = (0.7, 2.5);
        let opts = SyncOptions::for_delta(delta);
        let mut run =
            integrate_sync(&sync_fixed_point(lambda, 10), lambda, delta, 2.0, opts).unwrap();
        let bad: Vec<f64> = run.trajectory.states[3]
            .as_slice()
            .iter()
            .map(|v| v * 1.01)
            .collect();
        run.trajectory.states[3] = FluidState::from_raw(10, bad);
        let report = check_sync_invariants(&run, 1e-6);
        assert!(report.violations().contains(&"mass_conservation"));
    }

    #[test]
    fn jmax_overflow_is_reported() {
        let opts = SyncOptions::for_delta(0.1);
        let err = integrate_sync(&FluidState::empty(3), 0.9, 0.1, 50.0, opts).unwrap_err();
        assert!(matches!(err, Error::JmaxOverflow { .. }));
    }

    #[test]
    fn rejects_coarse_step() {
        let opts = SyncOptions {
            dt: 0.1,
            grid_dt: 0.1,
        };
        assert!(integrate_sync(&FluidState::empty(5), 0.7, 0.85, 1.0, opts).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rhs_conserves_mass(cells in proptest::collection::vec(0.0f64..1.0, tri_len(6))) {
                if let Ok(y) = FluidState::from_dense(6, cells) {
                    if y.derive().m < 6 {
                        let dy = rhs_sync(&y, 0.7).unwrap();
                        prop_assert!(dy.iter().sum::<f64>().abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn update_preserves_marginal(cells in proptest::collection::vec(0.0f64..1.0, tri_len(5))) {
                if let Ok(y) = FluidState::from_dense(5, cells) {
                    let u = apply_sync_update(&y);
                    prop_assert!((u.total() - 1.0).abs() < 1e-12);
                    let (a, b) = (y.derive(), u.derive());
                    for i in 0..=5 {
                        prop_assert!((a.v[i] - b.v[i]).abs() < 1e-15);
                    }
                }
            }
        }
    }
}
