//! Shared state representations.
//!
//! Both the simulator and the fluid engines describe the system by the
//! triangular array `y[i][j]`: the number (or fraction) of servers with true
//! queue length `i` and dispatcher-side queue estimate `j >= i`. Everything
//! else (per-length fractions, tail masses, the minimum estimate) is derived
//! from it on demand.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean service time is fixed to one time unit.
pub const SERVICE_RATE: f64 = 1.0;

/// Tolerance on the total mass of a [`FluidState`].
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    n_servers: usize,
    lambda: f64,
    delta: f64,
}

impl ModelParams {
    pub fn new(n_servers: usize, lambda: f64, delta: f64) -> Result<Self> {
        if n_servers == 0 {
            return Err(Error::params("n_servers must be at least 1"));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::params(format!(
                "lambda must lie in (0, 1), got {lambda}"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::params(format!(
                "delta must be positive, got {delta}"
            )));
        }
        Ok(Self {
            n_servers,
            lambda,
            delta,
        })
    }

    pub fn n_servers(&self) -> usize {
        self.n_servers
    }

    /// Arrival rate per server; the dispatcher sees `lambda * n_servers`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Status updates per server per unit time.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn service_rate(&self) -> f64 {
        SERVICE_RATE
    }
}

/// Number of cells in a triangular array with columns `0..=jmax`.
pub const fn tri_len(jmax: usize) -> usize {
    (jmax + 1) * (jmax + 2) / 2
}

/// Flat offset of cell `(i, j)`, `i <= j`. Column-major so a column is contiguous.
#[inline]
pub const fn tri_index(i: usize, j: usize) -> usize {
    j * (j + 1) / 2 + i
}

/// Truncation level used by the fluid engines when none is given.
pub fn default_jmax(lambda: f64, delta: f64) -> usize {
    let m = crate::fixed_point::m_star(lambda, delta);
    (2 * m + 10).max(40)
}

/// Fluid-scaled occupancy `y[i][j]`, dense over `0 <= i <= j <= jmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidState {
    jmax: usize,
    y: Vec<f64>,
}

impl FluidState {
    /// All servers idle with estimate zero.
    pub fn empty(jmax: usize) -> Self {
        let mut y = vec![0.0; tri_len(jmax)];
        y[0] = 1.0;
        Self { jmax, y }
    }

    /// Builds a state from sparse entries and normalizes it to unit mass.
    pub fn from_entries<I>(jmax: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((usize, usize), f64)>,
    {
        let mut y = vec![0.0; tri_len(jmax)];
        for ((i, j), value) in entries {
            if i > j {
                return Err(Error::InvalidEntry {
                    i,
                    j,
                    reason: "queue length exceeds estimate".into(),
                });
            }
            if j > jmax {
                return Err(Error::InvalidEntry {
                    i,
                    j,
                    reason: format!("estimate beyond jmax = {jmax}"),
                });
            }
            y[tri_index(i, j)] += value;
        }
        Self::from_dense(jmax, y)
    }

    /// Builds a state from a dense column-major triangular vector and
    /// normalizes it to unit mass.
    pub fn from_dense(jmax: usize, mut y: Vec<f64>) -> Result<Self> {
        if y.len() != tri_len(jmax) {
            return Err(Error::params(format!(
                "dense state has {} cells, expected {}",
                y.len(),
                tri_len(jmax)
            )));
        }
        for j in 0..=jmax {
            for i in 0..=j {
                let value = y[tri_index(i, j)];
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::InvalidEntry {
                        i,
                        j,
                        reason: format!("entry {value} is not a nonnegative number"),
                    });
                }
            }
        }
        let total: f64 = y.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        y.iter_mut().for_each(|v| *v /= total);
        Ok(Self { jmax, y })
    }

    /// Wraps an engine vector without renormalizing it.
    pub(crate) fn from_raw(jmax: usize, y: Vec<f64>) -> Self {
        debug_assert_eq!(y.len(), tri_len(jmax));
        Self { jmax, y }
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i > j || j > self.jmax {
            0.0
        } else {
            self.y[tri_index(i, j)]
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.y
    }

    pub fn total(&self) -> f64 {
        self.y.iter().sum()
    }

    /// Iterates `(i, j, y)` over every cell in column-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..=self.jmax).flat_map(move |j| (0..=j).map(move |i| (i, j, self.y[tri_index(i, j)])))
    }

    /// Largest column holding mass above `threshold`.
    pub fn support(&self, threshold: f64) -> usize {
        (0..=self.jmax)
            .rev()
            .find(|&j| (0..=j).any(|i| self.y[tri_index(i, j)].abs() > threshold))
            .unwrap_or(0)
    }

    /// Re-embeds the state with another truncation level. Shrinking fails if
    /// any dropped cell carries mass.
    pub fn with_jmax(&self, jmax: usize) -> Result<Self> {
        let mut y = vec![0.0; tri_len(jmax)];
        for (i, j, value) in self.cells() {
            if j <= jmax {
                y[tri_index(i, j)] = value;
            } else if value != 0.0 {
                return Err(Error::InvalidEntry {
                    i,
                    j,
                    reason: format!("mass {value} would be dropped by jmax = {jmax}"),
                });
            }
        }
        Ok(Self { jmax, y })
    }

    pub fn sup_distance(&self, other: &FluidState) -> f64 {
        let jmax = self.jmax.max(other.jmax);
        let mut dist: f64 = 0.0;
        for j in 0..=jmax {
            for i in 0..=j {
                dist = dist.max((self.get(i, j) - other.get(i, j)).abs());
            }
        }
        dist
    }

    pub fn derive(&self) -> DerivedFunctionals {
        DerivedFunctionals::from_cells(self.jmax, self.cells())
    }
}

/// Integer occupancy counts `Y[i][j]` of a finite system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    n_servers: u64,
    counts: BTreeMap<(usize, usize), u64>,
}

impl CountMatrix {
    pub fn new<I>(n_servers: u64, counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = ((usize, usize), u64)>,
    {
        let mut map = BTreeMap::new();
        for ((i, j), c) in counts {
            if i > j {
                return Err(Error::InvalidEntry {
                    i,
                    j,
                    reason: "queue length exceeds estimate".into(),
                });
            }
            if c > 0 {
                *map.entry((i, j)).or_insert(0) += c;
            }
        }
        let total: u64 = map.values().sum();
        if total != n_servers || n_servers == 0 {
            return Err(Error::params(format!(
                "counts sum to {total}, expected n_servers = {n_servers}"
            )));
        }
        Ok(Self {
            n_servers,
            counts: map,
        })
    }

    /// Tallies per-server `(queue, estimate)` pairs.
    pub fn from_servers(queues: &[u32], estimates: &[u32]) -> Result<Self> {
        if queues.len() != estimates.len() {
            return Err(Error::params("queue and estimate vectors differ in length"));
        }
        Self::new(
            queues.len() as u64,
            queues
                .iter()
                .zip(estimates)
                .map(|(&q, &e)| ((q as usize, e as usize), 1)),
        )
    }

    pub fn n_servers(&self) -> u64 {
        self.n_servers
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts.get(&(i, j)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c))
    }

    pub fn max_estimate(&self) -> usize {
        self.counts.keys().map(|&(_, j)| j).max().unwrap_or(0)
    }

    /// Fluid-scaled snapshot `Y / N`, embedded with truncation `jmax`
    /// (at least the largest estimate present).
    pub fn to_fluid(&self, jmax: usize) -> FluidState {
        let jmax = jmax.max(self.max_estimate());
        let n = self.n_servers as f64;
        let mut y = vec![0.0; tri_len(jmax)];
        for (&(i, j), &c) in &self.counts {
            y[tri_index(i, j)] = c as f64 / n;
        }
        FluidState::from_raw(jmax, y)
    }

    pub fn derive(&self) -> DerivedFunctionals {
        let n = self.n_servers as f64;
        DerivedFunctionals::from_cells(
            self.max_estimate(),
            self.counts.iter().map(|(&(i, j), &c)| (i, j, c as f64 / n)),
        )
    }
}

/// Marginals and queue-mass functionals of a state, as fractions of servers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedFunctionals {
    /// `v[i]`: fraction with queue length `i`.
    pub v: Vec<f64>,
    /// `w[j]`: fraction with queue estimate `j`.
    pub w: Vec<f64>,
    /// `z[k]`: fraction with queue length at least `k`; one longer than `v`
    /// so that the last entry is zero.
    pub z: Vec<f64>,
    /// Minimum queue estimate carrying mass.
    pub m: usize,
    /// Total queue mass `sum_k>=1 z[k]`.
    pub q_mass: f64,
}

impl DerivedFunctionals {
    fn from_cells(jmax: usize, cells: impl Iterator<Item = (usize, usize, f64)>) -> Self {
        let mut v = vec![0.0; jmax + 1];
        let mut w = vec![0.0; jmax + 1];
        for (i, j, value) in cells {
            v[i] += value;
            w[j] += value;
        }
        let mut z = vec![0.0; jmax + 2];
        for k in (0..=jmax).rev() {
            z[k] = z[k + 1] + v[k];
        }
        let q_mass = z[1..].iter().sum();
        let m = w.iter().position(|&x| x > 0.0).unwrap_or(0);
        Self { v, w, z, m, q_mass }
    }

    pub fn v(&self, i: usize) -> f64 {
        self.v.get(i).copied().unwrap_or(0.0)
    }

    pub fn w(&self, j: usize) -> f64 {
        self.w.get(j).copied().unwrap_or(0.0)
    }

    pub fn z(&self, k: usize) -> f64 {
        self.z.get(k).copied().unwrap_or(0.0)
    }

    /// Queue mass weakly below and strictly above level `k`.
    pub fn queue_mass_split(&self, k: usize) -> (f64, f64) {
        let mut below = 0.0;
        let mut above = 0.0;
        for (i, &vi) in self.v.iter().enumerate() {
            below += i.min(k) as f64 * vi;
            if i > k {
                above += (i - k) as f64 * vi;
            }
        }
        (below, above)
    }

    pub fn q_above(&self, k: usize) -> f64 {
        self.queue_mass_split(k).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn derive_two_diagonal_cells() {
        let y = FluidState::from_entries(1, [((0, 0), 0.3), ((1, 1), 0.7)]).unwrap();
        let d = y.derive();
        assert!(close(d.v[0], 0.3) && close(d.v[1], 0.7));
        assert!(close(d.w[0], 0.3) && close(d.w[1], 0.7));
        assert_eq!(d.m, 0);
        assert!(close(d.q_mass, 0.7));
    }

    #[test]
    fn derive_sync_cycle_start() {
        let lambda = 0.7;
        let y = FluidState::from_entries(3, [((0, 0), 1.0 - lambda), ((1, 1), lambda)]).unwrap();
        let d = y.derive();
        assert_eq!(d.m, 0);
        assert!(close(d.q_mass, 0.7));
        assert!(close(d.z[1], 0.7));
        assert!(close(d.z[2], 0.0));
    }

    #[test]
    fn derive_counts_are_fractions() {
        let c = CountMatrix::new(4, [((0, 0), 2), ((1, 2), 2)]).unwrap();
        let d = c.derive();
        assert_eq!(&d.v[..2], &[0.5, 0.5]);
        assert_eq!(d.v[2], 0.0);
        assert_eq!(d.w, vec![0.5, 0.0, 0.5]);
        assert_eq!(d.m, 0);
    }

    #[test]
    fn queue_mass_split_examples() {
        let all_two = FluidState::from_entries(2, [((2, 2), 1.0)])
            .unwrap()
            .derive();
        assert_eq!(all_two.queue_mass_split(1), (1.0, 1.0));
        assert_eq!(all_two.queue_mass_split(0).1, all_two.q_mass);

        let half = FluidState::from_entries(1, [((0, 0), 0.5), ((1, 1), 0.5)])
            .unwrap()
            .derive();
        for k in 1..5 {
            assert_eq!(half.queue_mass_split(k), (0.5, 0.0));
        }
    }

    #[test]
    fn zero_mass_is_rejected() {
        assert!(matches!(
            FluidState::from_entries(2, [((0, 0), 0.0)]),
            Err(Error::ZeroMass)
        ));
        assert!(FluidState::from_entries(2, [((2, 1), 1.0)]).is_err());
        assert!(FluidState::from_entries(2, [((0, 3), 1.0)]).is_err());
        assert!(FluidState::from_entries(2, [((0, 0), -1.0), ((1, 1), 2.0)]).is_err());
    }

    #[test]
    fn count_matrix_must_cover_all_servers() {
        assert!(CountMatrix::new(3, [((0, 0), 2)]).is_err());
        assert!(CountMatrix::new(2, [((1, 0), 2)]).is_err());
    }

    #[test]
    fn construction_normalizes() {
        let y = FluidState::from_entries(2, [((0, 0), 2.0), ((1, 2), 6.0)]).unwrap();
        assert!((y.total() - 1.0).abs() < MASS_TOLERANCE);
        assert!(close(y.get(1, 2), 0.75));
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(10, 0.7, 0.85).is_ok());
        assert!(ModelParams::new(0, 0.7, 0.85).is_err());
        assert!(ModelParams::new(10, 1.0, 0.85).is_err());
        assert!(ModelParams::new(10, 0.7, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_state() -> impl Strategy<Value = FluidState> {
            (1usize..8).prop_flat_map(|jmax| {
                proptest::collection::vec(0.0f64..1.0, tri_len(jmax))
                    .prop_filter_map("nonzero mass", move |y| {
                        FluidState::from_dense(jmax, y).ok()
                    })
            })
        }

        proptest! {
            #[test]
            fn functional_identities(y in arb_state()) {
                let d = y.derive();
                prop_assert!((y.total() - 1.0).abs() < MASS_TOLERANCE);
                prop_assert!((d.z[0] - 1.0).abs() < 1e-9);
                for k in 0..d.v.len() {
                    prop_assert!((d.z[k] - d.z[k + 1] - d.v[k]).abs() < 1e-12);
                    prop_assert!(d.z[k + 1] <= d.z[k] + 1e-15);
                }
                for k in 0..=y.jmax() + 2 {
                    let (below, above) = d.queue_mass_split(k);
                    prop_assert!((below + above - d.q_mass).abs() < 1e-12);
                }
                let m = d.w.iter().position(|&x| x > 0.0).unwrap();
                prop_assert_eq!(d.m, m);
            }
        }
    }
}
