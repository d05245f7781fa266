//! Time-indexed sequences of fluid-scaled states and their `t,i,j,y` CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tri_index, tri_len, FluidState};

/// Coordinates compared between simulation and fluid trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    V(usize),
    W(usize),
}

impl Coordinate {
    pub fn eval(&self, y: &FluidState) -> f64 {
        match *self {
            Coordinate::V(i) => (i..=y.jmax()).map(|j| y.get(i, j)).sum(),
            Coordinate::W(j) => (0..=j).map(|i| y.get(i, j)).sum(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Coordinate::V(i) => format!("v{i}"),
            Coordinate::W(j) => format!("w{j}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FluidState>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    t: f64,
    i: usize,
    j: usize,
    y: f64,
}

impl Trajectory {
    pub fn push(&mut self, t: f64, y: FluidState) {
        self.times.push(t);
        self.states.push(y);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&FluidState> {
        self.states.last()
    }

    /// Largest column carrying mass at any sample.
    pub fn support(&self) -> usize {
        self.states
            .iter()
            .map(|s| s.support(0.0))
            .max()
            .unwrap_or(0)
    }

    /// Sample at the grid time closest to `t`.
    pub fn at(&self, t: f64) -> Option<&FluidState> {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))?
            .0;
        self.states.get(k)
    }

    /// `sup_t max_c |c(self(t)) - c(other(t))|` over samples with matching
    /// times in `[0, t_max]`.
    pub fn sup_distance(&self, other: &Trajectory, coords: &[Coordinate], t_max: f64) -> f64 {
        let mut dist: f64 = 0.0;
        let mut k = 0;
        for (t, a) in self.times.iter().zip(&self.states) {
            if *t > t_max + 1e-9 {
                break;
            }
            while k < other.times.len() && other.times[k] < t - 1e-9 {
                k += 1;
            }
            if k < other.times.len() && (other.times[k] - t).abs() <= 1e-9 {
                for c in coords {
                    dist = dist.max((c.eval(a) - c.eval(&other.states[k])).abs());
                }
            }
        }
        dist
    }

    /// Pointwise mean of trajectories sampled on a common grid.
    pub fn mean(runs: &[Trajectory]) -> Result<Trajectory> {
        let first = runs
            .first()
            .ok_or_else(|| Error::params("no trajectories to average"))?;
        let jmax = runs
            .iter()
            .flat_map(|r| r.states.iter().map(FluidState::jmax))
            .max()
            .unwrap_or(0);
        let mut out = Trajectory::default();
        for (k, &t) in first.times.iter().enumerate() {
            let mut acc = vec![0.0; tri_len(jmax)];
            for r in runs {
                if r.times.get(k).is_none_or(|&s| (s - t).abs() > 1e-9) {
                    return Err(Error::params("trajectories use different grids"));
                }
                for (i, j, y) in r.states[k].cells() {
                    acc[tri_index(i, j)] += y;
                }
            }
            let n = runs.len() as f64;
            acc.iter_mut().for_each(|v| *v /= n);
            out.push(t, FluidState::from_raw(jmax, acc));
        }
        Ok(out)
    }

    /// Writes every cell up to the trajectory's support, one row per
    /// `(t, i, j)`, ordered by time then column-major.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let support = self.support();
        let mut w = csv::Writer::from_writer(writer);
        for (&t, s) in self.times.iter().zip(&self.states) {
            for j in 0..=support {
                for i in 0..=j {
                    w.serialize(Row {
                        t,
                        i,
                        j,
                        y: s.get(i, j),
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Trajectory> {
        let mut rows: Vec<Row> = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            rows.push(row?);
        }
        let jmax = rows.iter().map(|r| r.j).max().unwrap_or(0);
        let mut out = Trajectory::default();
        let mut k = 0;
        while k < rows.len() {
            let t = rows[k].t;
            let mut y = vec![0.0; tri_len(jmax)];
            while k < rows.len() && rows[k].t == t {
                let r = &rows[k];
                if r.i > r.j {
                    return Err(Error::InvalidEntry {
                        i: r.i,
                        j: r.j,
                        reason: "queue length exceeds estimate".into(),
                    });
                }
                y[tri_index(r.i, r.j)] = r.y;
                k += 1;
            }
            out.push(t, FluidState::from_dense(jmax, y)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let mut tr = Trajectory::default();
        tr.push(0.0, FluidState::empty(3));
        tr.push(
            0.5,
            FluidState::from_entries(3, [((0, 0), 0.25), ((1, 2), 0.75)]).unwrap(),
        );
        tr
    }

    #[test]
    fn csv_round_trip() {
        let tr = sample();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,i,j,y\n0.0,0,0,1.0\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 6);
        let back = Trajectory::read_csv(&buf[..]).unwrap();
        assert_eq!(back.times, tr.times);
        for (a, b) in back.states.iter().zip(&tr.states) {
            assert!(a.sup_distance(b) < 1e-15);
        }
    }

    #[test]
    fn coordinates_and_distance() {
        let tr = sample();
        let y = &tr.states[1];
        assert_eq!(Coordinate::V(1).eval(y), 0.75);
        assert_eq!(Coordinate::W(2).eval(y), 0.75);
        assert_eq!(Coordinate::W(1).eval(y), 0.0);
        let d = tr.sup_distance(&sample(), &[Coordinate::V(0)], 10.0);
        assert_eq!(d, 0.0);
        let mut other = sample();
        other.states[1] = FluidState::empty(3);
        let d = tr.sup_distance(&other, &[Coordinate::V(0)], 10.0);
        assert!((d - 0.75).abs() < 1e-15);
        assert_eq!(tr.sup_distance(&other, &[Coordinate::V(0)], 0.1), 0.0);
    }

    #[test]
    fn pointwise_mean() {
        let mut a = sample();
        let b = sample();
        a.states[1] = FluidState::empty(3);
        let m = Trajectory::mean(&[a, b]).unwrap();
        assert!((m.states[1].get(0, 0) - 0.625).abs() < 1e-15);
        assert!((m.states[1].get(1, 2) - 0.375).abs() < 1e-15);
    }
}
