//! Exact stationary analysis of small systems with exponential update
//! intervals, on a state space truncated at a maximal queue estimate.
//!
//! States are multisets of per-server `(queue, estimate)` types; since
//! servers are exchangeable this lumps all relabellings of a configuration
//! into one state. A labelled (unlumped) build is available for checking
//! that reduction.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixed_point::m_star;
use crate::model::ModelParams;
use crate::policy::PolicySpec;

/// Largest number of states a build may enumerate.
pub const DEFAULT_STATE_BUDGET: usize = 20_000;

/// Chains up to this size are solved by dense LU, larger ones iteratively.
pub const DENSE_LIMIT: usize = 1500;

/// Bound on `max |pi Q|` accepted from either solver.
pub const STATIONARY_RESIDUAL: f64 = 1e-10;

/// Per-server `(queue length, queue estimate)`.
pub type ServerType = (u8, u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UpdateMode {
    /// Each server reports at rate `delta`.
    Asynchronous,
    /// All servers report together at rate `delta`.
    Synchronous,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncatedChain {
    pub n_servers: usize,
    pub lambda: f64,
    pub delta: f64,
    pub mode: UpdateMode,
    pub cap: usize,
    pub labelled: bool,
    /// Sorted server types unless `labelled`.
    pub states: Vec<Vec<ServerType>>,
    /// Off-diagonal rates per row, merged by target.
    pub transitions: Vec<Vec<(usize, f64)>>,
    /// Rate of arrivals rejected at the cap, per state.
    pub loss: Vec<f64>,
}

/// Default truncation level: stationary minimum estimate plus four.
pub fn default_cap(lambda: f64, delta: f64) -> usize {
    m_star(lambda, delta) + 4
}

fn mode_of(policy: &PolicySpec) -> Result<(UpdateMode, f64)> {
    match *policy {
        PolicySpec::AujsqExp { delta } => Ok((UpdateMode::Asynchronous, delta)),
        PolicySpec::SujsqExp { delta } => Ok((UpdateMode::Synchronous, delta)),
        other => Err(Error::params(format!(
            "no Markov-chain oracle for `{other}`; only aujsq-exp and sujsq-exp are Markovian"
        ))),
    }
}

/// Builds the lumped generator reachable from the empty system.
pub fn build_generator(
    params: &ModelParams,
    policy: &PolicySpec,
    cap: usize,
) -> Result<TruncatedChain> {
    build(params, policy, cap, false, DEFAULT_STATE_BUDGET)
}

/// Builds the generator over labelled server configurations.
pub fn build_labelled(
    params: &ModelParams,
    policy: &PolicySpec,
    cap: usize,
) -> Result<TruncatedChain> {
    build(params, policy, cap, true, DEFAULT_STATE_BUDGET)
}

pub fn build(
    params: &ModelParams,
    policy: &PolicySpec,
    cap: usize,
    labelled: bool,
    budget: usize,
) -> Result<TruncatedChain> {
    let (mode, delta) = mode_of(policy)?;
    if cap == 0 || cap > u8::MAX as usize - 1 {
        return Err(Error::params(format!("cap must lie in 1..=254, got {cap}")));
    }
    let n = params.n_servers();
    let lambda = params.lambda();
    let canon = |mut s: Vec<ServerType>| {
        if !labelled {
            s.sort_unstable();
        }
        s
    };
    let start = canon(vec![(0, 0); n]);
    let mut index: HashMap<Vec<ServerType>, usize> = HashMap::new();
    let mut states = vec![start.clone()];
    index.insert(start, 0);
    let mut queue = VecDeque::from([0usize]);
    let mut transitions: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut loss = Vec::new();

    while let Some(k) = queue.pop_front() {
        let state = states[k].clone();
        let mut out: Vec<(Vec<ServerType>, f64)> = Vec::new();
        let mut lost = 0.0;

        let m = state.iter().map(|&(_, j)| j).min().expect("nonempty");
        let at_min = state.iter().filter(|&&(_, j)| j == m).count() as f64;
        for (s, &(i, j)) in state.iter().enumerate() {
            if j == m {
                let rate = lambda * n as f64 / at_min;
                if j as usize >= cap {
                    lost += rate;
                } else {
                    let mut next = state.clone();
                    next[s] = (i + 1, j + 1);
                    out.push((next, rate));
                }
            }
            if i > 0 {
                let mut next = state.clone();
                next[s] = (i - 1, j);
                out.push((next, 1.0));
            }
            if mode == UpdateMode::Asynchronous && j > i {
                let mut next = state.clone();
                next[s] = (i, i);
                out.push((next, delta));
            }
        }
        if mode == UpdateMode::Synchronous && state.iter().any(|&(i, j)| j > i) {
            out.push((state.iter().map(|&(i, _)| (i, i)).collect(), delta));
        }

        let mut row: Vec<(usize, f64)> = Vec::with_capacity(out.len());
        for (next, rate) in out {
            let next = canon(next);
            let target = match index.get(&next) {
                Some(&t) => t,
                None => {
                    let t = states.len();
                    if t >= budget {
                        return Err(Error::StateSpaceOverflow {
                            states: t + 1,
                            budget,
                        });
                    }
                    index.insert(next.clone(), t);
                    states.push(next);
                    queue.push_back(t);
                    t
                }
            };
            if target == k {
                continue;
            }
            match row.iter_mut().find(|(t, _)| *t == target) {
                Some(entry) => entry.1 += rate,
                None => row.push((target, rate)),
            }
        }
        row.sort_unstable_by_key(|&(t, _)| t);
        if transitions.len() <= k {
            transitions.resize_with(k + 1, Vec::new);
            loss.resize(k + 1, 0.0);
        }
        transitions[k] = row;
        loss[k] = lost;
    }

    Ok(TruncatedChain {
        n_servers: n,
        lambda,
        delta,
        mode,
        cap,
        labelled,
        states,
        transitions,
        loss,
    })
}

impl TruncatedChain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Dense generator with diagonal `-sum of the row`.
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        for (k, row) in self.transitions.iter().enumerate() {
            let mut out = 0.0;
            for &(t, rate) in row {
                q[(k, t)] = rate;
                out += rate;
            }
            q[(k, k)] = -out;
        }
        q
    }

    /// Total rate out of each state.
    pub fn exit_rates(&self) -> Vec<f64> {
        self.transitions
            .iter()
            .map(|row| row.iter().map(|&(_, r)| r).sum())
            .collect()
    }

    /// Sizes of the closed communicating classes.
    pub fn closed_classes(&self) -> Vec<usize> {
        let mut g = DiGraph::<(), ()>::with_capacity(self.len(), 0);
        let nodes: Vec<_> = (0..self.len()).map(|_| g.add_node(())).collect();
        for (k, row) in self.transitions.iter().enumerate() {
            for &(t, _) in row {
                g.add_edge(nodes[k], nodes[t], ());
            }
        }
        let sccs = tarjan_scc(&g);
        let mut class = vec![0usize; self.len()];
        for (c, members) in sccs.iter().enumerate() {
            for node in members {
                class[node.index()] = c;
            }
        }
        sccs.iter()
            .enumerate()
            .filter(|(c, members)| {
                members.iter().all(|node| {
                    self.transitions[node.index()]
                        .iter()
                        .all(|&(t, _)| class[t] == *c)
                })
            })
            .map(|(_, members)| members.len())
            .collect()
    }

    /// Maps a labelled distribution onto sorted (lumped) configurations.
    pub fn lump(&self, dist: &[f64]) -> HashMap<Vec<ServerType>, f64> {
        let mut out = HashMap::new();
        for (state, &p) in self.states.iter().zip(dist) {
            let mut key = state.clone();
            key.sort_unstable();
            *out.entry(key).or_insert(0.0) += p;
        }
        out
    }
}

/// Solves `pi Q = 0`, `sum pi = 1`.
pub fn stationary(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let closed = chain.closed_classes();
    if closed.len() != 1 {
        return Err(Error::ReducibleChain {
            closed: closed.len(),
            sizes: closed,
        });
    }
    let pi = if chain.len() <= DENSE_LIMIT {
        stationary_dense(chain)?
    } else {
        stationary_gauss_seidel(chain)?
    };
    let residual = residual(chain, &pi);
    if residual > STATIONARY_RESIDUAL {
        return Err(Error::Singular(format!("stationary residual {residual:e}")));
    }
    Ok(pi)
}

fn stationary_dense(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let mut a = chain.generator().transpose();
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular(format!("generator with {n} states")))?;
    Ok(pi.iter().map(|&p| p.max(0.0)).collect())
}

fn stationary_gauss_seidel(chain: &TruncatedChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let exit = chain.exit_rates();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (k, row) in chain.transitions.iter().enumerate() {
        for &(t, rate) in row {
            incoming[t].push((k, rate));
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    for sweep in 0..200_000 {
        for k in 0..n {
            let inflow: f64 = incoming[k].iter().map(|&(l, r)| pi[l] * r).sum();
            pi[k] = inflow / exit[k];
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        if sweep % 50 == 49 && residual(chain, &pi) < 0.1 * STATIONARY_RESIDUAL {
            return Ok(pi);
        }
    }
    Err(Error::Singular(format!(
        "Gauss-Seidel did not converge on {n} states"
    )))
}

/// `max_k |(pi Q)_k|`.
pub fn residual(chain: &TruncatedChain, pi: &[f64]) -> f64 {
    let mut flow = vec![0.0; chain.len()];
    for (k, row) in chain.transitions.iter().enumerate() {
        for &(t, rate) in row {
            flow[t] += pi[k] * rate;
            flow[k] -= pi[k] * rate;
        }
    }
    flow.iter().fold(0.0, |acc, f| acc.max(f.abs()))
}

/// Smallest cap from [`default_cap`] upward whose truncation-loss rate is
/// below `loss_target`, with its stationary law.
pub fn solve_with_loss_target(
    params: &ModelParams,
    policy: &PolicySpec,
    loss_target: f64,
) -> Result<(TruncatedChain, Vec<f64>, OracleMetrics)> {
    let (_, delta) = mode_of(policy)?;
    let mut cap = default_cap(params.lambda(), delta);
    loop {
        let chain = build(params, policy, cap, false, DEFAULT_STATE_BUDGET)?;
        let pi = stationary(&chain)?;
        let metrics = oracle_metrics(&chain, &pi);
        if metrics.loss_rate < loss_target {
            return Ok((chain, pi, metrics));
        }
        cap += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleMetrics {
    /// Mean queue length per server.
    pub mean_queue: f64,
    /// Mean wait by Little's law with unit-mean service.
    pub mean_wait: f64,
    /// Per-server queue-length distribution.
    pub queue_marginal: Vec<f64>,
    /// Stationary rate of rejected arrivals.
    pub loss_rate: f64,
    /// Fraction of arrivals rejected.
    pub loss_probability: f64,
}

pub fn oracle_metrics(chain: &TruncatedChain, dist: &[f64]) -> OracleMetrics {
    let n = chain.n_servers as f64;
    let mut marginal = vec![0.0; chain.cap + 1];
    let mut loss_rate = 0.0;
    for ((state, &p), &lost) in chain.states.iter().zip(dist).zip(&chain.loss) {
        for &(i, _) in state {
            marginal[i as usize] += p / n;
        }
        loss_rate += p * lost;
    }
    let mean_queue = marginal
        .iter()
        .enumerate()
        .map(|(i, p)| i as f64 * p)
        .sum::<f64>();
    OracleMetrics {
        mean_queue,
        mean_wait: mean_queue / chain.lambda - 1.0,
        queue_marginal: marginal,
        loss_rate,
        loss_probability: loss_rate / (chain.lambda * n),
    }
}

/// Total variation distance between two distributions on `0, 1, ...`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let len = p.len().max(q.len());
    0.5 * (0..len)
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, lambda: f64) -> ModelParams {
        ModelParams::new(n, lambda, 1.0).unwrap()
    }

    #[test]
    fn rows_sum_to_zero() {
        let chain =
            build_generator(&params(2, 0.7), &PolicySpec::AujsqExp { delta: 0.85 }, 5).unwrap();
        let q = chain.generator();
        for r in 0..chain.len() {
            let s: f64 = q.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn single_server_fast_updates_approach_mm1() {
        let lambda = 0.5;
        let chain = build_generator(
            &params(1, lambda),
            &PolicySpec::AujsqExp { delta: 500.0 },
            40,
        )
        .unwrap();
        let pi = stationary(&chain).unwrap();
        let m = oracle_metrics(&chain, &pi);
        let mm1 = lambda / (1.0 - lambda);
        assert!((m.mean_queue - mm1).abs() < 0.02, "{}", m.mean_queue);
        assert!((m.mean_wait - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_server_is_mm1_regardless_of_updates() {
        // one server: every job goes to it, so its queue is an M/M/1 queue
        let lambda = 0.6;
        let chain =
            build_generator(&params(1, lambda), &PolicySpec::AujsqExp { delta: 0.3 }, 60).unwrap();
        let pi = stationary(&chain).unwrap();
        let m = oracle_metrics(&chain, &pi);
        for k in 0..10 {
            let expect = (1.0 - lambda) * lambda.powi(k as i32);
            assert!((m.queue_marginal[k] - expect).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn two_state_toy() {
        let chain = TruncatedChain {
            n_servers: 1,
            lambda: 0.5,
            delta: 1.0,
            mode: UpdateMode::Asynchronous,
            cap: 1,
            labelled: false,
            states: vec![vec![(0, 0)], vec![(1, 1)]],
            transitions: vec![vec![(1, 2.0)], vec![(0, 3.0)]],
            loss: vec![0.0, 0.0],
        };
        let pi = stationary(&chain).unwrap();
        assert!((pi[0] - 0.6).abs() < 1e-14 && (pi[1] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn reducible_chain_is_reported() {
        let chain = TruncatedChain {
            n_servers: 1,
            lambda: 0.5,
            delta: 1.0,
            mode: UpdateMode::Asynchronous,
            cap: 1,
            labelled: false,
            states: vec![vec![(0, 0)], vec![(1, 1)], vec![(0, 1)]],
            transitions: vec![vec![(1, 1.0), (2, 1.0)], vec![], vec![]],
            loss: vec![0.0; 3],
        };
        assert!(matches!(
            stationary(&chain),
            Err(Error::ReducibleChain { closed: 2, .. })
        ));
    }

    #[test]
    fn truncation_loss_is_small() {
        let p = PolicySpec::AujsqExp { delta: 0.85 };
        let (chain, pi, m) = solve_with_loss_target(&params(2, 0.7), &p, 1e-4).unwrap();
        assert!(m.loss_rate < 1e-4, "{}", m.loss_rate);
        assert!(chain.len() > DENSE_LIMIT);
        assert!(pi.iter().all(|&x| x >= 0.0));
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lumping_preserves_rates_and_law() {
        for p in [
            PolicySpec::AujsqExp { delta: 0.85 },
            PolicySpec::SujsqExp { delta: 0.6 },
        ] {
            let prm = params(3, 0.7);
            let lumped = build_generator(&prm, &p, 3).unwrap();
            let full = build_labelled(&prm, &p, 3).unwrap();
            let exit_l = lumped.exit_rates();
            let index: HashMap<_, _> = lumped
                .states
                .iter()
                .enumerate()
                .map(|(k, s)| (s.clone(), k))
                .collect();
            for (state, rate) in full.states.iter().zip(full.exit_rates()) {
                let mut key = state.clone();
                key.sort_unstable();
                let k = index[&key];
                assert!((exit_l[k] - rate).abs() < 1e-12);
            }
            let pl = stationary(&lumped).unwrap();
            let pf = full.lump(&stationary(&full).unwrap());
            for (k, s) in lumped.states.iter().enumerate() {
                assert!((pl[k] - pf[s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn only_exponential_updates_have_oracles() {
        let prm = params(2, 0.7);
        assert!(build_generator(&prm, &PolicySpec::SujsqDet { delta: 1.0 }, 4).is_err());
        assert!(build_generator(&prm, &PolicySpec::Random, 4).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let r = build(
            &params(4, 0.7),
            &PolicySpec::AujsqExp { delta: 0.5 },
            6,
            false,
            100,
        );
        assert!(matches!(
            r,
            Err(Error::StateSpaceOverflow { budget: 100, .. })
        ));
    }

    #[test]
    fn iterative_and_dense_solvers_agree() {
        let chain =
            build_generator(&params(2, 0.7), &PolicySpec::SujsqExp { delta: 0.85 }, 7).unwrap();
        let dense = stationary_dense(&chain).unwrap();
        let gs = stationary_gauss_seidel(&chain).unwrap();
        for (a, b) in dense.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_shrinks_with_cap() {
        let prm = params(2, 0.7);
        let p = PolicySpec::AujsqExp { delta: 0.85 };
        let losses: Vec<f64> = (4..8)
            .map(|c| {
                let chain = build_generator(&prm, &p, c).unwrap();
                oracle_metrics(&chain, &stationary(&chain).unwrap()).loss_rate
            })
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn light_load_has_little_wait() {
        let chain =
            build_generator(&params(2, 0.01), &PolicySpec::AujsqExp { delta: 1.0 }, 4).unwrap();
        let m = oracle_metrics(&chain, &stationary(&chain).unwrap());
        assert!(m.mean_wait < 0.01);
    }

    #[test]
    fn tv_distance() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((total_variation(&[1.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    }
}
