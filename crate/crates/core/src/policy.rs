//! Dispatching rules, dispatcher-side bookkeeping and message accounting.
//!
//! The hyper-scalable schemes keep one queue estimate per server, send each
//! job to a server with the lowest estimate, bump that estimate, and let
//! status updates overwrite estimates with true queue lengths. They differ
//! only in *when* updates happen (see [`UpdateClock`]). The benchmark
//! schemes (JIQ, sparsified JIQ, JSQ(d), random, round-robin) share the
//! same [`Dispatcher`] interface.
//!
//! Message accounting is pull-based: one message per status update or idle
//! token, dispatch itself is free, except JSQ(d) which pays `2d` per job.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicySpec {
    SujsqDet { delta: f64 },
    SujsqExp { delta: f64 },
    AujsqDet { delta: f64 },
    AujsqExp { delta: f64 },
    SujsqDetIdle { delta: f64 },
    Jiq,
    JiqP { p: f64 },
    JsqD { d: usize },
    Random,
    RoundRobin,
}

/// Family names accepted by the selector grammar, in display order.
pub const FAMILIES: [&str; 10] = [
    "sujsq-det",
    "sujsq-exp",
    "aujsq-det",
    "aujsq-exp",
    "sujsq-det-idle",
    "jiq",
    "jiq-p",
    "jsq-d",
    "random",
    "round-robin",
];

impl PolicySpec {
    /// Instantiates a parameterized family, e.g. `("jsq-d", 2.0)`.
    pub fn with_parameter(family: &str, value: f64) -> Result<Self> {
        let err = |reason: &str| Error::PolicyParse {
            selector: format!("{family}:{value}"),
            reason: reason.to_string(),
        };
        let spec = match family {
            "sujsq-det" => PolicySpec::SujsqDet { delta: value },
            "sujsq-exp" => PolicySpec::SujsqExp { delta: value },
            "aujsq-det" => PolicySpec::AujsqDet { delta: value },
            "aujsq-exp" => PolicySpec::AujsqExp { delta: value },
            "sujsq-det-idle" => PolicySpec::SujsqDetIdle { delta: value },
            "jiq-p" => PolicySpec::JiqP { p: value },
            "jsq-d" => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(err("d must be a positive integer"));
                }
                PolicySpec::JsqD { d: value as usize }
            }
            "jiq" | "random" | "round-robin" => return Err(err("family takes no parameter")),
            _ => return Err(err("unknown policy family")),
        };
        spec.check().map_err(|e| err(&e))?;
        Ok(spec)
    }

    fn check(&self) -> std::result::Result<(), String> {
        match *self {
            PolicySpec::SujsqDet { delta }
            | PolicySpec::SujsqExp { delta }
            | PolicySpec::AujsqDet { delta }
            | PolicySpec::AujsqExp { delta }
            | PolicySpec::SujsqDetIdle { delta } => {
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(format!("update frequency must be positive, got {delta}"));
                }
            }
            PolicySpec::JiqP { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("token probability must lie in [0, 1], got {p}"));
                }
            }
            PolicySpec::JsqD { d } => {
                if d == 0 {
                    return Err("d must be at least 1".into());
                }
            }
            PolicySpec::Jiq | PolicySpec::Random | PolicySpec::RoundRobin => {}
        }
        Ok(())
    }

    /// Checks parameters against a system size.
    pub fn validate(&self, n_servers: usize) -> Result<()> {
        self.check().map_err(Error::InvalidParams)?;
        if let PolicySpec::JsqD { d } = *self {
            if d > n_servers {
                return Err(Error::params(format!(
                    "jsq-d samples {d} servers but only {n_servers} exist"
                )));
            }
        }
        Ok(())
    }

    pub fn family(&self) -> &'static str {
        match self {
            PolicySpec::SujsqDet { .. } => "sujsq-det",
            PolicySpec::SujsqExp { .. } => "sujsq-exp",
            PolicySpec::AujsqDet { .. } => "aujsq-det",
            PolicySpec::AujsqExp { .. } => "aujsq-exp",
            PolicySpec::SujsqDetIdle { .. } => "sujsq-det-idle",
            PolicySpec::Jiq => "jiq",
            PolicySpec::JiqP { .. } => "jiq-p",
            PolicySpec::JsqD { .. } => "jsq-d",
            PolicySpec::Random => "random",
            PolicySpec::RoundRobin => "round-robin",
        }
    }

    /// The swept parameter (δ, p or d), if the family has one.
    pub fn parameter(&self) -> Option<f64> {
        match *self {
            PolicySpec::SujsqDet { delta }
            | PolicySpec::SujsqExp { delta }
            | PolicySpec::AujsqDet { delta }
            | PolicySpec::AujsqExp { delta }
            | PolicySpec::SujsqDetIdle { delta } => Some(delta),
            PolicySpec::JiqP { p } => Some(p),
            PolicySpec::JsqD { d } => Some(d as f64),
            PolicySpec::Jiq | PolicySpec::Random | PolicySpec::RoundRobin => None,
        }
    }

    pub fn update_frequency(&self) -> Option<f64> {
        match *self {
            PolicySpec::SujsqDet { delta }
            | PolicySpec::SujsqExp { delta }
            | PolicySpec::AujsqDet { delta }
            | PolicySpec::AujsqExp { delta }
            | PolicySpec::SujsqDetIdle { delta } => Some(delta),
            _ => None,
        }
    }

    /// Schemes driven by dispatcher-side queue estimates.
    pub fn is_hyper_scalable(&self) -> bool {
        self.update_frequency().is_some()
    }

    pub fn uses_tokens(&self) -> bool {
        matches!(self, PolicySpec::Jiq | PolicySpec::JiqP { .. })
    }

    pub fn update_timing(&self) -> UpdateTiming {
        match *self {
            PolicySpec::SujsqDet { delta } | PolicySpec::SujsqDetIdle { delta } => {
                UpdateTiming::GlobalDeterministic { delta }
            }
            PolicySpec::SujsqExp { delta } => UpdateTiming::GlobalExponential { delta },
            PolicySpec::AujsqDet { delta } => UpdateTiming::PerServerDeterministic { delta },
            PolicySpec::AujsqExp { delta } => UpdateTiming::PerServerExponential { delta },
            _ => UpdateTiming::None,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.parameter() {
            Some(x) => write!(f, "{}:{}", self.family(), x),
            None => f.write_str(self.family()),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, param) = match s.split_once(':') {
            Some((f, p)) => (f, Some(p)),
            None => (s, None),
        };
        let parse_err = |reason: &str| Error::PolicyParse {
            selector: s.to_string(),
            reason: reason.to_string(),
        };
        match (family, param) {
            ("jiq", None) => Ok(PolicySpec::Jiq),
            ("random", None) => Ok(PolicySpec::Random),
            ("round-robin", None) => Ok(PolicySpec::RoundRobin),
            ("jiq" | "random" | "round-robin", Some(_)) => {
                Err(parse_err("family takes no parameter"))
            }
            (f, Some(p)) if FAMILIES.contains(&f) => {
                let value: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| parse_err("parameter is not a number"))?;
                PolicySpec::with_parameter(f, value)
            }
            (f, None) if FAMILIES.contains(&f) => Err(parse_err("missing parameter")),
            _ => Err(parse_err("unknown policy family")),
        }
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

/// When status updates occur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateTiming {
    None,
    /// All servers at `k / delta`, `k = 1, 2, ...`.
    GlobalDeterministic {
        delta: f64,
    },
    /// All servers at the points of a rate-`delta` Poisson process.
    GlobalExponential {
        delta: f64,
    },
    /// Each server every `1 / delta`, with an independent uniform phase.
    PerServerDeterministic {
        delta: f64,
    },
    /// Each server on its own rate-`delta` Poisson clock.
    PerServerExponential {
        delta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateTarget {
    All,
    Server(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    pub time: f64,
    pub target: UpdateTarget,
    /// Ordinal of this epoch for its clock (1-based).
    pub index: u64,
}

/// Generates update epochs for one simulation.
#[derive(Debug, Clone)]
pub struct UpdateClock {
    timing: UpdateTiming,
    phases: Vec<f64>,
}

impl UpdateClock {
    /// Draws per-server phases (deterministic asynchronous updates) and
    /// returns the clock with its first epochs.
    pub fn start<R: Rng>(
        timing: UpdateTiming,
        n_servers: usize,
        rng: &mut R,
    ) -> (Self, Vec<UpdateEvent>) {
        let mut clock = UpdateClock {
            timing,
            phases: Vec::new(),
        };
        let first = match timing {
            UpdateTiming::None => Vec::new(),
            UpdateTiming::GlobalDeterministic { delta } => vec![UpdateEvent {
                time: 1.0 / delta,
                target: UpdateTarget::All,
                index: 1,
            }],
            UpdateTiming::GlobalExponential { delta } => vec![UpdateEvent {
                time: Exp::new(delta).expect("positive rate").sample(rng),
                target: UpdateTarget::All,
                index: 1,
            }],
            UpdateTiming::PerServerDeterministic { delta } => {
                let period = 1.0 / delta;
                clock.phases = (0..n_servers)
                    .map(|_| rng.random::<f64>() * period)
                    .collect();
                clock
                    .phases
                    .iter()
                    .enumerate()
                    .map(|(s, &phase)| UpdateEvent {
                        time: phase,
                        target: UpdateTarget::Server(s),
                        index: 1,
                    })
                    .collect()
            }
            UpdateTiming::PerServerExponential { delta } => {
                let exp = Exp::new(delta).expect("positive rate");
                (0..n_servers)
                    .map(|s| UpdateEvent {
                        time: exp.sample(rng),
                        target: UpdateTarget::Server(s),
                        index: 1,
                    })
                    .collect()
            }
        };
        (clock, first)
    }

    /// The epoch following `ev` on the same clock.
    pub fn next<R: Rng>(&self, ev: &UpdateEvent, rng: &mut R) -> Option<UpdateEvent> {
        let index = ev.index + 1;
        let time = match self.timing {
            UpdateTiming::None => return None,
            UpdateTiming::GlobalDeterministic { delta } => index as f64 / delta,
            UpdateTiming::PerServerDeterministic { delta } => {
                let UpdateTarget::Server(s) = ev.target else {
                    return None;
                };
                self.phases[s] + (index - 1) as f64 / delta
            }
            UpdateTiming::GlobalExponential { delta }
            | UpdateTiming::PerServerExponential { delta } => {
                ev.time + Exp::new(delta).expect("positive rate").sample(rng)
            }
        };
        Some(UpdateEvent {
            time,
            target: ev.target,
            index,
        })
    }
}

/// All update epochs in `(0, horizon]`, sorted by time.
pub fn schedule_updates<R: Rng>(
    spec: &PolicySpec,
    n_servers: usize,
    horizon: f64,
    rng: &mut R,
) -> Vec<UpdateEvent> {
    let (clock, first) = UpdateClock::start(spec.update_timing(), n_servers, rng);
    let mut out = Vec::new();
    for mut ev in first {
        while ev.time <= horizon {
            out.push(ev);
            match clock.next(&ev, rng) {
                Some(next) => ev = next,
                None => break,
            }
        }
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    out
}

/// Servers bucketed by estimate, for O(1) uniform choice among the minimum.
#[derive(Debug, Clone, Default)]
struct EstimateIndex {
    levels: Vec<Vec<usize>>,
    pos: Vec<usize>,
    min: usize,
}

impl EstimateIndex {
    fn build(estimates: &[u32]) -> Self {
        let mut idx = EstimateIndex {
            levels: Vec::new(),
            pos: vec![0; estimates.len()],
            min: usize::MAX,
        };
        for (s, &e) in estimates.iter().enumerate() {
            idx.insert(s, e as usize);
        }
        idx
    }

    fn insert(&mut self, server: usize, level: usize) {
        if level >= self.levels.len() {
            self.levels.resize_with(level + 1, Vec::new);
        }
        self.pos[server] = self.levels[level].len();
        self.levels[level].push(server);
        self.min = self.min.min(level);
    }

    fn remove(&mut self, server: usize, level: usize) {
        let bucket = &mut self.levels[level];
        let at = self.pos[server];
        bucket.swap_remove(at);
        if let Some(&moved) = bucket.get(at) {
            self.pos[moved] = at;
        }
        if level == self.min {
            while self.min < self.levels.len() && self.levels[self.min].is_empty() {
                self.min += 1;
            }
        }
    }

    fn min_bucket(&self) -> &[usize] {
        &self.levels[self.min]
    }
}

/// Dispatcher-side state.
#[derive(Debug, Clone)]
pub struct DispatcherView {
    estimates: Vec<u32>,
    index: EstimateIndex,
    idle_tokens: Vec<usize>,
    rr_counter: u64,
}

impl DispatcherView {
    pub fn estimates(&self) -> &[u32] {
        &self.estimates
    }

    pub fn idle_tokens(&self) -> &[usize] {
        &self.idle_tokens
    }

    pub fn rr_counter(&self) -> u64 {
        self.rr_counter
    }

    /// Smallest queue estimate (hyper-scalable schemes).
    pub fn min_estimate(&self) -> Option<u32> {
        self.estimates.iter().copied().min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub server: usize,
    pub messages: u64,
}

/// A policy together with its dispatcher state.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    spec: PolicySpec,
    view: DispatcherView,
}

impl Dispatcher {
    /// Dispatcher for an empty system. JIQ starts with a token per server;
    /// sparsified JIQ starts with each token independently present with
    /// probability `p`.
    pub fn new<R: Rng>(spec: PolicySpec, n_servers: usize, token_rng: &mut R) -> Self {
        let idle_tokens = match spec {
            PolicySpec::Jiq => (0..n_servers).collect(),
            PolicySpec::JiqP { p } => (0..n_servers)
                .filter(|_| token_rng.random::<f64>() < p)
                .collect(),
            _ => Vec::new(),
        };
        let mut d = Self::with_estimates(spec, vec![0; n_servers]);
        d.view.idle_tokens = idle_tokens;
        d
    }

    /// Dispatcher with given initial estimates and no tokens.
    pub fn with_estimates(spec: PolicySpec, estimates: Vec<u32>) -> Self {
        let index = if spec.is_hyper_scalable() {
            EstimateIndex::build(&estimates)
        } else {
            EstimateIndex::default()
        };
        Self {
            spec,
            view: DispatcherView {
                estimates,
                index,
                idle_tokens: Vec::new(),
                rr_counter: 0,
            },
        }
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn view(&self) -> &DispatcherView {
        &self.view
    }

    pub fn n_servers(&self) -> usize {
        self.view.estimates.len()
    }

    /// Picks the server for one arriving job.
    pub fn dispatch<R: Rng>(&mut self, queues: &[u32], rng: &mut R) -> Dispatch {
        let n = self.n_servers();
        debug_assert!(n > 0 && queues.len() == n);
        match self.spec {
            PolicySpec::SujsqDet { .. }
            | PolicySpec::SujsqExp { .. }
            | PolicySpec::AujsqDet { .. }
            | PolicySpec::AujsqExp { .. }
            | PolicySpec::SujsqDetIdle { .. } => {
                let bucket = self.view.index.min_bucket();
                let server = bucket[rng.random_range(0..bucket.len())];
                Dispatch {
                    server,
                    messages: 0,
                }
            }
            PolicySpec::Jiq | PolicySpec::JiqP { .. } => {
                let server = if self.view.idle_tokens.is_empty() {
                    rng.random_range(0..n)
                } else {
                    let at = rng.random_range(0..self.view.idle_tokens.len());
                    self.view.idle_tokens.swap_remove(at)
                };
                Dispatch {
                    server,
                    messages: 0,
                }
            }
            PolicySpec::JsqD { d } => {
                let mut best = usize::MAX;
                let mut best_len = u32::MAX;
                let mut ties = 0u32;
                for s in index::sample(rng, n, d).into_iter() {
                    let len = queues[s];
                    if len < best_len {
                        best = s;
                        best_len = len;
                        ties = 1;
                    } else if len == best_len {
                        ties += 1;
                        if rng.random_range(0..ties) == 0 {
                            best = s;
                        }
                    }
                }
                Dispatch {
                    server: best,
                    messages: 2 * d as u64,
                }
            }
            PolicySpec::Random => Dispatch {
                server: rng.random_range(0..n),
                messages: 0,
            },
            PolicySpec::RoundRobin => {
                let server = (self.view.rr_counter % n as u64) as usize;
                self.view.rr_counter += 1;
                Dispatch {
                    server,
                    messages: 0,
                }
            }
        }
    }

    /// Records that a job was sent to `server`.
    pub fn on_assign(&mut self, server: usize) {
        if self.spec.is_hyper_scalable() {
            let e = self.view.estimates[server] as usize;
            self.view.index.remove(server, e);
            self.view.index.insert(server, e + 1);
            self.view.estimates[server] += 1;
        }
    }

    /// Processes a status update of `server` whose true length is
    /// `true_len`; returns the number of messages it cost.
    pub fn on_update(&mut self, server: usize, true_len: u32) -> u64 {
        match self.spec {
            PolicySpec::SujsqDetIdle { .. } => {
                if true_len == 0 {
                    self.set_estimate(server, 0);
                    1
                } else {
                    0
                }
            }
            s if s.is_hyper_scalable() => {
                self.set_estimate(server, true_len);
                1
            }
            _ => 0,
        }
    }

    /// Synchronous update of every server.
    pub fn on_global_update(&mut self, queues: &[u32]) -> u64 {
        queues
            .iter()
            .enumerate()
            .map(|(s, &len)| self.on_update(s, len))
            .sum()
    }

    /// Called when `server` has just become idle; returns messages sent.
    pub fn on_idle<R: Rng>(&mut self, server: usize, rng: &mut R) -> u64 {
        let send = match self.spec {
            PolicySpec::Jiq => true,
            PolicySpec::JiqP { p } => rng.random::<f64>() < p,
            _ => false,
        };
        if send {
            self.view.idle_tokens.push(server);
            1
        } else {
            0
        }
    }

    fn set_estimate(&mut self, server: usize, value: u32) {
        let old = self.view.estimates[server];
        if old != value {
            self.view.index.remove(server, old as usize);
            self.view.index.insert(server, value as usize);
            self.view.estimates[server] = value;
        }
    }
}
