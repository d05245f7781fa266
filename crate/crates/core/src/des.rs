//! Event-driven simulation of `N` single-server FCFS queues behind one
//! dispatcher.
//!
//! Jobs arrive as a Poisson process of rate `lambda * N`, services are
//! unit-mean exponential, and dispatching, estimate bookkeeping and status
//! updates are delegated to [`crate::policy`]. Statistics cover the
//! post-warmup window only.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CountMatrix, ModelParams, SERVICE_RATE};
use crate::policy::{Dispatcher, PolicySpec, UpdateClock, UpdateEvent, UpdateTarget};
use crate::rng::{replication_seed, stream, SimRng, Stream};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub params: ModelParams,
    pub policy: PolicySpec,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    /// Sampling step of fluid-scaled snapshots, if wanted.
    pub trajectory_grid: Option<f64>,
}

impl SimConfig {
    /// Config with the default warmup of 20% of the horizon.
    pub fn new(params: ModelParams, policy: PolicySpec, horizon: f64, seed: u64) -> Self {
        Self {
            params,
            policy,
            horizon,
            warmup: 0.2 * horizon,
            seed,
            trajectory_grid: None,
        }
    }

    pub fn with_warmup(mut self, warmup: f64) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn with_trajectory(mut self, grid: f64) -> Self {
        self.trajectory_grid = Some(grid);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate(self.params.n_servers())?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::params(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(Error::params(format!(
                "warmup must lie in [0, horizon), got {}",
                self.warmup
            )));
        }
        if let Some(g) = self.trajectory_grid {
            if !(g > 0.0) {
                return Err(Error::params("trajectory grid must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Mean time from arrival to service start.
    pub mean_wait: f64,
    pub msgs_per_job: f64,
    /// Time-averaged queue length per server.
    pub mean_queue_per_server: f64,
    /// Time-averaged fraction of servers with each queue length.
    pub queue_len_hist: Vec<f64>,
    /// Fraction of arrivals that found their server busy.
    pub frac_delayed: f64,
    pub arrivals: u64,
    pub messages: u64,
    /// Largest queue length seen after warmup.
    pub max_queue: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
}

impl MetricsRecord {
    /// Time-averaged fraction of servers with more than `k` jobs.
    pub fn frac_above(&self, k: usize) -> f64 {
        self.queue_len_hist
            .iter()
            .skip(k + 1)
            .fold(0.0, |acc, p| acc + p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Departure(usize),
    Update(UpdateTarget),
    Arrival,
}

impl Kind {
    fn rank(self) -> u8 {
        match self {
            Kind::Departure(_) => 0,
            Kind::Update(_) => 1,
            Kind::Arrival => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
    index: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so that the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Fluid-scaled occupancy of the current server states. Policies without
/// estimates report the true length as the estimate.
pub fn sample_trajectory(queues: &[u32], estimates: Option<&[u32]>) -> Result<CountMatrix> {
    CountMatrix::from_servers(queues, estimates.unwrap_or(queues))
}

struct Sim {
    cfg: SimConfig,
    n: usize,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    queues: Vec<u32>,
    fifo: Vec<VecDeque<f64>>,
    dispatcher: Dispatcher,
    clock: UpdateClock,
    arrivals_rng: SimRng,
    services_rng: SimRng,
    dispatch_rng: SimRng,
    updates_rng: SimRng,
    tokens_rng: SimRng,
    arrival_dist: Exp<f64>,
    service_dist: Exp<f64>,
    // statistics
    arrivals: u64,
    waits: u64,
    wait_sum: f64,
    delayed: u64,
    messages: u64,
    max_queue: u32,
    level_count: Vec<u64>,
    level_area: Vec<f64>,
    level_touch: Vec<f64>,
    trajectory: Trajectory,
    next_grid: u64,
}

impl Sim {
    fn new(cfg: SimConfig) -> Self {
        let n = cfg.params.n_servers();
        let mut tokens_rng = stream(cfg.seed, Stream::Tokens);
        let mut updates_rng = stream(cfg.seed, Stream::Updates);
        let dispatcher = Dispatcher::new(cfg.policy, n, &mut tokens_rng);
        let (clock, first) = UpdateClock::start(cfg.policy.update_timing(), n, &mut updates_rng);
        let mut sim = Sim {
            cfg,
            n,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            queues: vec![0; n],
            fifo: vec![VecDeque::new(); n],
            dispatcher,
            clock,
            arrivals_rng: stream(cfg.seed, Stream::Arrivals),
            services_rng: stream(cfg.seed, Stream::Services),
            dispatch_rng: stream(cfg.seed, Stream::Dispatch),
            updates_rng,
            tokens_rng,
            arrival_dist: Exp::new(cfg.params.lambda() * n as f64).expect("positive rate"),
            service_dist: Exp::new(SERVICE_RATE).expect("positive rate"),
            arrivals: 0,
            waits: 0,
            wait_sum: 0.0,
            delayed: 0,
            messages: 0,
            max_queue: 0,
            level_count: vec![n as u64],
            level_area: vec![0.0],
            level_touch: vec![0.0],
            trajectory: Trajectory::default(),
            next_grid: 0,
        };
        for ev in first {
            sim.push_update(ev);
        }
        let t = sim.arrival_dist.sample(&mut sim.arrivals_rng);
        sim.push(t, Kind::Arrival, 0);
        sim
    }

    fn push(&mut self, time: f64, kind: Kind, index: u64) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
            index,
        });
    }

    fn push_update(&mut self, ev: UpdateEvent) {
        self.push(ev.time, Kind::Update(ev.target), ev.index);
    }

    fn post_warmup(&self) -> bool {
        self.now >= self.cfg.warmup
    }

    fn touch(&mut self, level: usize) {
        let from = self.level_touch[level].max(self.cfg.warmup);
        if self.now > from {
            self.level_area[level] += self.level_count[level] as f64 * (self.now - from);
        }
        self.level_touch[level] = self.now;
    }

    fn set_queue(&mut self, server: usize, len: u32) {
        let old = self.queues[server] as usize;
        let new = len as usize;
        if new >= self.level_count.len() {
            self.level_count.resize(new + 1, 0);
            self.level_area.resize(new + 1, 0.0);
            self.level_touch.resize(new + 1, self.now);
        }
        self.touch(old);
        self.touch(new);
        self.level_count[old] -= 1;
        self.level_count[new] += 1;
        self.queues[server] = len;
        if self.post_warmup() {
            self.max_queue = self.max_queue.max(len);
        }
    }

    fn start_service(&mut self, server: usize) {
        let arrived = *self.fifo[server].front().expect("queued job");
        if arrived >= self.cfg.warmup {
            self.waits += 1;
            self.wait_sum += self.now - arrived;
        }
        let t = self.now + self.service_dist.sample(&mut self.services_rng);
        self.push(t, Kind::Departure(server), 0);
    }

    fn sample_until(&mut self, t: f64) {
        let Some(grid) = self.cfg.trajectory_grid else {
            return;
        };
        loop {
            let g = self.next_grid as f64 * grid;
            if g >= t || g > self.cfg.horizon + 1e-9 {
                break;
            }
            let estimates = self
                .cfg
                .policy
                .is_hyper_scalable()
                .then(|| self.dispatcher.view().estimates());
            let counts = sample_trajectory(&self.queues, estimates).expect("consistent state");
            self.trajectory.push(g, counts.to_fluid(0));
            self.next_grid += 1;
        }
    }

    fn arrival(&mut self) {
        let out = self
            .dispatcher
            .dispatch(&self.queues, &mut self.dispatch_rng);
        self.dispatcher.on_assign(out.server);
        let s = out.server;
        let post = self.post_warmup();
        if post {
            self.arrivals += 1;
            self.messages += out.messages;
            if self.queues[s] > 0 {
                self.delayed += 1;
            }
        }
        self.fifo[s].push_back(self.now);
        self.set_queue(s, self.queues[s] + 1);
        if self.queues[s] == 1 {
            self.start_service(s);
        }
        let t = self.now + self.arrival_dist.sample(&mut self.arrivals_rng);
        self.push(t, Kind::Arrival, 0);
    }

    fn departure(&mut self, s: usize) {
        let arrived = self.fifo[s].pop_front().expect("busy server");
        self.set_queue(s, self.queues[s] - 1);
        if self.queues[s] > 0 {
            self.start_service(s);
        } else {
            let msgs = self.dispatcher.on_idle(s, &mut self.tokens_rng);
            if arrived >= self.cfg.warmup {
                self.messages += msgs;
            }
        }
    }

    fn update(&mut self, target: UpdateTarget, index: u64) {
        let msgs = match target {
            UpdateTarget::All => self.dispatcher.on_global_update(&self.queues),
            UpdateTarget::Server(s) => self.dispatcher.on_update(s, self.queues[s]),
        };
        if self.post_warmup() {
            self.messages += msgs;
        }
        let ev = UpdateEvent {
            time: self.now,
            target,
            index,
        };
        if let Some(next) = self.clock.next(&ev, &mut self.updates_rng) {
            self.push_update(next);
        }
    }

    fn run(mut self) -> Result<MetricsRecord> {
        while let Some(ev) = self.heap.pop() {
            if ev.time > self.cfg.horizon {
                break;
            }
            self.sample_until(ev.time);
            self.now = ev.time;
            match ev.kind {
                Kind::Arrival => self.arrival(),
                Kind::Departure(s) => self.departure(s),
                Kind::Update(target) => self.update(target, ev.index),
            }
        }
        self.sample_until(f64::INFINITY);
        self.now = self.cfg.horizon;
        for level in 0..self.level_count.len() {
            self.touch(level);
        }
        if self.arrivals == 0 || self.waits == 0 {
            return Err(Error::NoPostWarmupArrivals {
                warmup: self.cfg.warmup,
                horizon: self.cfg.horizon,
            });
        }
        let norm = self.n as f64 * (self.cfg.horizon - self.cfg.warmup);
        let hist: Vec<f64> = self.level_area.iter().map(|a| a / norm).collect();
        let mean_queue = hist.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        Ok(MetricsRecord {
            mean_wait: self.wait_sum / self.waits as f64,
            msgs_per_job: self.messages as f64 / self.arrivals as f64,
            mean_queue_per_server: mean_queue,
            queue_len_hist: hist,
            frac_delayed: self.delayed as f64 / self.arrivals as f64,
            arrivals: self.arrivals,
            messages: self.messages,
            max_queue: self.max_queue,
            trajectory: self.cfg.trajectory_grid.map(|_| self.trajectory),
        })
    }
}

/// Simulates one replication.
pub fn run(config: &SimConfig) -> Result<MetricsRecord> {
    config.validate()?;
    Sim::new(*config).run()
}

/// Seed of replication `run`; replication 0 reuses the master seed.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    if run == 0 {
        seed
    } else {
        replication_seed(seed, run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replications {
    /// Across-run means; the trajectory is the pointwise mean.
    pub mean: MetricsRecord,
    /// 95% normal-approximation half-widths over per-run values.
    pub ci_mean_wait: f64,
    pub ci_msgs_per_job: f64,
    pub ci_mean_queue: f64,
    pub runs: Vec<MetricsRecord>,
}

/// `1.96 * sd / sqrt(n)` of `xs`.
pub fn ci_halfwidth(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Runs independent replications in parallel and aggregates them.
pub fn run_replications(config: &SimConfig, runs: usize) -> Result<Replications> {
    if runs == 0 {
        return Err(Error::params("runs must be at least 1"));
    }
    config.validate()?;
    let records = (0..runs)
        .into_par_iter()
        .map(|r| run(&config.with_seed(run_seed(config.seed, r))))
        .collect::<Result<Vec<_>>>()?;
    aggregate(records)
}

fn aggregate(runs: Vec<MetricsRecord>) -> Result<Replications> {
    let k = runs.len() as f64;
    let pick = |f: fn(&MetricsRecord) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    let mean_of = |xs: &[f64]| xs.iter().sum::<f64>() / k;
    let waits = pick(|r| r.mean_wait);
    let msgs = pick(|r| r.msgs_per_job);
    let queues = pick(|r| r.mean_queue_per_server);
    let len = runs
        .iter()
        .map(|r| r.queue_len_hist.len())
        .max()
        .unwrap_or(0);
    let mut hist = vec![0.0; len];
    for r in &runs {
        for (h, p) in hist.iter_mut().zip(&r.queue_len_hist) {
            *h += p / k;
        }
    }
    let trajectory = if runs.iter().all(|r| r.trajectory.is_some()) {
        let trs: Vec<Trajectory> = runs.iter().filter_map(|r| r.trajectory.clone()).collect();
        Some(Trajectory::mean(&trs)?)
    } else {
        None
    };
    let mean = MetricsRecord {
        mean_wait: mean_of(&waits),
        msgs_per_job: mean_of(&msgs),
        mean_queue_per_server: mean_of(&queues),
        queue_len_hist: hist,
        frac_delayed: mean_of(&pick(|r| r.frac_delayed)),
        arrivals: runs.iter().map(|r| r.arrivals).sum(),
        messages: runs.iter().map(|r| r.messages).sum(),
        max_queue: runs.iter().map(|r| r.max_queue).max().unwrap_or(0),
        trajectory,
    };
    Ok(Replications {
        mean,
        ci_mean_wait: ci_halfwidth(&waits),
        ci_msgs_per_job: ci_halfwidth(&msgs),
        ci_mean_queue: ci_halfwidth(&queues),
        runs,
    })
}
