//! Discrete-event simulator of the distributed system: renewal appearances,
//! dispatch on (stale) queue-length information, traveling delays, FCFS
//! single-server stations, and workload accounting.
//!
//! Event ordering at equal timestamps is appearance, then service completion,
//! then station arrival, with a final tie broken by event sequence number.
//! Processing appearances first means the dispatcher reads the left limit
//! `Q(t-)`: a service completing at the very instant a customer appears is
//! not yet visible to that customer.
//!
//! Workloads are tracked in service-requirement units: station `k` depletes
//! its stationed workload at rate `mu_k` while busy, and the en-route
//! workload `U` carries the total requirement of traveling customers.

use crate::policy::{
    self, OriginPerturbations, PerturbationScheme, QueueSnapshot, Ranking, ToleranceMode,
};
use crate::scenario::{
    validate_scenario, GeoMode, GeographicSpec, Origins, PolicyKind, RoutingPlan, ScenarioConfig,
    TieRule, Violation,
};
use crate::stochastics::{derive_stream, Sampler, StreamLabel, StreamPurpose, StreamRng};
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid scenario:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidScenario(Vec<Violation>),
    #[error("distribution error: {0}")]
    Dist(#[from] crate::stochastics::DistError),
    #[error("policy error: {0}")]
    Policy(#[from] crate::policy::PolicyError),
    #[error(
        "event budget exceeded at t = {time} (processed {processed} events, \
         queue counts {counts:?}); the scenario appears unstable"
    )]
    EventBudget { time: f64, processed: u64, counts: Vec<u64> },
    #[error("non-finite event time generated at t = {time} (customer {customer})")]
    NonFiniteTime { time: f64, customer: u64 },
    #[error("replication {index} failed: {source}")]
    Replication { index: u64, #[source] source: Box<EngineError> },
}

/// Per-replication statistics, time-averaged over `[burnin, horizon]`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct SampleStats {
    pub replication: u64,
    /// Time-weighted mean of the total customer count (MTCC contribution).
    pub mtcc: f64,
    /// Mean waiting time of customers that started service in the window.
    pub mean_wait: f64,
    /// Mean traveling delay of the same customers.
    pub mean_travel: f64,
    /// Mean time to service (travel + wait) of the same customers.
    pub mean_time_to_service: f64,
    /// Sup over the window of the max pairwise weighted queue difference.
    pub imbalance_sup: f64,
    /// Per-station busy-time fraction over the window.
    pub utilization: Vec<f64>,
    /// Fraction of window dispatches sent to a station farther than the
    /// nearest one (the emergent balancing fraction of geographic rules).
    pub diverted_fraction: f64,
    /// Customers counted in the wait/travel means.
    pub served: u64,
    /// Customers dispatched within the window.
    pub dispatched: u64,
    pub event_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Trajectory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_log: Option<EventLog>,
}

/// Sampled trajectory rows `(t, Q_1..Q_s, W_1..W_s, U)`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct Trajectory {
    pub dt: f64,
    pub rows: Vec<TrajectoryRow>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub counts: Vec<u64>,
    pub stationed: Vec<f64>,
    pub enroute: f64,
}

/// Replay log of processed events, for determinism checks and hand traces.
pub type EventLog = Vec<EventRecord>;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKindTag,
    pub station: u32,
    pub customer: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKindTag {
    Appear,
    Arrive,
    Complete,
}

// Event classes order simultaneous events: appearances first (so dispatch
// snapshots are left limits), then completions, then arrivals.
const CLASS_APPEAR: u8 = 0;
const CLASS_COMPLETE: u8 = 1;
const CLASS_ARRIVE: u8 = 2;

#[derive(Clone, Copy, Debug)]
struct Job {
    appear: f64,
    arrive: f64,
    req: f64,
    id: u64,
}

#[derive(Clone, Copy, Debug)]
enum EvKind {
    Appear,
    Arrive { station: u32, job: Job },
    Complete { station: u32 },
}

#[derive(Clone, Copy, Debug)]
struct Ev {
    time: f64,
    class: u8,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.class == other.class && self.seq == other.seq
    }
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest first
        other
            .time
            .partial_cmp(&self.time)
            .expect("event times are finite")
            .then(other.class.cmp(&self.class))
            .then(other.seq.cmp(&self.seq))
    }
}

struct StationRt {
    waiting: VecDeque<Job>,
    in_service: Option<Job>,
    /// Completion time of the in-service job (valid while busy).
    completion_time: f64,
    /// Total requirement waiting in queue (excluding in service).
    queued_req: f64,
    count: u64,
    arrivals: u64,
    departures: u64,
    busy_in_window: f64,
}

impl StationRt {
    fn new() -> Self {
        StationRt {
            waiting: VecDeque::with_capacity(64),
            in_service: None,
            completion_time: 0.0,
            queued_req: 0.0,
            count: 0,
            arrivals: 0,
            departures: 0,
            busy_in_window: 0.0,
        }
    }

    /// Stationed workload in requirement units at time `t`.
    #[inline]
    fn stationed_workload(&self, t: f64, mu_k: f64) -> f64 {
        let in_service = if self.in_service.is_some() {
            (self.completion_time - t).max(0.0) * mu_k
        } else {
            0.0
        };
        self.queued_req + in_service
    }
}

/// How service requirements are drawn.
enum ServiceMode {
    /// One shared stream indexed by customer; used whenever every station has
    /// the same requirement distribution, so the draw sequence is independent
    /// of the routing policy.
    Shared(Sampler),
    /// Per-station streams, drawn at dispatch from the chosen station's
    /// stream.
    PerStation(Vec<Sampler>),
}

enum OriginModel {
    Discrete {
        cum_prob: Vec<f64>,
        /// Literal delay matrix in minutes (already scaled by sqrt(n) when
        /// the config marked delays as primitive).
        delays: Vec<Vec<f64>>,
        min_delay: Vec<f64>,
    },
    Geographic(GeographicSpec),
}

enum PolicyKernel {
    Jsq,
    Proportional,
    RjsqUnaware {
        scheme: PerturbationScheme,
    },
    RjsqAware {
        scheme: PerturbationScheme,
        plan: RoutingPlan,
        probs: Vec<f64>,
    },
    ToleranceGeo {
        tau_bar: f64,
        mode: GeoMode,
        /// Border masses per station for the probabilistic mode.
        p_prime: Option<Vec<f64>>,
    },
}

/// Scenario resolved for simulation: capacities, literal delays, compiled
/// samplers and policy, shared across replications.
pub struct Resolved {
    pub cfg: ScenarioConfig,
    pub mus: Vec<f64>,
    pub mu_total: f64,
    pub lambda: f64,
    pub rho: f64,
    pub n: f64,
    interappearance: Sampler,
    service: ServiceMode,
    origins: OriginModel,
    policy: PolicyKernel,
}

impl Resolved {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, EngineError> {
        let violations = validate_scenario(cfg);
        if !violations.is_empty() {
            return Err(EngineError::InvalidScenario(violations));
        }
        let mus = cfg.station_rates();
        let mu_total: f64 = mus.iter().sum();
        let rho = cfg.rho().expect("validated");
        let lambda = cfg.appearance_rate().expect("validated");
        let n = cfg.heavy_traffic_n().expect("validated");

        let interappearance = cfg.traffic.interappearance_dist.compile()?;
        let all_same = cfg
            .stations
            .iter()
            .all(|s| s.service_dist == cfg.stations[0].service_dist);
        let service = if all_same {
            ServiceMode::Shared(cfg.stations[0].service_dist.compile()?)
        } else {
            ServiceMode::PerStation(
                cfg.stations
                    .iter()
                    .map(|s| s.service_dist.compile())
                    .collect::<Result<_, _>>()?,
            )
        };

        let origins = match &cfg.origins {
            Origins::Discrete { origins, scaled } => {
                let scale = if *scaled { n.sqrt() } else { 1.0 };
                let mut cum_prob = Vec::with_capacity(origins.len());
                let mut acc = 0.0;
                for o in origins {
                    acc += o.probability;
                    cum_prob.push(acc);
                }
                let delays: Vec<Vec<f64>> = origins
                    .iter()
                    .map(|o| o.delays.iter().map(|d| d * scale).collect())
                    .collect();
                let min_delay = delays
                    .iter()
                    .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
                    .collect();
                OriginModel::Discrete { cum_prob, delays, min_delay }
            }
            Origins::Geographic(geo) => OriginModel::Geographic(geo.clone()),
        };

        let policy = match &cfg.policy.kind {
            PolicyKind::Jsq => PolicyKernel::Jsq,
            PolicyKind::RandomProportional => PolicyKernel::Proportional,
            PolicyKind::RjsqUnaware { chi } => PolicyKernel::RjsqUnaware {
                scheme: PerturbationScheme::balanced(&mus, *chi)?,
            },
            PolicyKind::RjsqAware { chi, plan } => {
                let probs = match &cfg.origins {
                    Origins::Discrete { origins, .. } => {
                        origins.iter().map(|o| o.probability).collect()
                    }
                    Origins::Geographic(_) => unreachable!("validated"),
                };
                PolicyKernel::RjsqAware {
                    scheme: PerturbationScheme::balanced(&mus, *chi)?,
                    plan: plan.clone(),
                    probs,
                }
            }
            PolicyKind::ToleranceGeo { tau_bar, mode } => {
                let p_prime = match (mode, &cfg.origins) {
                    (GeoMode::Probabilistic { .. }, Origins::Geographic(geo)) => {
                        Some(crate::planning::border_masses(geo, *tau_bar, 1_000_000, cfg.seed))
                    }
                    _ => None,
                };
                PolicyKernel::ToleranceGeo { tau_bar: *tau_bar, mode: mode.clone(), p_prime }
            }
        };

        Ok(Resolved {
            cfg: cfg.clone(),
            mus,
            mu_total,
            lambda,
            rho,
            n,
            interappearance,
            service,
            origins,
            policy,
        })
    }
}

/// Observation hooks consumed by coupled reference pools. The default
/// implementations are no-ops and compile away in plain runs.
pub trait Observer {
    /// Called when customer `id` is dispatched at time `t`.
    #[inline]
    #[allow(unused_variables)]
    fn on_dispatch(&mut self, t: f64, id: u64, station: usize, delay: f64, min_delay: f64, req: f64) {}

    /// Called after all state changes of one event, with a view of the
    /// distributed system. Event times are nondecreasing.
    #[inline]
    #[allow(unused_variables)]
    fn on_event(&mut self, t: f64, view: &SystemView<'_>) {}
}

/// No-op observer for plain runs.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Read access to the distributed system state at (and shortly after) the
/// current event time; workloads may be evaluated at any `tau` up to the next
/// event because stations deplete linearly in between.
pub struct SystemView<'a> {
    stations: &'a [StationRt],
    mus: &'a [f64],
    enroute_req: f64,
}

impl SystemView<'_> {
    /// Total stationed workload in requirement units at time `tau`.
    pub fn stationed_workload(&self, tau: f64) -> f64 {
        self.stations
            .iter()
            .zip(self.mus)
            .map(|(st, mu)| st.stationed_workload(tau, *mu))
            .sum()
    }

    /// En-route workload in requirement units (constant between events).
    pub fn enroute_workload(&self) -> f64 {
        self.enroute_req
    }

    pub fn counts(&self) -> Vec<u64> {
        self.stations.iter().map(|s| s.count).collect()
    }
}

struct Streams {
    interappearance: StreamRng,
    service: Vec<StreamRng>,
    routing: StreamRng,
    origin: StreamRng,
    location: StreamRng,
}

impl Streams {
    fn new(seed: u64, replication: u64, s: usize, shared_service: bool) -> Self {
        let label = |purpose| StreamLabel { purpose, replication };
        let service_count = if shared_service { 1 } else { s };
        Streams {
            interappearance: derive_stream(seed, label(StreamPurpose::Interappearance)),
            service: (0..service_count)
                .map(|k| derive_stream(seed, label(StreamPurpose::Service(k as u32))))
                .collect(),
            routing: derive_stream(seed, label(StreamPurpose::RoutingUniform)),
            origin: derive_stream(seed, label(StreamPurpose::OriginDraw)),
            location: derive_stream(seed, label(StreamPurpose::LocationDraw)),
        }
    }
}

/// Runs one replication and returns its statistics.
pub fn run(cfg: &ScenarioConfig, replication: u64) -> Result<SampleStats, EngineError> {
    let resolved = Resolved::new(cfg)?;
    run_resolved(&resolved, replication, &mut NoObserver)
}

/// Runs one replication against a pre-resolved scenario with an observer.
pub fn run_resolved(
    res: &Resolved,
    replication: u64,
    observer: &mut impl Observer,
) -> Result<SampleStats, EngineError> {
    Simulation::new(res, replication).run(observer)
}

/// Runs `count` replications (fan-out across `parallelism` worker threads;
/// 0 means all available cores). Results are ordered by replication index
/// regardless of scheduling.
pub fn run_replications(
    cfg: &ScenarioConfig,
    count: u64,
    parallelism: usize,
) -> Result<Vec<SampleStats>, EngineError> {
    let resolved = Arc::new(Resolved::new(cfg)?);
    run_replications_resolved(resolved, count, parallelism)
}

/// Fan-out over an already-resolved scenario.
pub fn run_replications_resolved(
    resolved: Arc<Resolved>,
    count: u64,
    parallelism: usize,
) -> Result<Vec<SampleStats>, EngineError> {
    use rayon::prelude::*;

    let body = |r: u64| {
        run_resolved(&resolved, r, &mut NoObserver)
            .map_err(|e| EngineError::Replication { index: r, source: Box::new(e) })
    };
    if parallelism == 1 {
        return (0..count).map(body).collect();
    }
    let run_all = || (0..count).into_par_iter().map(body).collect();
    if parallelism == 0 {
        run_all()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(run_all)
    }
}

struct Simulation<'a> {
    res: &'a Resolved,
    replication: u64,
    streams: Streams,
    heap: BinaryHeap<Ev>,
    stations: Vec<StationRt>,
    clock: f64,
    seq: u64,
    next_customer: u64,
    enroute_req: f64,
    enroute_count: u64,
    // window accumulators
    burnin: f64,
    horizon: f64,
    count_integral: f64,
    total_count: u64,
    imbalance_sup: f64,
    wait_sum: f64,
    travel_sum: f64,
    tts_sum: f64,
    served: u64,
    dispatched_window: u64,
    diverted_window: u64,
    events: u64,
    max_events: u64,
    // scratch
    weighted: Vec<f64>,
    delay_scratch: Vec<f64>,
    aware_cache: HashMap<Vec<u8>, OriginPerturbations>,
    // optional outputs
    trajectory: Option<Trajectory>,
    next_sample: f64,
    event_log: Option<EventLog>,
}

impl<'a> Simulation<'a> {
    fn new(res: &'a Resolved, replication: u64) -> Self {
        let s = res.mus.len();
        let shared = matches!(res.service, ServiceMode::Shared(_));
        let horizon = res.cfg.horizon_min;
        // Budget: generous multiple of the expected event count.
        let expected = res.lambda * horizon * 3.0 + 1e6;
        let trajectory = res
            .cfg
            .sample_dt
            .map(|dt| Trajectory { dt, rows: Vec::with_capacity((horizon / dt) as usize + 2) });
        Simulation {
            res,
            replication,
            streams: Streams::new(res.cfg.seed, replication, s, shared),
            heap: BinaryHeap::with_capacity(1024),
            stations: (0..s).map(|_| StationRt::new()).collect(),
            clock: 0.0,
            seq: 0,
            next_customer: 0,
            enroute_req: 0.0,
            enroute_count: 0,
            burnin: res.cfg.burnin_min,
            horizon,
            count_integral: 0.0,
            total_count: 0,
            imbalance_sup: 0.0,
            wait_sum: 0.0,
            travel_sum: 0.0,
            tts_sum: 0.0,
            served: 0,
            dispatched_window: 0,
            diverted_window: 0,
            events: 0,
            max_events: (expected * 8.0) as u64,
            weighted: vec![0.0; s],
            delay_scratch: vec![0.0; s],
            aware_cache: HashMap::new(),
            trajectory,
            next_sample: 0.0,
            event_log: None,
        }
    }

    #[inline]
    fn push(&mut self, time: f64, class: u8, kind: EvKind) -> Result<(), EngineError> {
        if !time.is_finite() {
            return Err(EngineError::NonFiniteTime { time, customer: self.next_customer });
        }
        self.seq += 1;
        self.heap.push(Ev { time, class, seq: self.seq, kind });
        Ok(())
    }

    /// Advances window statistics over `[self.clock, t)`; the current state
    /// has prevailed on that interval.
    #[inline]
    fn advance_to(&mut self, t: f64) {
        if let Some(traj) = self.trajectory.as_mut() {
            while self.next_sample < t && self.next_sample <= self.horizon {
                let tau = self.next_sample;
                let mut stationed = Vec::with_capacity(self.stations.len());
                for (st, mu) in self.stations.iter().zip(&self.res.mus) {
                    stationed.push(st.stationed_workload(tau, *mu));
                }
                traj.rows.push(TrajectoryRow {
                    t: tau,
                    counts: self.stations.iter().map(|s| s.count).collect(),
                    stationed,
                    enroute: self.enroute_req,
                });
                self.next_sample += traj.dt;
            }
        }
        let lo = self.clock.max(self.burnin);
        let hi = t.min(self.horizon);
        if hi > lo {
            let span = hi - lo;
            self.count_integral += span * self.total_count as f64;
            let mut min_l = f64::INFINITY;
            let mut max_l = f64::NEG_INFINITY;
            for (st, mu) in self.stations.iter().zip(&self.res.mus) {
                let l = st.count as f64 / mu;
                min_l = min_l.min(l);
                max_l = max_l.max(l);
            }
            if max_l - min_l > self.imbalance_sup {
                self.imbalance_sup = max_l - min_l;
            }
            for st in self.stations.iter_mut() {
                if st.in_service.is_some() {
                    st.busy_in_window += span;
                }
            }
        }
    }

    #[inline]
    fn record_service_start(&mut self, t: f64, job: &Job) {
        if t >= self.burnin && t < self.horizon {
            self.wait_sum += t - job.arrive;
            self.travel_sum += job.arrive - job.appear;
            self.tts_sum += t - job.appear;
            self.served += 1;
        }
    }

    #[inline]
    fn log_event(&mut self, time: f64, kind: EventKindTag, station: u32, customer: u64) {
        if let Some(log) = self.event_log.as_mut() {
            log.push(EventRecord { time, kind, station, customer });
        }
    }

    fn draw_requirement(&mut self, station: usize) -> f64 {
        match &self.res.service {
            ServiceMode::Shared(sampler) => sampler.sample(&mut self.streams.service[0]),
            ServiceMode::PerStation(samplers) => {
                samplers[station].sample(&mut self.streams.service[station])
            }
        }
    }

    /// Picks the destination for an appearing customer; returns the station,
    /// its traveling delay, and the customer's minimum delay.
    fn dispatch(&mut self) -> Result<(usize, f64, f64), EngineError> {
        use rand::Rng;

        // left-limit snapshot: appearances are processed before same-instant
        // completions and arrivals
        for (k, st) in self.stations.iter().enumerate() {
            self.weighted[k] = st.count as f64 / self.res.mus[k];
        }

        // resolve origin
        enum Where {
            Discrete(usize),
            Point([f64; 2]),
        }
        let origin = match &self.res.origins {
            OriginModel::Discrete { cum_prob, .. } => {
                let m = if cum_prob.len() == 1 {
                    0
                } else {
                    let u: f64 = self.streams.origin.random();
                    cum_prob.partition_point(|c| *c <= u).min(cum_prob.len() - 1)
                };
                Where::Discrete(m)
            }
            OriginModel::Geographic(geo) => {
                let ux: f64 = self.streams.location.random();
                let uy: f64 = self.streams.location.random();
                let p = [
                    geo.min[0] + ux * geo.width(),
                    geo.min[1] + uy * geo.height(),
                ];
                geo.delays_at(p, &mut self.delay_scratch);
                Where::Point(p)
            }
        };

        let tie_rule = self.res.cfg.policy.tie_rule;
        let snapshot = QueueSnapshot {
            counts: Vec::new(), // counts are not consulted by the kernels
            weighted: std::mem::take(&mut self.weighted),
        };
        let station = match &self.res.policy {
            PolicyKernel::Jsq => policy::destination_jsq(&snapshot, tie_rule, &mut self.streams.routing),
            PolicyKernel::Proportional => {
                let u: f64 = self.streams.routing.random();
                let mut acc = 0.0;
                let mut pick = self.res.mus.len() - 1;
                for (k, mu) in self.res.mus.iter().enumerate() {
                    acc += mu / self.res.mu_total;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
            PolicyKernel::RjsqUnaware { scheme } => {
                let ranking = policy::rank(&snapshot, tie_rule, &mut self.streams.routing);
                let u: f64 = self.streams.routing.random();
                policy::destination_unaware(u, &ranking, &self.res.mus, scheme)
            }
            PolicyKernel::RjsqAware { scheme, plan, probs } => {
                let m = match origin {
                    Where::Discrete(m) => m,
                    Where::Point(_) => unreachable!("validated"),
                };
                let ranking = policy::rank(&snapshot, tie_rule, &mut self.streams.routing);
                let key: Vec<u8> = ranking.by_rank.iter().map(|&k| k as u8).collect();
                if !self.aware_cache.contains_key(&key) {
                    let eps = policy::origin_perturbations(&ranking, plan, probs, scheme)?;
                    self.aware_cache.insert(key.clone(), eps);
                }
                let eps_m = &self.aware_cache[&key][m];
                let u: f64 = self.streams.routing.random();
                policy::destination_aware(u, &ranking, m, plan, eps_m)
            }
            PolicyKernel::ToleranceGeo { tau_bar, mode, p_prime } => {
                let delays = &self.delay_scratch;
                let tol_mode = match (mode, p_prime) {
                    (GeoMode::Deterministic, _) => ToleranceMode::Deterministic,
                    (GeoMode::Probabilistic { chi }, Some(pp)) => {
                        ToleranceMode::Probabilistic { chi: *chi, p_prime: pp }
                    }
                    (GeoMode::Probabilistic { chi }, None) => {
                        ToleranceMode::Probabilistic { chi: *chi, p_prime: &[] }
                    }
                };
                policy::destination_tolerance_geo(
                    delays,
                    &snapshot,
                    *tau_bar,
                    tol_mode,
                    tie_rule,
                    &mut self.streams.routing,
                )
            }
        };
        self.weighted = snapshot.weighted;

        let (delay, min_delay) = match (&origin, &self.res.origins) {
            (Where::Discrete(m), OriginModel::Discrete { delays, min_delay, .. }) => {
                (delays[*m][station], min_delay[*m])
            }
            (Where::Point(_), OriginModel::Geographic(_)) => {
                let d = self.delay_scratch[station];
                let dmin = self
                    .delay_scratch
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                (d, dmin)
            }
            _ => unreachable!(),
        };
        Ok((station, delay, min_delay))
    }

    fn run(mut self, observer: &mut impl Observer) -> Result<SampleStats, EngineError> {
        if self.res.cfg.event_log {
            self.event_log = Some(Vec::new());
        }

        let first = self.interappearance_gap();
        self.push(first, CLASS_APPEAR, EvKind::Appear)?;

        while let Some(ev) = self.heap.pop() {
            if ev.time > self.horizon {
                break;
            }
            self.advance_to(ev.time);
            self.clock = ev.time;
            self.events += 1;
            if self.events > self.max_events {
                return Err(EngineError::EventBudget {
                    time: self.clock,
                    processed: self.events,
                    counts: self.stations.iter().map(|s| s.count).collect(),
                });
            }

            match ev.kind {
                EvKind::Appear => {
                    let id = self.next_customer;
                    self.next_customer += 1;
                    let (station, delay, min_delay) = self.dispatch()?;
                    let req = self.draw_requirement(station);
                    let job = Job { appear: ev.time, arrive: ev.time + delay, req, id };
                    self.enroute_req += req;
                    self.enroute_count += 1;
                    if ev.time >= self.burnin && ev.time < self.horizon {
                        self.dispatched_window += 1;
                        if delay > min_delay + 1e-12 {
                            self.diverted_window += 1;
                        }
                    }
                    self.log_event(ev.time, EventKindTag::Appear, station as u32, id);
                    observer.on_dispatch(ev.time, id, station, delay, min_delay, req);
                    self.push(job.arrive, CLASS_ARRIVE, EvKind::Arrive { station: station as u32, job })?;
                    let gap = self.interappearance_gap();
                    self.push(ev.time + gap, CLASS_APPEAR, EvKind::Appear)?;
                }
                EvKind::Arrive { station, job } => {
                    let mu_k = self.res.mus[station as usize];
                    self.enroute_req -= job.req;
                    self.enroute_count -= 1;
                    self.total_count += 1;
                    let st = &mut self.stations[station as usize];
                    st.arrivals += 1;
                    st.count += 1;
                    if st.in_service.is_none() {
                        st.in_service = Some(job);
                        st.completion_time = ev.time + job.req / mu_k;
                        let completion = st.completion_time;
                        self.record_service_start(ev.time, &job);
                        self.push(completion, CLASS_COMPLETE, EvKind::Complete { station })?;
                    } else {
                        st.queued_req += job.req;
                        st.waiting.push_back(job);
                    }
                    self.log_event(ev.time, EventKindTag::Arrive, station, job.id);
                }
                EvKind::Complete { station } => {
                    let mu_k = self.res.mus[station as usize];
                    let st = &mut self.stations[station as usize];
                    let done = st.in_service.take().expect("completion implies busy");
                    st.count -= 1;
                    st.departures += 1;
                    self.total_count -= 1;
                    if let Some(next) = st.waiting.pop_front() {
                        st.queued_req -= next.req;
                        if st.waiting.is_empty() {
                            st.queued_req = 0.0;
                        }
                        st.in_service = Some(next);
                        st.completion_time = ev.time + next.req / mu_k;
                        let completion = st.completion_time;
                        self.record_service_start(ev.time, &next);
                        self.push(completion, CLASS_COMPLETE, EvKind::Complete { station })?;
                    }
                    self.log_event(ev.time, EventKindTag::Complete, station, done.id);
                }
            }

            let view = SystemView {
                stations: &self.stations,
                mus: &self.res.mus,
                enroute_req: self.enroute_req,
            };
            observer.on_event(ev.time, &view);
        }

        self.advance_to(self.horizon);
        self.clock = self.horizon;
        let view = SystemView {
            stations: &self.stations,
            mus: &self.res.mus,
            enroute_req: self.enroute_req,
        };
        observer.on_event(self.horizon, &view);

        // flow balance: every dispatched customer is en route, in a station,
        // or departed
        let in_stations: u64 = self.stations.iter().map(|s| s.count).sum();
        let departed: u64 = self.stations.iter().map(|s| s.departures).sum();
        debug_assert_eq!(self.next_customer, self.enroute_count + in_stations + departed);

        let window = self.horizon - self.burnin;
        let served_f = self.served.max(1) as f64;
        Ok(SampleStats {
            replication: self.replication,
            mtcc: self.count_integral / window,
            mean_wait: self.wait_sum / served_f,
            mean_travel: self.travel_sum / served_f,
            mean_time_to_service: self.tts_sum / served_f,
            imbalance_sup: self.imbalance_sup,
            utilization: self
                .stations
                .iter()
                .map(|s| s.busy_in_window / window)
                .collect(),
            diverted_fraction: if self.dispatched_window > 0 {
                self.diverted_window as f64 / self.dispatched_window as f64
            } else {
                0.0
            },
            served: self.served,
            dispatched: self.dispatched_window,
            event_count: self.events,
            trajectory: self.trajectory,
            event_log: self.event_log,
        })
    }

    #[inline]
    fn interappearance_gap(&mut self) -> f64 {
        self.res.interappearance.sample(&mut self.streams.interappearance) / self.res.lambda
    }
}
