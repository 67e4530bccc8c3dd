//! Coupled reference single-server pools run in lockstep with the
//! distributed system on shared random draws, and the workload-gap processes
//! they induce.
//!
//! The synchronized pool receives every customer at the same instant it
//! arrives at its station in the distributed system; the minimum-delay pool
//! receives each customer after its smallest possible traveling delay. Both
//! serve at the aggregate rate. Workloads are in requirement units, so the
//! gaps are piecewise linear with kinks only where a server's busy state
//! flips; sampling the gap at every event epoch of either system is exact.

use crate::engine::{self, EngineError, Observer, Resolved, SampleStats, SystemView};
use crate::scenario::ScenarioConfig;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

#[derive(Debug, thiserror::Error)]
pub enum CouplingError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("pool service rate {given} does not match the aggregate capacity {aggregate}")]
    RateMismatch { given: f64, aggregate: f64 },
    #[error(
        "the minimum-delay pool requires station-independent service \
         requirements (all stations sharing one distribution)"
    )]
    StationDependentService,
    #[error("no gap trajectory was recorded; rerun with record_trajectory")]
    NoTrajectory,
}

/// Which reference pool to couple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Synchronized service pool: identical station-arrival instants.
    Ssp,
    /// Minimum-delay service pool: every customer gets its smallest delay.
    Mdsp,
}

/// Reference pool parameters. The service rate must equal the aggregate
/// capacity of the distributed system.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub service_rate: f64,
}

impl PoolSpec {
    pub fn ssp(service_rate: f64) -> Self {
        PoolSpec { kind: PoolKind::Ssp, service_rate }
    }

    pub fn mdsp(service_rate: f64) -> Self {
        PoolSpec { kind: PoolKind::Mdsp, service_rate }
    }
}

/// Gap statistics of one coupled replication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GapStats {
    /// Minimum of the gap over the whole horizon (pathwise lower-bound check).
    pub min: f64,
    /// Supremum of the gap over `[burnin, horizon]`.
    pub sup: f64,
    /// `sup / sqrt(n)`.
    pub sup_scaled: f64,
    pub samples: u64,
}

/// Paired trajectories of the distributed system and a reference pool.
#[derive(Clone, Debug, Serialize)]
pub struct CoupledRun {
    pub pool: PoolKind,
    pub stats: SampleStats,
    pub gap: GapStats,
    /// Heavy-traffic index of the scenario (for scaling).
    pub n: f64,
    /// Pool arrivals in dispatch order, hashed as (time bits, requirement
    /// bits); equal hashes mean bit-identical pool inputs and therefore
    /// bit-identical pool workload paths.
    pub pool_input_hash: u64,
    pub pool_arrivals: u64,
    /// Gap samples `(t, gamma)` at event epochs, when recorded.
    pub trajectory: Option<Vec<(f64, f64)>>,
}

/// Supremum of the recorded gap over an arbitrary window, with its
/// diffusion-scaled value. Requires a recorded trajectory.
pub fn gap_supremum(run: &CoupledRun, window: (f64, f64)) -> Result<(f64, f64), CouplingError> {
    let traj = run.trajectory.as_ref().ok_or(CouplingError::NoTrajectory)?;
    let sup = traj
        .iter()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .map(|(_, g)| *g)
        .fold(0.0_f64, f64::max);
    Ok((sup, sup / run.n.sqrt()))
}

#[derive(Clone, Copy, Debug)]
struct PendingArrival {
    time: f64,
    seq: u64,
    req: f64,
}

impl PartialEq for PendingArrival {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for PendingArrival {}

impl PartialOrd for PendingArrival {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PendingArrival {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on (time, seq)
        other
            .time
            .partial_cmp(&self.time)
            .expect("finite arrival times")
            .then(other.seq.cmp(&self.seq))
    }
}

/// Single-server pool with workload in requirement units.
struct Pool {
    mu: f64,
    /// Stationed workload.
    v: f64,
    /// En-route workload (dispatched, not yet arrived).
    u: f64,
    clock: f64,
    pending: BinaryHeap<PendingArrival>,
    seq: u64,
}

impl Pool {
    fn new(mu: f64) -> Self {
        Pool { mu, v: 0.0, u: 0.0, clock: 0.0, pending: BinaryHeap::new(), seq: 0 }
    }

    fn dispatch(&mut self, arrival_time: f64, req: f64) {
        self.u += req;
        self.seq += 1;
        self.pending.push(PendingArrival { time: arrival_time, seq: self.seq, req });
    }

    /// Advances the pool to `to`, invoking `kink(tau, v, u)` at every busy
    /// state change (drain instants and arrivals into an idle pool).
    fn advance(&mut self, to: f64, mut kink: impl FnMut(f64, f64, f64)) {
        while let Some(next) = self.pending.peek().copied() {
            if next.time > to {
                break;
            }
            self.deplete(next.time, &mut kink);
            self.pending.pop();
            let was_idle = self.v == 0.0;
            self.u -= next.req;
            self.v += next.req;
            if was_idle {
                kink(next.time, self.v, self.u);
            }
        }
        self.deplete(to, &mut kink);
    }

    /// Depletes the stationed workload from `self.clock` to `t`.
    fn deplete(&mut self, t: f64, kink: &mut impl FnMut(f64, f64, f64)) {
        if t <= self.clock {
            return;
        }
        if self.v > 0.0 {
            let drain_at = self.clock + self.v / self.mu;
            if drain_at < t {
                self.v = 0.0;
                self.clock = drain_at;
                kink(drain_at, 0.0, self.u);
            } else {
                self.v = (self.v - self.mu * (t - self.clock)).max(0.0);
            }
        }
        self.clock = t;
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    let mut h = hash;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

struct GapAccumulator {
    burnin: f64,
    min: f64,
    sup: f64,
    samples: u64,
    trajectory: Option<Vec<(f64, f64)>>,
}

impl GapAccumulator {
    fn record(&mut self, t: f64, gamma: f64) {
        self.samples += 1;
        if gamma < self.min {
            self.min = gamma;
        }
        if t >= self.burnin && gamma > self.sup {
            self.sup = gamma;
        }
        if let Some(rows) = self.trajectory.as_mut() {
            rows.push((t, gamma));
        }
    }
}

struct PoolObserver {
    kind: PoolKind,
    pool: Pool,
    acc: GapAccumulator,
    input_hash: u64,
    arrivals: u64,
}

impl PoolObserver {
    fn new(kind: PoolKind, mu: f64, burnin: f64, record_trajectory: bool) -> Self {
        PoolObserver {
            kind,
            pool: Pool::new(mu),
            acc: GapAccumulator {
                burnin,
                // both systems start empty, so the gap starts at zero
                min: 0.0,
                sup: 0.0,
                samples: 0,
                trajectory: record_trajectory.then(Vec::new),
            },
            input_hash: FNV_OFFSET,
            arrivals: 0,
        }
    }
}

impl Observer for PoolObserver {
    fn on_dispatch(
        &mut self,
        t: f64,
        _id: u64,
        _station: usize,
        delay: f64,
        min_delay: f64,
        req: f64,
    ) {
        let arrival = match self.kind {
            PoolKind::Ssp => t + delay,
            PoolKind::Mdsp => t + min_delay,
        };
        self.pool.dispatch(arrival, req);
        self.arrivals += 1;
        self.input_hash = fnv1a(self.input_hash, &arrival.to_bits().to_le_bytes());
        self.input_hash = fnv1a(self.input_hash, &req.to_bits().to_le_bytes());
    }

    fn on_event(&mut self, t: f64, view: &SystemView<'_>) {
        let kind = self.kind;
        let acc = &mut self.acc;
        self.pool.advance(t, |tau, v, u| {
            acc.record(tau, gap_value(kind, view, tau, v, u));
        });
        acc.record(t, gap_value(kind, view, t, self.pool.v, self.pool.u));
    }
}

#[inline]
fn gap_value(kind: PoolKind, view: &SystemView<'_>, tau: f64, pool_v: f64, pool_u: f64) -> f64 {
    match kind {
        // stationed-workload gap
        PoolKind::Ssp => view.stationed_workload(tau) - pool_v,
        // system-workload gap
        PoolKind::Mdsp => {
            view.stationed_workload(tau) + view.enroute_workload() - (pool_v + pool_u)
        }
    }
}

/// Runs one replication of the distributed system and a reference pool in
/// lockstep on identical appearance, origin, routing, and service draws.
pub fn run_coupled(
    cfg: &ScenarioConfig,
    pool: &PoolSpec,
    replication: u64,
    record_trajectory: bool,
) -> Result<CoupledRun, CouplingError> {
    let resolved = Resolved::new(cfg)?;
    run_coupled_resolved(&resolved, pool, replication, record_trajectory)
}

/// [`run_coupled`] against a pre-resolved scenario.
pub fn run_coupled_resolved(
    resolved: &Resolved,
    pool: &PoolSpec,
    replication: u64,
    record_trajectory: bool,
) -> Result<CoupledRun, CouplingError> {
    let aggregate = resolved.mu_total;
    if (pool.service_rate - aggregate).abs() > 1e-9 {
        return Err(CouplingError::RateMismatch { given: pool.service_rate, aggregate });
    }
    if pool.kind == PoolKind::Mdsp {
        let first = &resolved.cfg.stations[0].service_dist;
        if resolved.cfg.stations.iter().any(|s| s.service_dist != *first) {
            return Err(CouplingError::StationDependentService);
        }
    }
    let mut observer = PoolObserver::new(
        pool.kind,
        aggregate,
        resolved.cfg.burnin_min,
        record_trajectory,
    );
    let stats = engine::run_resolved(resolved, replication, &mut observer)?;
    let gap = GapStats {
        min: observer.acc.min,
        sup: observer.acc.sup,
        sup_scaled: observer.acc.sup / resolved.n.sqrt(),
        samples: observer.acc.samples,
    };
    Ok(CoupledRun {
        pool: pool.kind,
        stats,
        gap,
        n: resolved.n,
        pool_input_hash: observer.input_hash,
        pool_arrivals: observer.arrivals,
        trajectory: observer.acc.trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        DistDescriptor, Origins, OriginSpec, PolicyKind, PolicySpec, ScenarioConfig,
        StationConfig, TieRule, TrafficSpec,
    };

    fn cfg(chi: f64, delays: Vec<f64>, horizon: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario_id: None,
            stations: vec![
                StationConfig { service_rate: 1.0, service_dist: DistDescriptor::Exponential },
                StationConfig { service_rate: 1.0, service_dist: DistDescriptor::Exponential },
            ],
            origins: Origins::Discrete {
                origins: vec![OriginSpec { probability: 1.0, delays }],
                scaled: false,
            },
            traffic: TrafficSpec {
                rho: Some(0.9),
                appearance_rate: None,
                n: None,
                interappearance_dist: DistDescriptor::Exponential,
            },
            policy: if chi >= 0.0 {
                PolicySpec::rjsq(chi)
            } else {
                PolicySpec::jsq()
            },
            horizon_min: horizon,
            burnin_min: horizon * 0.2,
            seed,
            sample_dt: None,
            event_log: false,
        }
    }

    #[test]
    fn empty_system_has_zero_gap() {
        let mut c = cfg(0.05, vec![3.0, 3.0], 50.0, 4);
        c.traffic.rho = Some(0.1);
        let run = run_coupled(&c, &PoolSpec::ssp(2.0), 0, true).unwrap();
        assert_eq!(run.trajectory.as_ref().unwrap().first().map(|(t, _)| *t >= 0.0), Some(true));
        assert!(run.gap.min >= -1e-9, "min gap {}", run.gap.min);
    }

    #[test]
    fn pool_rate_must_match_aggregate() {
        let c = cfg(0.05, vec![3.0, 3.0], 50.0, 4);
        assert!(matches!(
            run_coupled(&c, &PoolSpec::ssp(1.5), 0, false),
            Err(CouplingError::RateMismatch { .. })
        ));
    }

    #[test]
    fn ssp_gap_is_nonnegative_pathwise() {
        for rep in 0..10 {
            let run =
                run_coupled(&cfg(0.05, vec![20.0, 20.0], 4000.0, 42), &PoolSpec::ssp(2.0), rep, false)
                    .unwrap();
            assert!(run.gap.min >= -1e-9, "rep {rep}: min {}", run.gap.min);
            assert!(run.gap.sup > 0.0);
        }
    }

    #[test]
    fn mdsp_gap_is_nonnegative_pathwise() {
        for rep in 0..10 {
            let run = run_coupled(
                &cfg(0.05, vec![25.0, 10.0], 4000.0, 43),
                &PoolSpec::mdsp(2.0),
                rep,
                false,
            )
            .unwrap();
            assert!(run.gap.min >= -1e-9, "rep {rep}: min {}", run.gap.min);
        }
    }

    #[test]
    fn equal_delays_make_both_pools_agree() {
        // With equal delays to every station, the minimum-delay arrivals
        // coincide with the synchronized ones, so the system-workload gap
        // equals the stationed-workload gap.
        let c = cfg(0.05, vec![15.0, 15.0], 3000.0, 44);
        let ssp = run_coupled(&c, &PoolSpec::ssp(2.0), 0, true).unwrap();
        let mdsp = run_coupled(&c, &PoolSpec::mdsp(2.0), 0, true).unwrap();
        assert_eq!(ssp.pool_input_hash, mdsp.pool_input_hash);
        let ta = ssp.trajectory.as_ref().unwrap();
        let tb = mdsp.trajectory.as_ref().unwrap();
        assert_eq!(ta.len(), tb.len());
        for ((t1, g1), (t2, g2)) in ta.iter().zip(tb) {
            assert_eq!(t1, t2);
            assert!((g1 - g2).abs() < 1e-6, "t {t1}: {g1} vs {g2}");
        }
    }

    #[test]
    fn mdsp_input_is_policy_invariant_with_shared_service() {
        // Same seed, different policies: identical minimum-delay pool inputs.
        let a = run_coupled(&cfg(0.05, vec![25.0, 10.0], 2000.0, 45), &PoolSpec::mdsp(2.0), 3, false)
            .unwrap();
        let b = run_coupled(&cfg(-1.0, vec![25.0, 10.0], 2000.0, 45), &PoolSpec::mdsp(2.0), 3, false)
            .unwrap();
        assert_eq!(a.pool_arrivals, b.pool_arrivals);
        assert_eq!(a.pool_input_hash, b.pool_input_hash);
        // the synchronized pool, by contrast, depends on the routing policy
        let c = run_coupled(&cfg(0.05, vec![25.0, 10.0], 2000.0, 45), &PoolSpec::ssp(2.0), 3, false)
            .unwrap();
        let d = run_coupled(&cfg(-1.0, vec![25.0, 10.0], 2000.0, 45), &PoolSpec::ssp(2.0), 3, false)
            .unwrap();
        assert_ne!(c.pool_input_hash, d.pool_input_hash);
    }

    #[test]
    fn mdsp_rejects_station_dependent_service() {
        let mut c = cfg(0.05, vec![3.0, 3.0], 50.0, 4);
        c.stations[1].service_dist = DistDescriptor::lognormal_unit_mean(3.0);
        assert!(matches!(
            run_coupled(&c, &PoolSpec::mdsp(2.0), 0, false),
            Err(CouplingError::StationDependentService)
        ));
    }

    #[test]
    fn pool_coincides_with_a_single_station() {
        // Cumulative-input equality, degenerate form: with one station the
        // synchronized pool receives the same arrivals and requirements at
        // the same rate, so its workload equals the stationed workload at
        // all times and the gap is identically zero. This pins the pool
        // depletion mechanics against the engine's workload accounting.
        let c = ScenarioConfig {
            scenario_id: None,
            stations: vec![StationConfig {
                service_rate: 1.0,
                service_dist: DistDescriptor::Exponential,
            }],
            origins: Origins::Discrete {
                origins: vec![OriginSpec { probability: 1.0, delays: vec![7.0] }],
                scaled: false,
            },
            traffic: TrafficSpec {
                rho: Some(0.85),
                appearance_rate: None,
                n: None,
                interappearance_dist: DistDescriptor::Exponential,
            },
            policy: PolicySpec {
                kind: PolicyKind::RandomProportional,
                tie_rule: TieRule::LowestIndex,
            },
            horizon_min: 5000.0,
            burnin_min: 0.0,
            seed: 46,
            sample_dt: None,
            event_log: false,
        };
        let run = run_coupled(&c, &PoolSpec::ssp(1.0), 0, true).unwrap();
        assert!(run.gap.samples > 1000);
        for (t, g) in run.trajectory.as_ref().unwrap() {
            assert!(g.abs() < 1e-9, "t {t}: gap {g}");
        }
    }

    #[test]
    fn gap_supremum_respects_window() {
        let c = cfg(0.05, vec![10.0, 10.0], 1000.0, 47);
        let run = run_coupled(&c, &PoolSpec::ssp(2.0), 0, true).unwrap();
        let (full, scaled) = gap_supremum(&run, (0.0, 1000.0)).unwrap();
        let (late, _) = gap_supremum(&run, (900.0, 1000.0)).unwrap();
        assert!(full >= late);
        assert!((scaled - full / run.n.sqrt()).abs() < 1e-12);
        let no_traj = run_coupled(&c, &PoolSpec::ssp(2.0), 0, false).unwrap();
        assert!(gap_supremum(&no_traj, (0.0, 1.0)).is_err());
    }
}
