//! Capacity planning and routing-plan optimization, geographic zone and
//! border construction, and the balancing-fraction heuristics.
//!
//! The routing LP is a balanced transportation problem in the flow variables
//! `x[m][k] = p_m r[m][k]` and is solved exactly with a spanning-tree simplex
//! under Bland's anti-cycling rule. The joint capacity-and-routing problem
//! leaves the capacities free, so its optimum is the nearest-station
//! assignment; it is solved in closed form.

use crate::scenario::{GeographicSpec, RoutingPlan};
use crate::stochastics::{derive_stream, StreamLabel, StreamPurpose};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Feasibility tolerance for the LP and plan identities.
pub const LP_TOL: f64 = 1e-9;

/// Reserved replication index for planning-time Monte Carlo streams, so they
/// never collide with simulation replications.
const PLANNING_REP: u64 = u64::MAX;

#[derive(Debug, thiserror::Error)]
pub enum PlanningError {
    #[error("infeasible capacity vector: station {station} has capacity {value}")]
    InfeasibleCapacity { station: usize, value: f64 },
    #[error("origin probabilities must be positive and sum to 1 (got sum {sum})")]
    BadOrigins { sum: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("empty border set for station {station} at tau_bar {tau_bar}")]
    EmptyBorder { station: usize, tau_bar: f64 },
    #[error("target balancing fraction {chi} is infeasible: {reason}")]
    ChiInfeasible { chi: f64, reason: String },
    #[error("transportation simplex failed to converge")]
    NoConvergence,
}

/// Planned capacities and routing plan, with the attained mean traveling
/// delay and the nearest-only-support flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanningResult {
    pub capacities: Vec<f64>,
    pub plan: RoutingPlan,
    /// Mean traveling delay of the plan, in the units of the delay matrix.
    pub objective: f64,
    /// True when the plan routes only to nearest stations.
    pub gbc: bool,
}

/// Whether a plan has nearest-station-only support for the given delays.
pub fn is_gbc(plan: &RoutingPlan, delays: &[Vec<f64>]) -> bool {
    for (m, row) in plan.r.iter().enumerate() {
        let dmin = delays[m].iter().cloned().fold(f64::INFINITY, f64::min);
        for (k, r) in row.iter().enumerate() {
            if *r > LP_TOL && delays[m][k] > dmin + LP_TOL {
                return false;
            }
        }
    }
    true
}

fn check_origins(probs: &[f64]) -> Result<(), PlanningError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(PlanningError::BadOrigins { sum });
    }
    Ok(())
}

/// Jointly optimal capacities and routing plan for a fixed total capacity:
/// every origin routes to its nearest station (ties to the lowest index) and
/// each station receives the capacity share of its zone.
pub fn solve_joint_lp(
    probs: &[f64],
    delays: &[Vec<f64>],
    mu_total: f64,
) -> Result<PlanningResult, PlanningError> {
    check_origins(probs)?;
    let b = probs.len();
    let s = delays.first().map_or(0, Vec::len);
    if delays.len() != b || delays.iter().any(|row| row.len() != s) || s == 0 {
        return Err(PlanningError::Shape(format!(
            "delay matrix must be {b} x s with s >= 1"
        )));
    }
    let mut plan = vec![vec![0.0; s]; b];
    let mut shares = vec![0.0; s];
    let mut objective = 0.0;
    for m in 0..b {
        let mut nearest = 0;
        for k in 1..s {
            if delays[m][k] < delays[m][nearest] {
                nearest = k;
            }
        }
        plan[m][nearest] = 1.0;
        shares[nearest] += probs[m];
        objective += probs[m] * delays[m][nearest];
    }
    let capacities = shares.iter().map(|z| z * mu_total).collect();
    Ok(PlanningResult {
        capacities,
        plan: RoutingPlan { r: plan },
        objective,
        gbc: true,
    })
}

/// Minimum mean traveling delay routing plan for fixed capacities.
pub fn solve_routing_lp(
    probs: &[f64],
    delays: &[Vec<f64>],
    capacities: &[f64],
) -> Result<(RoutingPlan, f64), PlanningError> {
    check_origins(probs)?;
    let b = probs.len();
    let s = capacities.len();
    if delays.len() != b || delays.iter().any(|row| row.len() != s) {
        return Err(PlanningError::Shape(format!("delay matrix must be {b} x {s}")));
    }
    for (k, mu) in capacities.iter().enumerate() {
        if !(mu.is_finite() && *mu >= 0.0) {
            return Err(PlanningError::InfeasibleCapacity { station: k, value: *mu });
        }
    }
    let mu_total: f64 = capacities.iter().sum();
    if mu_total <= 0.0 {
        return Err(PlanningError::InfeasibleCapacity { station: 0, value: mu_total });
    }
    let demands: Vec<f64> = capacities.iter().map(|mu| mu / mu_total).collect();
    let x = transport::solve(probs, &demands, delays)?;
    let mut plan = vec![vec![0.0; s]; b];
    let mut objective = 0.0;
    for m in 0..b {
        for k in 0..s {
            plan[m][k] = x[m][k] / probs[m];
            objective += x[m][k] * delays[m][k];
        }
    }
    Ok((RoutingPlan { r: plan }, objective))
}

/// Exact transportation simplex on the spanning-tree basis.
pub mod transport {
    use super::{PlanningError, LP_TOL};

    /// Solves `min sum c[m][k] x[m][k]` subject to row sums `supply`, column
    /// sums `demand` (balanced), `x >= 0`. Entering and leaving variables are
    /// chosen lexicographically (Bland's rule), so degenerate instances
    /// terminate and ties resolve deterministically.
    pub fn solve(
        supply: &[f64],
        demand: &[f64],
        cost: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, PlanningError> {
        let b = supply.len();
        let s = demand.len();
        let total_supply: f64 = supply.iter().sum();
        let total_demand: f64 = demand.iter().sum();
        if (total_supply - total_demand).abs() > 1e-7 {
            return Err(PlanningError::Shape(format!(
                "unbalanced problem: supply {total_supply} vs demand {total_demand}"
            )));
        }

        // Northwest-corner initial basic feasible solution. Exactly
        // b + s - 1 basic cells, some possibly degenerate at zero.
        let mut x = vec![vec![0.0; s]; b];
        let mut basis = vec![vec![false; s]; b];
        let mut row_left: Vec<f64> = supply.to_vec();
        let mut col_left: Vec<f64> = demand.to_vec();
        let (mut m, mut k) = (0usize, 0usize);
        loop {
            let q = row_left[m].min(col_left[k]);
            x[m][k] = q;
            basis[m][k] = true;
            row_left[m] -= q;
            col_left[k] -= q;
            if m + 1 == b && k + 1 == s {
                break;
            }
            if row_left[m] <= col_left[k] && m + 1 < b {
                m += 1;
            } else {
                k += 1;
            }
        }

        let max_pivots = 20_000 + 50 * b * s;
        for _ in 0..max_pivots {
            // Duals from the spanning tree: u[m] + v[k] = c[m][k] on basis.
            let (u, v) = duals(&basis, cost, b, s)?;
            // Entering cell: first (lexicographic) with negative reduced cost.
            let mut entering = None;
            'scan: for mm in 0..b {
                for kk in 0..s {
                    if !basis[mm][kk] && cost[mm][kk] - u[mm] - v[kk] < -LP_TOL {
                        entering = Some((mm, kk));
                        break 'scan;
                    }
                }
            }
            let Some((em, ek)) = entering else {
                return Ok(x);
            };
            // Unique cycle through the entering cell in the basis tree.
            let cycle = find_cycle(&basis, em, ek, b, s)?;
            // Odd positions of the cycle lose flow.
            let mut theta = f64::INFINITY;
            let mut leave = None;
            for (idx, &(cm, ck)) in cycle.iter().enumerate().skip(1).step_by(2) {
                let val = x[cm][ck];
                if val < theta - LP_TOL
                    || (val <= theta + LP_TOL && leave.map_or(true, |(lm, lk, _)| (cm, ck) < (lm, lk)))
                {
                    theta = val.min(theta);
                    leave = Some((cm, ck, idx));
                }
            }
            let (lm, lk, _) = leave.ok_or(PlanningError::NoConvergence)?;
            for (idx, &(cm, ck)) in cycle.iter().enumerate() {
                if idx % 2 == 0 {
                    x[cm][ck] += theta;
                } else {
                    x[cm][ck] -= theta;
                }
            }
            basis[em][ek] = true;
            basis[lm][lk] = false;
            x[lm][lk] = 0.0;
        }
        Err(PlanningError::NoConvergence)
    }

    /// Computes duals by traversing the basis tree from row 0.
    fn duals(
        basis: &[Vec<bool>],
        cost: &[Vec<f64>],
        b: usize,
        s: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), PlanningError> {
        let mut u = vec![f64::NAN; b];
        let mut v = vec![f64::NAN; s];
        u[0] = 0.0;
        let mut frontier = vec![(true, 0usize)]; // (is_row, index)
        while let Some((is_row, idx)) = frontier.pop() {
            if is_row {
                for k in 0..s {
                    if basis[idx][k] && v[k].is_nan() {
                        v[k] = cost[idx][k] - u[idx];
                        frontier.push((false, k));
                    }
                }
            } else {
                for m in 0..b {
                    if basis[m][idx] && u[m].is_nan() {
                        u[m] = cost[m][idx] - v[idx];
                        frontier.push((true, m));
                    }
                }
            }
        }
        if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
            return Err(PlanningError::NoConvergence);
        }
        Ok((u, v))
    }

    /// Finds the unique alternating cycle created by adding `(em, ek)` to the
    /// basis tree. Returned as cells starting at the entering one, alternating
    /// row/column moves.
    fn find_cycle(
        basis: &[Vec<bool>],
        em: usize,
        ek: usize,
        b: usize,
        s: usize,
    ) -> Result<Vec<(usize, usize)>, PlanningError> {
        // Path in the bipartite basis graph from row em to column ek.
        // parent[node] remembers the tree edge taken.
        let rows = b;
        let total = b + s;
        let mut parent = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        let start = em;
        let goal = rows + ek;
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == goal {
                break;
            }
            if node < rows {
                let m = node;
                for k in 0..s {
                    if basis[m][k] && !seen[rows + k] {
                        seen[rows + k] = true;
                        parent[rows + k] = node;
                        queue.push_back(rows + k);
                    }
                }
            } else {
                let k = node - rows;
                for m in 0..b {
                    if basis[m][k] && !seen[m] {
                        seen[m] = true;
                        parent[m] = node;
                        queue.push_back(m);
                    }
                }
            }
        }
        if !seen[goal] {
            return Err(PlanningError::NoConvergence);
        }
        // Reconstruct node path goal -> start, then pair consecutive nodes
        // into cells; prepend the entering cell.
        let mut nodes = vec![goal];
        let mut cur = goal;
        while cur != start {
            cur = parent[cur];
            nodes.push(cur);
        }
        nodes.reverse(); // start (row em) ... goal (col ek)
        let mut cycle = vec![(em, ek)];
        for pair in nodes.windows(2) {
            let (a, c) = (pair[0], pair[1]);
            let cell = if a < rows { (a, c - rows) } else { (c, a - rows) };
            cycle.push(cell);
        }
        Ok(cycle)
    }
}

/// Zone and border sets for the tolerance-for-delays rule.
///
/// `zones[k]` holds the origins nearest to station `k`; `borders[k]` holds
/// the origins outside zone `k` whose delay to `k` exceeds their nearest
/// delay by at most `tau_bar`. For geographic specs the sets are evaluated
/// pointwise by Monte Carlo and only the masses are recorded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BorderStructure {
    pub tau_bar: f64,
    pub zones: Vec<Vec<usize>>,
    pub borders: Vec<Vec<usize>>,
    pub zone_mass: Vec<f64>,
    /// `p'_k`: probability of appearing in the border set of station `k`.
    pub border_mass: Vec<f64>,
    pub warnings: Vec<String>,
}

impl BorderStructure {
    fn warn_empty(&mut self) {
        for (k, mass) in self.border_mass.iter().enumerate() {
            if *mass <= 0.0 {
                self.warnings.push(format!(
                    "border set of station {k} is empty at tau_bar {}; \
                     the probabilistic diversion rule needs a larger tolerance",
                    self.tau_bar
                ));
            }
        }
    }
}

/// Border structure over discrete origins.
pub fn build_borders_discrete(
    probs: &[f64],
    delays: &[Vec<f64>],
    tau_bar: f64,
) -> Result<BorderStructure, PlanningError> {
    check_origins(probs)?;
    let b = probs.len();
    let s = delays.first().map_or(0, Vec::len);
    let mut zones = vec![Vec::new(); s];
    let mut borders = vec![Vec::new(); s];
    let mut zone_mass = vec![0.0; s];
    let mut border_mass = vec![0.0; s];
    for m in 0..b {
        let mut nearest = 0;
        for k in 1..s {
            if delays[m][k] < delays[m][nearest] {
                nearest = k;
            }
        }
        zones[nearest].push(m);
        zone_mass[nearest] += probs[m];
        let dmin = delays[m][nearest];
        for k in 0..s {
            if k != nearest && delays[m][k] <= dmin + tau_bar {
                borders[k].push(m);
                border_mass[k] += probs[m];
            }
        }
    }
    let mut out = BorderStructure {
        tau_bar,
        zones,
        borders,
        zone_mass,
        border_mass,
        warnings: Vec::new(),
    };
    out.warn_empty();
    Ok(out)
}

/// Monte Carlo border masses `p'_k` for a geographic region.
pub fn border_masses(geo: &GeographicSpec, tau_bar: f64, points: usize, seed: u64) -> Vec<f64> {
    let s = geo.station_coords.len();
    let mut rng = derive_stream(
        seed,
        StreamLabel { purpose: StreamPurpose::LocationDraw, replication: PLANNING_REP },
    );
    let mut hits = vec![0u64; s];
    let mut delays = vec![0.0; s];
    for _ in 0..points {
        let p = [
            geo.min[0] + rng.random::<f64>() * geo.width(),
            geo.min[1] + rng.random::<f64>() * geo.height(),
        ];
        geo.delays_at(p, &mut delays);
        let mut nearest = 0;
        for k in 1..s {
            if delays[k] < delays[nearest] {
                nearest = k;
            }
        }
        for k in 0..s {
            if k != nearest && delays[k] <= delays[nearest] + tau_bar {
                hits[k] += 1;
            }
        }
    }
    hits.iter().map(|h| *h as f64 / points as f64).collect()
}

/// Monte Carlo zone masses (probability of each station being nearest).
pub fn zone_masses(geo: &GeographicSpec, points: usize, seed: u64) -> Vec<f64> {
    let s = geo.station_coords.len();
    let mut rng = derive_stream(
        seed,
        StreamLabel { purpose: StreamPurpose::LocationDraw, replication: PLANNING_REP },
    );
    let mut hits = vec![0u64; s];
    let mut delays = vec![0.0; s];
    for _ in 0..points {
        let p = [
            geo.min[0] + rng.random::<f64>() * geo.width(),
            geo.min[1] + rng.random::<f64>() * geo.height(),
        ];
        geo.delays_at(p, &mut delays);
        let mut nearest = 0;
        for k in 1..s {
            if delays[k] < delays[nearest] {
                nearest = k;
            }
        }
        hits[nearest] += 1;
    }
    hits.iter().map(|h| *h as f64 / points as f64).collect()
}

/// Border structure for a geographic region (masses only).
pub fn build_borders_geo(
    geo: &GeographicSpec,
    tau_bar: f64,
    points: usize,
    seed: u64,
) -> BorderStructure {
    let s = geo.station_coords.len();
    let mut out = BorderStructure {
        tau_bar,
        zones: vec![Vec::new(); s],
        borders: vec![Vec::new(); s],
        zone_mass: zone_masses(geo, points, seed),
        border_mass: border_masses(geo, tau_bar, points, seed),
        warnings: Vec::new(),
    };
    out.warn_empty();
    out
}

/// One clipped Voronoi edge between two stations inside the region.
#[derive(Clone, Debug)]
pub struct VoronoiEdge {
    pub stations: (usize, usize),
    pub length: f64,
    /// Integral of the distance to either generator along the edge.
    pub distance_integral: f64,
}

/// Clipped Voronoi edges of the station diagram inside the region rectangle.
pub fn voronoi_edges(geo: &GeographicSpec) -> Vec<VoronoiEdge> {
    let s = geo.station_coords.len();
    let mut edges = Vec::new();
    const BIG: f64 = 1e12;
    for a in 0..s {
        for b_idx in a + 1..s {
            let pa = geo.station_coords[a];
            let pb = geo.station_coords[b_idx];
            let dx = pb[0] - pa[0];
            let dy = pb[1] - pa[1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < 1e-12 {
                continue;
            }
            let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
            // unit direction along the bisector
            let dir = [-dy / dist, dx / dist];
            let mut lo = -BIG;
            let mut hi = BIG;
            // rectangle: min <= mid + t dir <= max, coordinate-wise
            for axis in 0..2 {
                clip_range(
                    &mut lo,
                    &mut hi,
                    mid[axis],
                    dir[axis],
                    geo.min[axis],
                    geo.max[axis],
                );
            }
            // dominance over every other station: |P - pa|^2 <= |P - pc|^2
            for c in 0..s {
                if c == a || c == b_idx {
                    continue;
                }
                let pc = geo.station_coords[c];
                let gx = pc[0] - pa[0];
                let gy = pc[1] - pa[1];
                // 2 P . (pc - pa) <= |pc|^2 - |pa|^2
                let rhs = pc[0] * pc[0] + pc[1] * pc[1] - pa[0] * pa[0] - pa[1] * pa[1];
                let coef = 2.0 * (dir[0] * gx + dir[1] * gy);
                let cons = 2.0 * (mid[0] * gx + mid[1] * gy);
                clip_half_plane(&mut lo, &mut hi, coef, rhs - cons);
            }
            if hi <= lo + 1e-12 {
                continue;
            }
            let h = dist / 2.0;
            // distance to either generator at arc parameter t is sqrt(t^2 + h^2)
            let anti = |t: f64| (t * (t * t + h * h).sqrt() + h * h * (t / h).asinh()) / 2.0;
            edges.push(VoronoiEdge {
                stations: (a, b_idx),
                length: hi - lo,
                distance_integral: anti(hi) - anti(lo),
            });
        }
    }
    edges
}

/// Intersects `lo..hi` with `{t : bound_lo <= base + coef t <= bound_hi}`.
fn clip_range(lo: &mut f64, hi: &mut f64, base: f64, coef: f64, bound_lo: f64, bound_hi: f64) {
    clip_half_plane(lo, hi, coef, bound_hi - base);
    clip_half_plane(lo, hi, -coef, base - bound_lo);
}

/// Intersects `lo..hi` with `{t : coef t <= rhs}`.
fn clip_half_plane(lo: &mut f64, hi: &mut f64, coef: f64, rhs: f64) {
    if coef.abs() < 1e-15 {
        if rhs < 0.0 {
            *lo = 1.0;
            *hi = 0.0;
        }
    } else if coef > 0.0 {
        *hi = hi.min(rhs / coef);
    } else {
        *lo = lo.max(rhs / coef);
    }
}

/// Root-of-excess rule `chi* = C* sqrt(1 - rho)`.
pub fn chi_root_excess(rho: f64, c_star: f64) -> f64 {
    debug_assert!(rho > 0.0 && rho < 1.0 && c_star > 0.0);
    c_star * (1.0 - rho).sqrt()
}

/// Reciprocal-root-of-delay rule `chi** = C** / sqrt(gamma_hat)`, with
/// `gamma_hat` the estimated mean traveling delay (minutes) of the additional
/// customers sent to the shortest queue.
pub fn chi_reciprocal_root(gamma_hat_min: f64, c_dstar: f64) -> f64 {
    debug_assert!(gamma_hat_min > 0.0 && c_dstar > 0.0);
    c_dstar / gamma_hat_min.sqrt()
}

/// Estimated mean traveling delay of the additional shortest-queue customers.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExtraDelayEstimate {
    /// Primitive units (minutes divided by sqrt(n)).
    pub gamma_bar: f64,
    /// Literal minutes, `gamma_bar / (1 - rho)` under the default scaling.
    pub gamma_hat: f64,
}

/// Which population the delay estimator averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtraDelayMode {
    /// Origin-unaware dispatcher: any customer may be diverted.
    Unaware,
    /// Origin-aware dispatcher: only border customers are diverted.
    Aware,
}

/// Delay estimator over discrete origins. `scaled` marks the delay matrix as
/// primitive; literal matrices are converted using `1 - rho`.
pub fn extra_delay_discrete(
    probs: &[f64],
    delays: &[Vec<f64>],
    mode: ExtraDelayMode,
    borders: Option<&BorderStructure>,
    rho: f64,
    scaled: bool,
) -> Result<ExtraDelayEstimate, PlanningError> {
    check_origins(probs)?;
    let s = delays.first().map_or(0, Vec::len);
    let gamma_bar_units = match mode {
        ExtraDelayMode::Unaware => {
            let mut acc = 0.0;
            for (m, row) in delays.iter().enumerate() {
                for d in row {
                    acc += probs[m] * d;
                }
            }
            acc / s as f64
        }
        ExtraDelayMode::Aware => {
            let borders = borders.ok_or_else(|| {
                PlanningError::Shape("aware mode needs a BorderStructure".into())
            })?;
            let mut acc = 0.0;
            for k in 0..s {
                let mass = borders.border_mass[k];
                if mass <= 0.0 {
                    return Err(PlanningError::EmptyBorder { station: k, tau_bar: borders.tau_bar });
                }
                let num: f64 = borders.borders[k]
                    .iter()
                    .map(|&m| probs[m] * delays[m][k])
                    .sum();
                acc += num / mass;
            }
            acc / s as f64
        }
    };
    Ok(normalize_units(gamma_bar_units, rho, scaled))
}

/// Aware-mode delay estimator for a geographic region: the mean distance to
/// the flanking stations along the zone border lines, divided by the travel
/// speed. Returns literal minutes.
pub fn extra_delay_geographic(geo: &GeographicSpec, rho: f64) -> ExtraDelayEstimate {
    let edges = voronoi_edges(geo);
    let total_len: f64 = edges.iter().map(|e| e.length).sum();
    let total_int: f64 = edges.iter().map(|e| e.distance_integral).sum();
    let mean_distance = total_int / total_len;
    normalize_units(mean_distance / geo.speed, rho, false)
}

fn normalize_units(gamma_bar_units: f64, rho: f64, scaled: bool) -> ExtraDelayEstimate {
    if scaled {
        ExtraDelayEstimate { gamma_bar: gamma_bar_units, gamma_hat: gamma_bar_units / (1.0 - rho) }
    } else {
        ExtraDelayEstimate { gamma_bar: gamma_bar_units * (1.0 - rho), gamma_hat: gamma_bar_units }
    }
}

/// How the border area is modeled when inverting for the tolerance.
#[derive(Clone, Copy, Debug)]
pub enum BorderAreaModel {
    /// Mean-width model: the border band around each zone edge has total
    /// width `tau_bar * speed`, so area = edge length * speed * tau_bar.
    /// This is the calibration the tolerance rule is built on.
    MeanWidth,
    /// Pointwise border membership measured by Monte Carlo. Wider than the
    /// mean-width band away from the stations, so it yields smaller
    /// tolerances for the same target.
    MonteCarlo { points: usize, seed: u64 },
}

/// Inverts the border-area relation `area(tau_bar) = region_area * s * chi`
/// for the tolerance, by bisection on the monotone area model.
pub fn tau_from_chi(
    geo: &GeographicSpec,
    chi_target: f64,
    model: BorderAreaModel,
) -> Result<f64, PlanningError> {
    if chi_target < 0.0 || !chi_target.is_finite() {
        return Err(PlanningError::ChiInfeasible {
            chi: chi_target,
            reason: "must be finite and nonnegative".into(),
        });
    }
    if chi_target == 0.0 {
        return Ok(0.0);
    }
    let s = geo.station_coords.len();
    let target_area = geo.area() * s as f64 * chi_target;
    if target_area >= geo.area() {
        return Err(PlanningError::ChiInfeasible {
            chi: chi_target,
            reason: format!(
                "target border area {target_area} reaches the whole region ({})",
                geo.area()
            ),
        });
    }
    let area_at: Box<dyn Fn(f64) -> f64> = match model {
        BorderAreaModel::MeanWidth => {
            let total_len: f64 = voronoi_edges(geo).iter().map(|e| e.length).sum();
            if total_len <= 0.0 {
                return Err(PlanningError::ChiInfeasible {
                    chi: chi_target,
                    reason: "the zone diagram has no internal borders".into(),
                });
            }
            let speed = geo.speed;
            Box::new(move |tau: f64| total_len * speed * tau)
        }
        BorderAreaModel::MonteCarlo { points, seed } => {
            let geo = geo.clone();
            let region_area = geo.area();
            Box::new(move |tau: f64| {
                // union mass of the border sets; monotone in tau for a fixed
                // point sample
                let masses = border_union_mass(&geo, tau, points, seed);
                masses * region_area
            })
        }
    };
    // bracket the root
    let mut hi = 1.0;
    let diameter = (geo.width().powi(2) + geo.height().powi(2)).sqrt();
    let tau_cap = 4.0 * diameter / geo.speed;
    while area_at(hi) < target_area {
        hi *= 2.0;
        if hi > tau_cap {
            return Err(PlanningError::ChiInfeasible {
                chi: chi_target,
                reason: format!("no tolerance below {tau_cap} min reaches the target area"),
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if area_at(mid) < target_area {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fraction of the region inside at least one border set at tolerance `tau`.
pub fn border_union_mass(geo: &GeographicSpec, tau: f64, points: usize, seed: u64) -> f64 {
    let s = geo.station_coords.len();
    let mut rng = derive_stream(
        seed,
        StreamLabel { purpose: StreamPurpose::LocationDraw, replication: PLANNING_REP },
    );
    let mut hits = 0u64;
    let mut delays = vec![0.0; s];
    for _ in 0..points {
        let p = [
            geo.min[0] + rng.random::<f64>() * geo.width(),
            geo.min[1] + rng.random::<f64>() * geo.height(),
        ];
        geo.delays_at(p, &mut delays);
        let mut nearest = 0;
        for k in 1..s {
            if delays[k] < delays[nearest] {
                nearest = k;
            }
        }
        let second = (0..s)
            .filter(|k| *k != nearest)
            .map(|k| delays[k])
            .fold(f64::INFINITY, f64::min);
        if second <= delays[nearest] + tau {
            hits += 1;
        }
    }
    hits as f64 / points as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo_three() -> GeographicSpec {
        GeographicSpec {
            min: [0.0, 0.0],
            max: [20.0, 20.0],
            station_coords: vec![[5.0, 5.0], [5.0, 15.0], [15.0, 5.0]],
            speed: 0.1,
        }
    }

    #[test]
    fn joint_lp_single_origin_routes_to_nearest() {
        let res = solve_joint_lp(&[1.0], &[vec![1.0, 2.0]], 2.0).unwrap();
        assert_eq!(res.capacities, vec![2.0, 0.0]);
        assert_eq!(res.plan.r, vec![vec![1.0, 0.0]]);
        assert!((res.objective - 1.0).abs() < 1e-12);
        assert!(res.gbc);
        // vertex enumeration for b = 1: the only alternatives route mass to
        // station 1 at cost 2 > 1
    }

    #[test]
    fn joint_lp_symmetric_two_origins() {
        let res = solve_joint_lp(
            &[0.5, 0.5],
            &[vec![1.0, 3.0], vec![3.0, 1.0]],
            2.0,
        )
        .unwrap();
        assert_eq!(res.capacities, vec![1.0, 1.0]);
        assert_eq!(res.plan.r, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((res.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_lp_on_discretized_square_recovers_zone_capacities() {
        let geo = geo_three();
        let grid = 200;
        let step = 20.0 / grid as f64;
        let mut probs = Vec::with_capacity(grid * grid);
        let mut delays = Vec::with_capacity(grid * grid);
        let mut row = vec![0.0; 3];
        for i in 0..grid {
            for j in 0..grid {
                let p = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step];
                geo.delays_at(p, &mut row);
                probs.push(1.0 / (grid * grid) as f64);
                delays.push(row.clone());
            }
        }
        let res = solve_joint_lp(&probs, &delays, 4.0).unwrap();
        assert!((res.capacities[0] - 1.0).abs() < 0.01, "{:?}", res.capacities);
        assert!((res.capacities[1] - 1.5).abs() < 0.015, "{:?}", res.capacities);
        assert!((res.capacities[2] - 1.5).abs() < 0.015, "{:?}", res.capacities);
        assert!(res.gbc);
    }

    #[test]
    fn routing_lp_single_origin_is_forced() {
        let (plan, _) = solve_routing_lp(
            &[1.0],
            &[vec![9.0, 1.0, 5.0]],
            &[1.0, 1.5, 2.5],
        )
        .unwrap();
        let expected = [1.0 / 5.0, 1.5 / 5.0, 2.5 / 5.0];
        for k in 0..3 {
            assert!((plan.r[0][k] - expected[k]).abs() < 1e-12);
        }
    }

    /// Brute-force oracle: enumerate all spanning bases of the balanced
    /// transportation polytope and take the best feasible one.
    fn brute_force_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
        let b = supply.len();
        let s = demand.len();
        let cells: Vec<(usize, usize)> =
            (0..b).flat_map(|m| (0..s).map(move |k| (m, k))).collect();
        let basis_size = b + s - 1;
        let mut best = f64::INFINITY;
        let n = cells.len();
        // iterate subsets of size basis_size
        let mut idx: Vec<usize> = (0..basis_size).collect();
        loop {
            // solve for the basic solution on this cell subset
            let chosen: Vec<(usize, usize)> = idx.iter().map(|&i| cells[i]).collect();
            if let Some(obj) = basic_solution_objective(&chosen, supply, demand, cost, b, s) {
                best = best.min(obj);
            }
            // next combination
            let mut i = basis_size;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] != i + n - basis_size {
                    idx[i] += 1;
                    for j in i + 1..basis_size {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn basic_solution_objective(
        cells: &[(usize, usize)],
        supply: &[f64],
        demand: &[f64],
        cost: &[Vec<f64>],
        b: usize,
        s: usize,
    ) -> Option<f64> {
        // Solve the sparse linear system by peeling degree-1 rows/columns.
        let mut x: std::collections::HashMap<(usize, usize), f64> =
            cells.iter().map(|c| (*c, f64::NAN)).collect();
        let mut row_left = supply.to_vec();
        let mut col_left = demand.to_vec();
        let mut remaining: Vec<(usize, usize)> = cells.to_vec();
        while !remaining.is_empty() {
            let mut progressed = false;
            for i in 0..remaining.len() {
                let (m, k) = remaining[i];
                let row_deg = remaining.iter().filter(|(mm, _)| *mm == m).count();
                let col_deg = remaining.iter().filter(|(_, kk)| *kk == k).count();
                if row_deg == 1 {
                    x.insert((m, k), row_left[m]);
                    col_left[k] -= row_left[m];
                    row_left[m] = 0.0;
                    remaining.swap_remove(i);
                    progressed = true;
                    break;
                }
                if col_deg == 1 {
                    x.insert((m, k), col_left[k]);
                    row_left[m] -= col_left[k];
                    col_left[k] = 0.0;
                    remaining.swap_remove(i);
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                return None; // subset contains a cycle
            }
        }
        if row_left.iter().chain(col_left.iter()).any(|v| v.abs() > 1e-9) {
            return None;
        }
        let mut obj = 0.0;
        for ((m, k), v) in &x {
            if *v < -1e-9 {
                return None;
            }
            obj += v.max(0.0) * cost[*m][*k];
        }
        Some(obj)
    }

    #[test]
    fn routing_lp_matches_vertex_enumeration() {
        let probs = [0.5, 0.3, 0.2];
        let delays = vec![vec![4.0, 1.0], vec![2.0, 6.0], vec![3.0, 3.0]];
        let caps = [1.2, 0.8];
        let (plan, obj) = solve_routing_lp(&probs, &delays, &caps).unwrap();
        let demand: Vec<f64> = caps.iter().map(|c| c / 2.0).collect();
        let best = brute_force_transport(&probs, &demand, &delays);
        assert!((obj - best).abs() < 1e-9, "simplex {obj} vs brute force {best}");
        assert!(plan.basic_violations().is_empty());
    }

    #[test]
    fn routing_lp_matches_vertex_enumeration_randomized() {
        use rand::Rng;
        let mut rng = derive_stream(
            2024,
            StreamLabel { purpose: StreamPurpose::OriginDraw, replication: PLANNING_REP },
        );
        for _ in 0..40 {
            let b = 2 + (rng.random::<f64>() * 3.0) as usize;
            let s = 2 + (rng.random::<f64>() * 2.0) as usize;
            let mut probs: Vec<f64> = (0..b).map(|_| 0.1 + rng.random::<f64>()).collect();
            let psum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= psum);
            let mut demand: Vec<f64> = (0..s).map(|_| 0.1 + rng.random::<f64>()).collect();
            let dsum: f64 = demand.iter().sum();
            demand.iter_mut().for_each(|d| *d /= dsum);
            let delays: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..s).map(|_| (rng.random::<f64>() * 10.0).round()).collect())
                .collect();
            let caps: Vec<f64> = demand.iter().map(|d| d * 3.0).collect();
            let (plan, obj) = solve_routing_lp(&probs, &delays, &caps).unwrap();
            let best = brute_force_transport(&probs, &demand, &delays);
            assert!((obj - best).abs() < 1e-8, "simplex {obj} vs brute force {best}");
            assert!(plan.basic_violations().is_empty());
            let mus: Vec<f64> = caps.clone();
            assert!(plan.heavy_traffic_violations(&probs, &mus).is_empty());
        }
    }

    #[test]
    fn routing_lp_with_joint_capacities_matches_joint_objective() {
        let probs = [0.4, 0.35, 0.25];
        let delays = vec![vec![1.0, 5.0], vec![6.0, 2.0], vec![3.0, 4.0]];
        let joint = solve_joint_lp(&probs, &delays, 2.0).unwrap();
        let (_, obj) = solve_routing_lp(&probs, &delays, &joint.capacities).unwrap();
        assert!((obj - joint.objective).abs() < 1e-9);
    }

    #[test]
    fn lp_beats_random_feasible_plans() {
        use rand::Rng;
        let mut rng = derive_stream(
            7,
            StreamLabel { purpose: StreamPurpose::OriginDraw, replication: PLANNING_REP },
        );
        let probs = [0.3, 0.25, 0.25, 0.2];
        let delays: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random::<f64>() * 20.0).collect())
            .collect();
        let demand = [0.5, 0.3, 0.2];
        let caps: Vec<f64> = demand.iter().map(|d| d * 2.0).collect();
        let (_, opt) = solve_routing_lp(&probs, &delays, &caps).unwrap();
        for _ in 0..1000 {
            // random feasible flow by iterative proportional fitting
            let mut x: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| 0.05 + rng.random::<f64>()).collect())
                .collect();
            for _ in 0..200 {
                for m in 0..4 {
                    let rs: f64 = x[m].iter().sum();
                    for k in 0..3 {
                        x[m][k] *= probs[m] / rs;
                    }
                }
                for k in 0..3 {
                    let cs: f64 = (0..4).map(|m| x[m][k]).sum();
                    for row in x.iter_mut() {
                        row[k] *= demand[k] / cs;
                    }
                }
            }
            let obj: f64 = (0..4)
                .map(|m| (0..3).map(|k| x[m][k] * delays[m][k]).sum::<f64>())
                .sum();
            assert!(obj >= opt - 1e-6, "random plan {obj} beats optimum {opt}");
        }
    }

    #[test]
    fn borders_discrete_zero_tau_uses_tie_rule() {
        // one origin equidistant to two stations: zone of station 0 by the
        // lowest-index rule, and it shows up in station 1's border at tau 0
        let bs = build_borders_discrete(&[1.0], &[vec![2.0, 2.0]], 0.0).unwrap();
        assert_eq!(bs.zones[0], vec![0]);
        assert!(bs.zones[1].is_empty());
        assert_eq!(bs.borders[1], vec![0]);
    }

    #[test]
    fn borders_nested_in_tau() {
        let probs = [0.25, 0.25, 0.25, 0.25];
        let delays = vec![
            vec![1.0, 4.0, 9.0],
            vec![3.0, 2.0, 5.0],
            vec![8.0, 2.5, 2.0],
            vec![4.0, 4.5, 5.0],
        ];
        let small = build_borders_discrete(&probs, &delays, 1.0).unwrap();
        let large = build_borders_discrete(&probs, &delays, 3.0).unwrap();
        for k in 0..3 {
            for m in &small.borders[k] {
                assert!(large.borders[k].contains(m), "station {k} origin {m}");
            }
            assert!(small.border_mass[k] <= large.border_mass[k] + 1e-15);
        }
    }

    #[test]
    fn geo_border_mass_matches_frozen_oracle() {
        // frozen from an independent Monte Carlo run of the union mass:
        // tau = 16 min gives ~0.1743 summed border mass and ~0.164 union
        let geo = geo_three();
        let masses = border_masses(&geo, 16.0, 1_000_000, 99);
        let total: f64 = masses.iter().sum();
        assert!((total - 0.1743).abs() < 0.004, "sum p' {total}");
        let union = border_union_mass(&geo, 20.0, 1_000_000, 99);
        assert!((union * 400.0 - 81.0).abs() < 2.0, "union area {}", union * 400.0);
    }

    #[test]
    fn voronoi_edges_match_closed_form_geometry() {
        let geo = geo_three();
        let edges = voronoi_edges(&geo);
        let total_len: f64 = edges.iter().map(|e| e.length).sum();
        assert!((total_len - (20.0 + 10.0 * 2.0_f64.sqrt())).abs() < 1e-9, "len {total_len}");
        // mean distance from the border lines to the flanking stations:
        // (2 I1 + sqrt(2) I2) / (20 + 10 sqrt(2)) with
        // I1 = int_0^10 sqrt((x-5)^2+25) dx, I2 = int_10^20 sqrt((x-5)^2+(x-15)^2) dx
        let mean = edges.iter().map(|e| e.distance_integral).sum::<f64>() / total_len;
        assert!((mean - 7.6934).abs() < 1e-3, "mean border distance {mean}");
    }

    #[test]
    fn extra_delay_discrete_examples() {
        // single origin, equal delays: the estimator collapses to the delay
        let est = extra_delay_discrete(
            &[1.0],
            &[vec![1.0, 1.0]],
            ExtraDelayMode::Unaware,
            None,
            0.9,
            true,
        )
        .unwrap();
        assert!((est.gamma_bar - 1.0).abs() < 1e-12);
        assert!((est.gamma_hat - 10.0).abs() < 1e-9);

        let est = extra_delay_discrete(
            &[0.5, 0.5],
            &[vec![1.0, 3.0], vec![3.0, 1.0]],
            ExtraDelayMode::Unaware,
            None,
            0.5,
            true,
        )
        .unwrap();
        assert!((est.gamma_bar - 2.0).abs() < 1e-12);
    }

    #[test]
    fn extra_delay_geographic_matches_paper_geometry() {
        let geo = geo_three();
        let est = extra_delay_geographic(&geo, 0.99);
        assert!((est.gamma_hat - 76.94).abs() < 0.1, "gamma_hat {}", est.gamma_hat);
        assert!((est.gamma_bar - 0.7694).abs() < 0.001);
    }

    #[test]
    fn heuristic_rules_reference_points() {
        assert!((chi_root_excess(0.99, 0.4) - 0.04).abs() < 1e-12);
        assert!((chi_root_excess(0.90, 0.4) - 0.1265).abs() < 5e-5);
        assert!((chi_root_excess(0.75, 1.0) - 0.5).abs() < 1e-12);
        assert!((chi_reciprocal_root(76.94, 0.4) - 0.0456).abs() < 5e-5);
        assert!((chi_reciprocal_root(1.0, 0.4) - 0.4).abs() < 1e-12);
        // the (rho, d) form: gamma_hat = d / (1 - rho)
        let gamma_hat = 2.0 / (1.0 - 0.90);
        assert!((chi_reciprocal_root(gamma_hat, 0.4) - 0.0894).abs() < 5e-5);
    }

    #[test]
    fn chi_reciprocal_root_is_decreasing() {
        let mut prev = f64::INFINITY;
        for g in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let v = chi_reciprocal_root(g, 0.4);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn tau_from_chi_mean_width_matches_paper_value() {
        let geo = geo_three();
        let tau = tau_from_chi(&geo, 0.0456, BorderAreaModel::MeanWidth).unwrap();
        assert!((tau - 16.03).abs() < 0.1, "tau {tau}");
        assert!(tau_from_chi(&geo, 0.0, BorderAreaModel::MeanWidth).unwrap() == 0.0);
        let tau2 = tau_from_chi(&geo, 0.0912, BorderAreaModel::MeanWidth).unwrap();
        assert!(tau2 > tau);
        assert!(tau_from_chi(&geo, 0.5, BorderAreaModel::MeanWidth).is_err());
    }

    #[test]
    fn tau_from_chi_monte_carlo_is_monotone() {
        let geo = geo_three();
        let model = BorderAreaModel::MonteCarlo { points: 200_000, seed: 5 };
        let tau_small = tau_from_chi(&geo, 0.02, model).unwrap();
        let tau_large = tau_from_chi(&geo, 0.04, model).unwrap();
        assert!(tau_small > 0.0 && tau_large > tau_small);
    }
}
