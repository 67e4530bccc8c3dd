//! Dispatcher rules: queue ranking, perturbation-coefficient construction,
//! and destination sampling for JSQ, proportional-random, RJSQ (origin-aware
//! and origin-unaware), and the geographic tolerance rule.
//!
//! The randomized rules consume one standard uniform per decision and map it
//! through cumulative routing thresholds, so a fixed uniform stream fully
//! determines the destination sequence given the ranking history.

use crate::scenario::{RoutingPlan, TieRule};
use crate::stochastics::StreamRng;
use rand::Rng;

/// Queue counts and weighted queue lengths `L_k = Q_k / mu_k` observed by the
/// dispatcher at an appearance instant.
#[derive(Clone, Debug)]
pub struct QueueSnapshot {
    pub counts: Vec<u64>,
    pub weighted: Vec<f64>,
}

impl QueueSnapshot {
    pub fn from_counts(counts: Vec<u64>, mus: &[f64]) -> Self {
        let weighted = counts.iter().zip(mus).map(|(q, mu)| *q as f64 / mu).collect();
        QueueSnapshot { counts, weighted }
    }
}

/// Station ranking by weighted queue length.
///
/// `by_rank[l]` is the station with the `l`-th shortest weighted queue and
/// `rank_of[k]` is the rank of station `k`; the two are mutually inverse
/// permutations. All indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub by_rank: Vec<usize>,
    pub rank_of: Vec<usize>,
}

impl Ranking {
    pub fn shortest(&self) -> usize {
        self.by_rank[0]
    }

    fn from_by_rank(by_rank: Vec<usize>) -> Self {
        let mut rank_of = vec![0; by_rank.len()];
        for (rank, &station) in by_rank.iter().enumerate() {
            rank_of[station] = rank;
        }
        Ranking { by_rank, rank_of }
    }
}

/// Ranks stations in increasing order of weighted queue length. Ties are
/// resolved by lowest station index, or by a random permutation of the tied
/// group when `tie_rule` is `Random` (consuming the routing uniform stream).
pub fn rank(snapshot: &QueueSnapshot, tie_rule: TieRule, rng: &mut StreamRng) -> Ranking {
    let s = snapshot.weighted.len();
    let mut by_rank: Vec<usize> = (0..s).collect();
    by_rank.sort_by(|&a, &b| {
        snapshot.weighted[a]
            .partial_cmp(&snapshot.weighted[b])
            .expect("weighted queue lengths are finite")
            .then(a.cmp(&b))
    });
    if tie_rule == TieRule::Random {
        let mut start = 0;
        while start < s {
            let mut end = start + 1;
            while end < s && snapshot.weighted[by_rank[end]] == snapshot.weighted[by_rank[start]] {
                end += 1;
            }
            // Fisher-Yates within the tied group.
            for i in (start + 1..end).rev() {
                let j = start + (rng.random::<f64>() * (i - start + 1) as f64) as usize;
                by_rank.swap(i, j.min(i));
            }
            start = end;
        }
    }
    Ranking::from_by_rank(by_rank)
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(
        "balancing fraction {chi} violates condition (ii): \
         station {station} would get routing probability {prob} outside [0, 1]"
    )]
    ChiOutOfRange { chi: f64, station: usize, prob: f64 },
    #[error("perturbation scheme needs at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error("infeasible origin allocation at rank {rank}: residual {residual}")]
    InfeasibleAllocation { rank: usize, residual: f64 },
}

/// Rank-indexed perturbation coefficients.
///
/// `eps[0] = chi` elevates the shortest queue; `eps[l] < 0` for the rest;
/// the coefficients sum to zero and keep every routing probability
/// `mu_k/mu + eps[l]` inside `[0, 1]`. `delta0` is the audit value
/// `min_{l>=1} (-eps[l]) / chi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationScheme {
    pub chi: f64,
    pub eps: Vec<f64>,
    pub delta0: f64,
}

impl PerturbationScheme {
    /// The default scheme: the balancing fraction is taken evenly from every
    /// rank above the first, `eps = (chi, -chi/(s-1), ..., -chi/(s-1))`.
    pub fn balanced(mus: &[f64], chi: f64) -> Result<Self, PolicyError> {
        let s = mus.len();
        if s < 2 {
            return Err(PolicyError::TooFewStations(s));
        }
        let mu: f64 = mus.iter().sum();
        let take = chi / (s as f64 - 1.0);
        for (k, m) in mus.iter().enumerate() {
            let low = m / mu - take;
            if low < -1e-12 {
                return Err(PolicyError::ChiOutOfRange { chi, station: k, prob: low });
            }
            let high = m / mu + chi;
            if high > 1.0 + 1e-12 {
                return Err(PolicyError::ChiOutOfRange { chi, station: k, prob: high });
            }
        }
        let mut eps = vec![-take; s];
        eps[0] = chi;
        let delta0 = if chi > 0.0 { 1.0 / (s as f64 - 1.0) } else { 0.0 };
        Ok(PerturbationScheme { chi, eps, delta0 })
    }

    /// Checks the scheme invariants against a capacity vector.
    pub fn validate(&self, mus: &[f64]) -> Result<(), PolicyError> {
        let s = mus.len();
        if s < 2 {
            return Err(PolicyError::TooFewStations(s));
        }
        let mu: f64 = mus.iter().sum();
        for (k, m) in mus.iter().enumerate() {
            for &e in &self.eps {
                let p = m / mu + e;
                if !(-1e-12..=1.0 + 1e-12).contains(&p) {
                    return Err(PolicyError::ChiOutOfRange { chi: self.chi, station: k, prob: p });
                }
            }
        }
        Ok(())
    }
}

/// Default balanced scheme for `s` stations with capacities `mus`.
pub fn default_perturbation(mus: &[f64], chi: f64) -> Result<PerturbationScheme, PolicyError> {
    PerturbationScheme::balanced(mus, chi)
}

/// Origin-unaware destination: station `k` such that the uniform `u` falls in
/// `[kappa_{k-1}, kappa_k)` with `kappa_k = sum_{l<=k} (mu_l/mu + eps[rank_of[l]])`.
#[inline]
pub fn destination_unaware(
    u: f64,
    ranking: &Ranking,
    mus: &[f64],
    scheme: &PerturbationScheme,
) -> usize {
    let s = mus.len();
    let mu: f64 = mus.iter().sum();
    let mut acc = 0.0;
    for k in 0..s - 1 {
        acc += mus[k] / mu + scheme.eps[ranking.rank_of[k]];
        if u < acc {
            return k;
        }
    }
    s - 1
}

/// Per-origin perturbation coefficients `eps_m[m][l]` for one ranking, indexed
/// by origin and rank.
pub type OriginPerturbations = Vec<Vec<f64>>;

/// Builds per-origin perturbation coefficients for every origin at once.
///
/// For each rank `l >= 1` the negative mass `-eps[l]` is spread over the
/// origins proportionally to `p_m`, capped so that no routing probability
/// `r[m][station] + eps_m[l]` leaves `[0, 1]`; capped excess is redistributed
/// over the remaining origins (ascending index for the final residual). The
/// rank-0 coefficient balances each origin's row to zero, which also keeps it
/// within its own cap because the plan rows sum to one.
pub fn origin_perturbations(
    ranking: &Ranking,
    plan: &RoutingPlan,
    probs: &[f64],
    scheme: &PerturbationScheme,
) -> Result<OriginPerturbations, PolicyError> {
    let b = plan.origins();
    let s = plan.stations();
    let mut eps_m = vec![vec![0.0; s]; b];
    // alloc[m] at each rank holds p_m * (-eps_m[l]) so that column sums match
    // the scheme exactly.
    let mut alloc = vec![0.0; b];
    for l in 1..s {
        let station = ranking.by_rank[l];
        let demand = -scheme.eps[l];
        alloc.iter_mut().for_each(|a| *a = 0.0);
        if demand > 0.0 {
            let mut remaining = demand;
            let mut active: Vec<usize> = (0..b).collect();
            while remaining > 1e-15 && !active.is_empty() {
                let wsum: f64 = active.iter().map(|&m| probs[m]).sum();
                let mut given = 0.0;
                let mut next = Vec::with_capacity(active.len());
                for &m in &active {
                    let cap = probs[m] * plan.r[m][station];
                    let want = remaining * probs[m] / wsum;
                    let grant = want.min(cap - alloc[m]);
                    if grant > 0.0 {
                        alloc[m] += grant;
                        given += grant;
                    }
                    if cap - alloc[m] > 1e-15 {
                        next.push(m);
                    }
                }
                remaining -= given;
                active = next;
                if given <= 0.0 {
                    break;
                }
            }
            if remaining > 1e-15 {
                // Push the leftover into the first origin with room; the caps
                // sum to mu_station/mu >= demand, so more than rounding noise
                // here means the plan was inconsistent.
                let mut residual = remaining;
                for m in 0..b {
                    let cap = probs[m] * plan.r[m][station];
                    let room = cap - alloc[m];
                    if room > 0.0 {
                        let grant = residual.min(room);
                        alloc[m] += grant;
                        residual -= grant;
                        if residual <= 0.0 {
                            break;
                        }
                    }
                }
                if residual > 1e-9 {
                    return Err(PolicyError::InfeasibleAllocation { rank: l, residual });
                }
            }
        }
        for m in 0..b {
            eps_m[m][l] = -alloc[m] / probs[m];
        }
    }
    for row in eps_m.iter_mut() {
        row[0] = -row[1..].iter().sum::<f64>();
    }
    Ok(eps_m)
}

/// Per-origin coefficients for a single origin (see [`origin_perturbations`]).
pub fn origin_perturbation(
    ranking: &Ranking,
    origin: usize,
    plan: &RoutingPlan,
    probs: &[f64],
    scheme: &PerturbationScheme,
) -> Result<Vec<f64>, PolicyError> {
    Ok(origin_perturbations(ranking, plan, probs, scheme)?.swap_remove(origin))
}

/// Origin-aware destination: thresholds accumulate `r[m][l] + eps_m[rank_of[l]]`.
#[inline]
pub fn destination_aware(
    u: f64,
    ranking: &Ranking,
    origin: usize,
    plan: &RoutingPlan,
    eps_m: &[f64],
) -> usize {
    let s = plan.stations();
    let row = &plan.r[origin];
    let mut acc = 0.0;
    for k in 0..s - 1 {
        acc += row[k] + eps_m[ranking.rank_of[k]];
        if u < acc {
            return k;
        }
    }
    s - 1
}

/// Join the (weighted) shortest queue.
pub fn destination_jsq(snapshot: &QueueSnapshot, tie_rule: TieRule, rng: &mut StreamRng) -> usize {
    rank(snapshot, tie_rule, rng).shortest()
}

/// Diversion semantics for [`destination_tolerance_geo`].
#[derive(Clone, Copy, Debug)]
pub enum ToleranceMode<'a> {
    /// Divert whenever the extra delay fits the tolerance.
    Deterministic,
    /// Divert border customers with probability `chi / p_prime[shortest]`.
    Probabilistic { chi: f64, p_prime: &'a [f64] },
}

/// Geographic tolerance rule: send the customer to the shortest queue if the
/// traveling delay there exceeds the delay to the nearest station by at most
/// `tau_bar` (deterministically, or with the border-calibrated probability),
/// otherwise to the nearest station.
pub fn destination_tolerance_geo(
    delays: &[f64],
    snapshot: &QueueSnapshot,
    tau_bar: f64,
    mode: ToleranceMode<'_>,
    tie_rule: TieRule,
    rng: &mut StreamRng,
) -> usize {
    let mut nearest = 0;
    for k in 1..delays.len() {
        if delays[k] < delays[nearest] {
            nearest = k;
        }
    }
    let shortest = destination_jsq(snapshot, tie_rule, rng);
    if shortest == nearest {
        return nearest;
    }
    if !(delays[shortest] <= delays[nearest] + tau_bar) {
        return nearest;
    }
    match mode {
        ToleranceMode::Deterministic => shortest,
        ToleranceMode::Probabilistic { chi, p_prime } => {
            let p = p_prime[shortest];
            if p > 0.0 && rng.random::<f64>() < chi / p {
                shortest
            } else {
                nearest
            }
        }
    }
}
