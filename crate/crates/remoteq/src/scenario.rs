//! Scenario configuration: domain types, validation, and the heavy-traffic
//! parameter mapping shared by every other module.
//!
//! All times are in minutes and all rates per minute. Traveling delay vectors
//! are either *primitive* (multiplied by `sqrt(n)` when the scenario is
//! built) or *literal* minutes; one flag per scenario, never mixed.

use crate::stochastics::DistDescriptor;
use serde::{Deserialize, Serialize};

/// Tolerance for routing-plan and capacity identities.
pub const PLAN_TOL: f64 = 1e-9;
/// Tolerance for probability sums.
pub const PROB_TOL: f64 = 1e-12;

/// One single-server FCFS station.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationConfig {
    /// Service rate `mu_k` (customers per minute).
    pub service_rate: f64,
    /// Service-requirement distribution, normalized to mean 1.
    #[serde(default = "DistDescriptor::exponential")]
    pub service_dist: DistDescriptor,
}

/// A customer origin: its probability mass and delay vector (one entry per
/// station).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OriginSpec {
    pub probability: f64,
    pub delays: Vec<f64>,
}

/// Rectangular service region with stations at fixed coordinates. Customers
/// appear uniformly in the region and walk straight to their destination, so
/// the traveling delay is distance divided by speed, in literal minutes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeographicSpec {
    /// Lower-left corner, km.
    pub min: [f64; 2],
    /// Upper-right corner, km.
    pub max: [f64; 2],
    /// Station coordinates, km.
    pub station_coords: Vec<[f64; 2]>,
    /// Travel speed, km per minute.
    pub speed: f64,
}

impl GeographicSpec {
    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Delay in minutes from a point to station `k`.
    #[inline]
    pub fn delay_to(&self, point: [f64; 2], k: usize) -> f64 {
        let dx = point[0] - self.station_coords[k][0];
        let dy = point[1] - self.station_coords[k][1];
        (dx * dx + dy * dy).sqrt() / self.speed
    }

    /// Fills `out` with the delay vector of a point.
    #[inline]
    pub fn delays_at(&self, point: [f64; 2], out: &mut [f64]) {
        for k in 0..self.station_coords.len() {
            out[k] = self.delay_to(point, k);
        }
    }
}

/// Where customers come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origins {
    Discrete {
        origins: Vec<OriginSpec>,
        /// When true, delay vectors are primitive and are scaled by
        /// `sqrt(n)` at scenario build; otherwise they are literal minutes.
        #[serde(default)]
        scaled: bool,
    },
    Geographic(GeographicSpec),
}

/// Long-run routing proportions `r[m][k]` from origin `m` to station `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub r: Vec<Vec<f64>>,
}

impl RoutingPlan {
    pub fn origins(&self) -> usize {
        self.r.len()
    }

    pub fn stations(&self) -> usize {
        self.r.first().map_or(0, Vec::len)
    }

    /// Entry-range and row-sum checks.
    pub fn basic_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (m, row) in self.r.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if !v.is_finite() || *v < -PLAN_TOL || *v > 1.0 + PLAN_TOL {
                    out.push(format!("plan entry r[{m}][{k}] = {v} outside [0, 1]"));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PLAN_TOL {
                out.push(format!("plan row {m} sums to {sum}, expected 1"));
            }
        }
        out
    }

    /// Heavy-traffic consistency: `sum_m p_m r[m][k] mu == mu_k` per station.
    pub fn heavy_traffic_violations(&self, probs: &[f64], mus: &[f64]) -> Vec<String> {
        let mu: f64 = mus.iter().sum();
        let mut out = Vec::new();
        for k in 0..self.stations() {
            let flow: f64 = (0..self.origins())
                .map(|m| probs[m] * self.r[m][k] * mu)
                .sum();
            if (flow - mus[k]).abs() > PLAN_TOL {
                out.push(format!(
                    "heavy-traffic violation at station {k}: capacity share {flow} != mu_k {}",
                    mus[k]
                ));
            }
        }
        out
    }

    /// The origin-unaware plan `r[m][k] = mu_k / mu`.
    pub fn proportional(origins: usize, mus: &[f64]) -> Self {
        let mu: f64 = mus.iter().sum();
        let row: Vec<f64> = mus.iter().map(|m| m / mu).collect();
        RoutingPlan { r: vec![row; origins] }
    }
}

/// Appearance process parameters. Either `rho` or `appearance_rate` must be
/// given; the other is derived from the total capacity. `n` defaults to
/// `1 / (1 - rho)^2` and may be overridden for non-unit heavy-traffic slack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrafficSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(default = "DistDescriptor::exponential")]
    pub interappearance_dist: DistDescriptor,
}

/// Tie-breaking for queue-length rankings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    LowestIndex,
    Random,
}

/// Diversion semantics for the geographic tolerance rule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoMode {
    /// Divert to the shortest queue whenever the extra delay fits the
    /// tolerance.
    #[default]
    Deterministic,
    /// Divert border customers with probability `chi / p'_l`.
    Probabilistic { chi: f64 },
}

/// Dispatcher rule and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Jsq,
    RandomProportional,
    RjsqUnaware {
        chi: f64,
    },
    RjsqAware {
        chi: f64,
        plan: RoutingPlan,
    },
    ToleranceGeo {
        #[serde(deserialize_with = "de_tau_bar")]
        tau_bar: f64,
        #[serde(default)]
        mode: GeoMode,
    },
}

// Accepts a number or the string "inf" for the tolerance.
fn de_tau_bar<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!(
            "tau_bar must be a number or \"inf\", got {s:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub tie_rule: TieRule,
}

impl PolicySpec {
    pub fn jsq() -> Self {
        PolicySpec { kind: PolicyKind::Jsq, tie_rule: TieRule::default() }
    }

    pub fn rjsq(chi: f64) -> Self {
        PolicySpec { kind: PolicyKind::RjsqUnaware { chi }, tie_rule: TieRule::default() }
    }

    /// The configured balancing fraction, if the rule has one.
    pub fn chi(&self) -> Option<f64> {
        match &self.kind {
            PolicyKind::RjsqUnaware { chi } | PolicyKind::RjsqAware { chi, .. } => Some(*chi),
            PolicyKind::ToleranceGeo { mode: GeoMode::Probabilistic { chi }, .. } => Some(*chi),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            PolicyKind::Jsq => "jsq",
            PolicyKind::RandomProportional => "random_proportional",
            PolicyKind::RjsqUnaware { .. } => "rjsq_unaware",
            PolicyKind::RjsqAware { .. } => "rjsq_aware",
            PolicyKind::ToleranceGeo { .. } => "tolerance_geo",
        }
    }
}

/// Full description of one system instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
    pub stations: Vec<StationConfig>,
    pub origins: Origins,
    pub traffic: TrafficSpec,
    pub policy: PolicySpec,
    pub horizon_min: f64,
    #[serde(default)]
    pub burnin_min: f64,
    pub seed: u64,
    /// Optional trajectory sampling interval in minutes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_dt: Option<f64>,
    /// Record the full event log of each replication (debugging and replay
    /// checks; expensive on long horizons).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub event_log: bool,
}

impl ScenarioConfig {
    pub fn total_capacity(&self) -> f64 {
        self.stations.iter().map(|s| s.service_rate).sum()
    }

    pub fn station_rates(&self) -> Vec<f64> {
        self.stations.iter().map(|s| s.service_rate).collect()
    }

    /// Traffic intensity `lambda / mu`.
    pub fn rho(&self) -> Option<f64> {
        match (self.traffic.rho, self.traffic.appearance_rate) {
            (Some(r), _) => Some(r),
            (None, Some(lambda)) => Some(lambda / self.total_capacity()),
            (None, None) => None,
        }
    }

    pub fn appearance_rate(&self) -> Option<f64> {
        match (self.traffic.appearance_rate, self.traffic.rho) {
            (Some(l), _) => Some(l),
            (None, Some(rho)) => Some(rho * self.total_capacity()),
            (None, None) => None,
        }
    }

    /// Heavy-traffic index; defaults to `1 / (1 - rho)^2`.
    pub fn heavy_traffic_n(&self) -> Option<f64> {
        if let Some(n) = self.traffic.n {
            return Some(n);
        }
        self.rho().and_then(|rho| n_from_rho(rho).ok())
    }

    /// Uniform label for result tables: the common literal delay when all
    /// origin-station delays agree, otherwise empty.
    pub fn delay_label(&self) -> Option<f64> {
        match &self.origins {
            Origins::Discrete { origins, scaled } => {
                let first = *origins.first()?.delays.first()?;
                let all_equal = origins
                    .iter()
                    .all(|o| o.delays.iter().all(|d| (*d - first).abs() <= 1e-12));
                if !all_equal {
                    return None;
                }
                if *scaled {
                    Some(first * self.heavy_traffic_n()?.sqrt())
                } else {
                    Some(first)
                }
            }
            Origins::Geographic(_) => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("rho = {0} outside (0, 1)")]
    RhoOutOfRange(f64),
}

/// Heavy-traffic index for a given traffic intensity, `n = 1/(1-rho)^2`.
pub fn n_from_rho(rho: f64) -> Result<f64, DomainError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DomainError::RhoOutOfRange(rho));
    }
    Ok(1.0 / ((1.0 - rho) * (1.0 - rho)))
}

/// One violated invariant, with a human-readable reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(out: &mut Vec<Violation>, field: &str, message: String) {
    out.push(Violation { field: field.to_string(), message });
}

/// Checks every scenario invariant and returns the violations found; an
/// empty list means the scenario is valid. Pure and idempotent.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let s = cfg.stations.len();

    if s == 0 {
        violation(&mut out, "stations", "at least one station is required".into());
    }
    for (k, st) in cfg.stations.iter().enumerate() {
        if !(st.service_rate.is_finite() && st.service_rate > 0.0) {
            violation(
                &mut out,
                "stations",
                format!("station {k} service_rate {} must be positive", st.service_rate),
            );
        }
        if let Err(e) = st.service_dist.validate() {
            violation(&mut out, "stations", format!("station {k} service_dist: {e}"));
        }
    }

    match &cfg.origins {
        Origins::Discrete { origins, .. } => {
            if origins.is_empty() {
                violation(&mut out, "origins", "at least one origin is required".into());
            }
            let mut psum = 0.0;
            for (m, o) in origins.iter().enumerate() {
                if !(o.probability.is_finite() && o.probability > 0.0 && o.probability <= 1.0) {
                    violation(
                        &mut out,
                        "origins",
                        format!("origin {m} probability {} outside (0, 1]", o.probability),
                    );
                }
                psum += o.probability;
                if o.delays.len() != s {
                    violation(
                        &mut out,
                        "origins",
                        format!("origin {m} has {} delays, expected {s}", o.delays.len()),
                    );
                }
                for (k, d) in o.delays.iter().enumerate() {
                    if !(d.is_finite() && *d >= 0.0) {
                        violation(
                            &mut out,
                            "origins",
                            format!("origin {m} delay to station {k} is {d}"),
                        );
                    }
                }
            }
            if !origins.is_empty() && (psum - 1.0).abs() > PROB_TOL {
                violation(
                    &mut out,
                    "origins",
                    format!("origin probabilities sum to {psum}, expected 1 within {PROB_TOL}"),
                );
            }
        }
        Origins::Geographic(geo) => {
            if !(geo.speed.is_finite() && geo.speed > 0.0) {
                violation(&mut out, "origins", format!("speed {} must be positive", geo.speed));
            }
            if geo.width() <= 0.0 || geo.height() <= 0.0 {
                violation(&mut out, "origins", "region must have positive area".into());
            }
            if geo.station_coords.len() != s {
                violation(
                    &mut out,
                    "origins",
                    format!(
                        "geographic spec has {} station coordinates, expected {s}",
                        geo.station_coords.len()
                    ),
                );
            }
            for (k, c) in geo.station_coords.iter().enumerate() {
                let inside = c[0] >= geo.min[0]
                    && c[0] <= geo.max[0]
                    && c[1] >= geo.min[1]
                    && c[1] <= geo.max[1];
                if !inside {
                    violation(
                        &mut out,
                        "origins",
                        format!("station {k} at ({}, {}) lies outside the region", c[0], c[1]),
                    );
                }
            }
        }
    }

    match cfg.rho() {
        None => violation(
            &mut out,
            "traffic",
            "either rho or appearance_rate must be given".into(),
        ),
        Some(rho) => {
            if !(rho.is_finite() && rho > 0.0 && rho < 1.0) {
                violation(
                    &mut out,
                    "traffic",
                    format!("traffic intensity rho = {rho} must lie in (0, 1)"),
                );
            }
        }
    }
    if let Err(e) = cfg.traffic.interappearance_dist.validate() {
        violation(&mut out, "traffic", format!("interappearance_dist: {e}"));
    }
    if let Some(n) = cfg.traffic.n {
        if !(n.is_finite() && n > 0.0) {
            violation(&mut out, "traffic", format!("n = {n} must be positive"));
        }
    }

    let needs_two = !matches!(cfg.policy.kind, PolicyKind::RandomProportional);
    if needs_two && s < 2 {
        violation(
            &mut out,
            "policy",
            format!("{} requires at least 2 stations", cfg.policy.name()),
        );
    }
    let mus = cfg.station_rates();
    match &cfg.policy.kind {
        PolicyKind::RjsqUnaware { chi } | PolicyKind::RjsqAware { chi, .. } => {
            if let Err(e) = crate::policy::PerturbationScheme::balanced(&mus, *chi) {
                violation(&mut out, "policy", e.to_string());
            }
        }
        _ => {}
    }
    match &cfg.policy.kind {
        PolicyKind::RjsqAware { plan, .. } => match &cfg.origins {
            Origins::Discrete { origins, .. } => {
                if plan.origins() != origins.len() || plan.stations() != s {
                    violation(
                        &mut out,
                        "policy",
                        format!(
                            "plan shape {}x{} does not match {} origins x {s} stations",
                            plan.origins(),
                            plan.stations(),
                            origins.len()
                        ),
                    );
                } else {
                    for msg in plan.basic_violations() {
                        violation(&mut out, "policy", msg);
                    }
                    let probs: Vec<f64> = origins.iter().map(|o| o.probability).collect();
                    for msg in plan.heavy_traffic_violations(&probs, &mus) {
                        violation(&mut out, "policy", msg);
                    }
                }
            }
            Origins::Geographic(_) => violation(
                &mut out,
                "policy",
                "origin-aware routing requires discrete origins".into(),
            ),
        },
        PolicyKind::ToleranceGeo { tau_bar, mode } => {
            if !matches!(cfg.origins, Origins::Geographic(_)) {
                violation(
                    &mut out,
                    "policy",
                    "tolerance_geo requires a geographic origin spec".into(),
                );
            }
            if tau_bar.is_nan() || *tau_bar < 0.0 {
                violation(&mut out, "policy", format!("tau_bar {tau_bar} must be >= 0"));
            }
            if let GeoMode::Probabilistic { chi } = mode {
                if !(chi.is_finite() && *chi > 0.0) {
                    violation(
                        &mut out,
                        "policy",
                        format!("probabilistic diversion chi {chi} must be positive"),
                    );
                }
            }
        }
        _ => {}
    }

    if !(cfg.horizon_min.is_finite() && cfg.horizon_min > 0.0) {
        violation(&mut out, "horizon_min", format!("horizon {} must be positive", cfg.horizon_min));
    }
    if !(cfg.burnin_min.is_finite() && cfg.burnin_min >= 0.0 && cfg.burnin_min < cfg.horizon_min) {
        violation(
            &mut out,
            "burnin_min",
            format!("burnin {} must satisfy 0 <= burnin < horizon", cfg.burnin_min),
        );
    }
    if let Some(dt) = cfg.sample_dt {
        if !(dt.is_finite() && dt > 0.0) {
            violation(&mut out, "sample_dt", format!("sample_dt {dt} must be positive"));
        }
    }

    out
}
