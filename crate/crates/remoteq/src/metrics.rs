//! Estimators and statistics: time-averaged customer counts, the load
//! imbalance supremum, an oscillation diagnostic, and across-replication
//! confidence intervals (replication/deletion with Student-t half-widths).

use crate::engine::SampleStats;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty window: [{0}, {1})")]
    EmptyWindow(f64, f64),
    #[error("window [{lo}, {hi}) not covered by the trajectory (ends at {end})")]
    WindowNotCovered { lo: f64, hi: f64, end: f64 },
    #[error("insufficient samples: have {have}, need at least {need}")]
    InsufficientSamples { have: usize, need: usize },
}

/// Mean and 95% Student-t half-width over replications.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub count: usize,
}

impl Estimate {
    pub fn contains(&self, value: f64) -> bool {
        (self.mean - value).abs() <= self.half_width
    }

    pub fn relative_half_width(&self) -> f64 {
        self.half_width / self.mean.abs()
    }
}

/// 95% confidence estimate from i.i.d. replication values.
pub fn mean_ci(values: &[f64]) -> Estimate {
    assert!(!values.is_empty(), "mean_ci needs at least one value");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Estimate { mean, half_width: 0.0, count: n };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    Estimate { mean, half_width: t * se, count: n }
}

/// Names of the scalar metrics carried by [`SampleStats`].
pub const METRICS: &[&str] = &[
    "mtcc",
    "mean_wait",
    "mean_travel",
    "mean_time_to_service",
    "imbalance_sup",
    "diverted_fraction",
];

fn metric_value(stats: &SampleStats, name: &str) -> f64 {
    match name {
        "mtcc" => stats.mtcc,
        "mean_wait" => stats.mean_wait,
        "mean_travel" => stats.mean_travel,
        "mean_time_to_service" => stats.mean_time_to_service,
        "imbalance_sup" => stats.imbalance_sup,
        "diverted_fraction" => stats.diverted_fraction,
        _ => f64::NAN,
    }
}

/// Aggregates replication summaries into per-metric estimates. The result is
/// independent of the order of the summaries.
pub fn aggregate(summaries: &[SampleStats]) -> BTreeMap<String, Estimate> {
    let mut out = BTreeMap::new();
    if summaries.is_empty() {
        return out;
    }
    for name in METRICS {
        let values: Vec<f64> = summaries.iter().map(|s| metric_value(s, name)).collect();
        out.insert((*name).to_string(), mean_ci(&values));
    }
    for k in 0..summaries[0].utilization.len() {
        let values: Vec<f64> = summaries.iter().map(|s| s.utilization[k]).collect();
        out.insert(format!("utilization_{k}"), mean_ci(&values));
    }
    out
}

/// Right-continuous step function: `values[i]` holds on `[times[i], times[i+1])`
/// and the last value holds from `times.last()` on.
#[derive(Clone, Debug, Default)]
pub struct StepSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepSeries {
    pub fn push(&mut self, t: f64, v: f64) {
        self.times.push(t);
        self.values.push(v);
    }
}

/// Time-weighted average of a step series over `[lo, hi)`. Exact for
/// piecewise-constant inputs and invariant to refining the sampling with
/// redundant breakpoints.
pub fn time_average(series: &StepSeries, window: (f64, f64)) -> Result<f64, MetricsError> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(MetricsError::EmptyWindow(lo, hi));
    }
    if series.times.is_empty() || series.times[0] > lo {
        return Err(MetricsError::WindowNotCovered {
            lo,
            hi,
            end: series.times.first().copied().unwrap_or(f64::NAN),
        });
    }
    let mut integral = 0.0;
    for i in 0..series.times.len() {
        let start = series.times[i];
        let end = if i + 1 < series.times.len() { series.times[i + 1] } else { hi };
        let a = start.max(lo);
        let b = end.min(hi);
        if b > a {
            integral += (b - a) * series.values[i];
        }
        if start >= hi {
            break;
        }
    }
    Ok(integral / (hi - lo))
}

/// Time-weighted mean total customer count over the window.
pub fn mtcc(total_counts: &StepSeries, window: (f64, f64)) -> Result<f64, MetricsError> {
    time_average(total_counts, window)
}

/// Supremum over the window of the maximum pairwise difference of weighted
/// queue lengths. `weighted[i]` is the per-station vector holding on
/// `[times[i], times[i+1])`; exact because counts are piecewise constant.
pub fn load_imbalance_sup(
    times: &[f64],
    weighted: &[Vec<f64>],
    window: (f64, f64),
) -> Result<f64, MetricsError> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(MetricsError::EmptyWindow(lo, hi));
    }
    let mut sup = 0.0_f64;
    for i in 0..times.len() {
        let start = times[i];
        let end = if i + 1 < times.len() { times[i + 1] } else { hi };
        if end.min(hi) > start.max(lo) {
            let row = &weighted[i];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            sup = sup.max(max - min);
        }
    }
    Ok(sup)
}

/// Periodicity score in `[0, 1]`: the peak of the normalized autocorrelation
/// of the (demeaned) samples over lags of at least `min_lag` time units.
/// White noise scores near zero; a pure periodic signal scores near one.
pub fn oscillation_index(samples: &[f64], dt: f64, min_lag: f64) -> Result<f64, MetricsError> {
    let n = samples.len();
    let lag_min = ((min_lag / dt).ceil() as usize).max(1);
    let lag_max = n / 2;
    if lag_max <= lag_min || n - lag_min < 32 {
        return Err(MetricsError::InsufficientSamples { have: n, need: 2 * lag_min.max(16) });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let denom: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for lag in lag_min..=lag_max {
        let mut acc = 0.0;
        for i in 0..n - lag {
            acc += (samples[i] - mean) * (samples[i + lag] - mean);
        }
        // normalize by the full-sample variance so the score is comparable
        // across lags
        let r = acc / denom * n as f64 / (n - lag) as f64;
        best = best.max(r);
    }
    Ok(best.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::{derive_stream, DistDescriptor, StreamLabel, StreamPurpose};
    use rand::Rng;

    #[test]
    fn time_average_of_constant_series() {
        let series = StepSeries { times: vec![0.0, 2.0], values: vec![5.0, 5.0] };
        assert_eq!(time_average(&series, (0.0, 10.0)).unwrap(), 5.0);
    }

    #[test]
    fn mtcc_constant_vector_case() {
        // constant Q = (3, 2): total 5 over any window
        let series = StepSeries { times: vec![0.0], values: vec![5.0] };
        assert_eq!(mtcc(&series, (1.0, 7.0)).unwrap(), 5.0);
    }

    #[test]
    fn time_average_is_linear_and_refinement_invariant() {
        let coarse = StepSeries { times: vec![0.0, 1.0, 3.0], values: vec![1.0, 4.0, 2.0] };
        // refined with redundant breakpoints
        let fine = StepSeries {
            times: vec![0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0],
            values: vec![1.0, 1.0, 4.0, 4.0, 4.0, 2.0, 2.0],
        };
        let w = (0.0, 5.0);
        let a = time_average(&coarse, w).unwrap();
        let b = time_average(&fine, w).unwrap();
        assert!((a - b).abs() < 1e-12);
        // linearity: scaling values scales the average
        let scaled = StepSeries {
            times: coarse.times.clone(),
            values: coarse.values.iter().map(|v| 3.0 * v).collect(),
        };
        assert!((time_average(&scaled, w).unwrap() - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_an_error() {
        let series = StepSeries { times: vec![0.0], values: vec![1.0] };
        assert!(mtcc(&series, (5.0, 5.0)).is_err());
    }

    #[test]
    fn imbalance_sup_trivial_cases() {
        let times = vec![0.0, 1.0, 2.0];
        let equal = vec![vec![2.0, 2.0]; 3];
        assert_eq!(load_imbalance_sup(&times, &equal, (0.0, 3.0)).unwrap(), 0.0);

        let spiky = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![1.0, 1.0]];
        let sup = load_imbalance_sup(&times, &spiky, (0.0, 3.0)).unwrap();
        assert!(sup >= 4.0);
    }

    #[test]
    fn imbalance_sup_monotone_in_window() {
        let times: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut rng = derive_stream(
            3,
            StreamLabel { purpose: StreamPurpose::RoutingUniform, replication: 0 },
        );
        let weighted: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0])
            .collect();
        let inner = load_imbalance_sup(&times, &weighted, (20.0, 50.0)).unwrap();
        let outer = load_imbalance_sup(&times, &weighted, (10.0, 80.0)).unwrap();
        assert!(outer >= inner);
    }

    #[test]
    fn aggregate_reference_values() {
        let values = [1.0, 3.0];
        let est = mean_ci(&values);
        assert_eq!(est.mean, 2.0);
        assert_eq!(est.count, 2);
        // t(0.975, 1 dof) = 12.706; se = 1
        assert!((est.half_width - 12.706).abs() < 0.01, "{}", est.half_width);

        let same = [4.2; 10];
        let est = mean_ci(&same);
        assert_eq!(est.mean, 4.2);
        assert_eq!(est.half_width, 0.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut stats: Vec<crate::engine::SampleStats> = (0..8)
            .map(|i| crate::engine::SampleStats {
                replication: i,
                mtcc: i as f64,
                mean_wait: 2.0 * i as f64,
                utilization: vec![0.5, 0.9],
                ..Default::default()
            })
            .collect();
        let fwd = aggregate(&stats);
        stats.reverse();
        let rev = aggregate(&stats);
        assert_eq!(fwd, rev);
        assert!((fwd["mtcc"].mean - 3.5).abs() < 1e-12);
    }

    #[test]
    fn oscillation_index_white_noise_scores_low() {
        let mut rng = derive_stream(
            17,
            StreamLabel { purpose: StreamPurpose::RoutingUniform, replication: 0 },
        );
        let gauss = DistDescriptor::Exponential.compile().unwrap();
        let samples: Vec<f64> = (0..4096).map(|_| gauss.sample(&mut rng) - 1.0).collect();
        let score = oscillation_index(&samples, 1.0, 50.0).unwrap();
        assert!(score < 0.2, "white noise score {score}");
    }

    #[test]
    fn oscillation_index_sinusoid_scores_high() {
        let samples: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 200.0).sin())
            .collect();
        let score = oscillation_index(&samples, 1.0, 50.0).unwrap();
        assert!(score > 0.9, "sinusoid score {score}");
    }

    #[test]
    fn oscillation_index_needs_enough_samples() {
        let samples = vec![0.0; 40];
        assert!(oscillation_index(&samples, 1.0, 30.0).is_err());
    }
}
