//! Deterministic, label-addressed random streams and unit-mean distributions.
//!
//! Every source of randomness in a replication is a separate stream derived
//! from `(base_seed, purpose, replication_index)`. Streams are independent by
//! label, never by draw order: consuming extra values from one stream never
//! shifts another. This is what lets a reference pool replay the exact draws
//! of the distributed system, and what makes replications reproducible across
//! thread schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Random generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// What a stream is consumed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Normalized inter-appearance times.
    Interappearance,
    /// Service requirements drawn for station `k` (0-based). When all
    /// stations share one service distribution, stream `Service(0)` is used
    /// for every customer so that the draw sequence does not depend on the
    /// routing policy.
    Service(u32),
    /// Uniforms consumed by the dispatcher (destination draws, tie-breaks,
    /// diversion coins).
    RoutingUniform,
    /// Discrete origin selection.
    OriginDraw,
    /// Geographic location sampling.
    LocationDraw,
}

impl StreamPurpose {
    fn code(self) -> u64 {
        match self {
            StreamPurpose::Interappearance => 0,
            StreamPurpose::RoutingUniform => 1,
            StreamPurpose::OriginDraw => 2,
            StreamPurpose::LocationDraw => 3,
            StreamPurpose::Service(k) => 0x100 + u64::from(k),
        }
    }
}

/// Identifies one random stream within an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamLabel {
    pub purpose: StreamPurpose,
    pub replication: u64,
}

/// SplitMix64 finalizer; one full avalanche round.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent generator for `(base_seed, label)`.
///
/// The 256-bit ChaCha key is expanded from a SplitMix64 chain over the base
/// seed, the purpose code, and the replication index, so the mapping is a
/// pure function of its inputs and identical on every platform.
pub fn derive_stream(base_seed: u64, label: StreamLabel) -> StreamRng {
    let mut state = splitmix64(base_seed ^ 0xA076_1D64_78BD_642F);
    state = splitmix64(state ^ label.purpose.code());
    state = splitmix64(state ^ label.replication);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Descriptor of a nonnegative distribution normalized to mean 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistDescriptor {
    Exponential,
    Deterministic,
    Lognormal { mean: f64, variance: f64 },
    /// Mixture of exponentials: branch `i` is picked with `weights[i]` and
    /// sampled at `rates[i]`. The mixture mean must be 1.
    Hyperexponential { weights: Vec<f64>, rates: Vec<f64> },
}

/// Mean-1 tolerance for distribution descriptors.
pub const MEAN_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DistError {
    #[error("distribution mean is {mean}, expected 1 within {MEAN_TOL}")]
    MeanNotOne { mean: f64 },
    #[error("invalid distribution parameters: {0}")]
    BadParams(String),
}

impl DistDescriptor {
    /// Exponential with mean 1 (the default service/interappearance law).
    pub fn exponential() -> Self {
        DistDescriptor::Exponential
    }

    /// Lognormal with mean 1 and the given variance.
    pub fn lognormal_unit_mean(variance: f64) -> Self {
        DistDescriptor::Lognormal { mean: 1.0, variance }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DistDescriptor::Exponential | DistDescriptor::Deterministic => 1.0,
            DistDescriptor::Lognormal { mean, .. } => *mean,
            DistDescriptor::Hyperexponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w / r)
                .sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            DistDescriptor::Exponential => 1.0,
            DistDescriptor::Deterministic => 0.0,
            DistDescriptor::Lognormal { variance, .. } => *variance,
            DistDescriptor::Hyperexponential { weights, rates } => {
                let m: f64 = self.mean();
                let m2: f64 = weights
                    .iter()
                    .zip(rates)
                    .map(|(w, r)| 2.0 * w / (r * r))
                    .sum();
                m2 - m * m
            }
        }
    }

    /// Squared coefficient of variation.
    pub fn cv2(&self) -> f64 {
        let m = self.mean();
        self.variance() / (m * m)
    }

    pub fn validate(&self) -> Result<(), DistError> {
        match self {
            DistDescriptor::Lognormal { mean, variance } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return Err(DistError::BadParams(format!(
                        "lognormal variance {variance} must be finite and nonnegative"
                    )));
                }
                if !mean.is_finite() || *mean <= 0.0 {
                    return Err(DistError::BadParams(format!(
                        "lognormal mean {mean} must be finite and positive"
                    )));
                }
            }
            DistDescriptor::Hyperexponential { weights, rates } => {
                if weights.len() != rates.len() || weights.is_empty() {
                    return Err(DistError::BadParams(
                        "hyperexponential weights and rates must be nonempty and equal length"
                            .into(),
                    ));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                    || rates.iter().any(|r| !r.is_finite() || *r <= 0.0)
                {
                    return Err(DistError::BadParams(
                        "hyperexponential weights must be >= 0 and rates > 0".into(),
                    ));
                }
                let wsum: f64 = weights.iter().sum();
                if (wsum - 1.0).abs() > MEAN_TOL {
                    return Err(DistError::BadParams(format!(
                        "hyperexponential weights sum to {wsum}, expected 1"
                    )));
                }
            }
            _ => {}
        }
        let mean = self.mean();
        if (mean - 1.0).abs() > MEAN_TOL {
            return Err(DistError::MeanNotOne { mean });
        }
        if !self.variance().is_finite() {
            return Err(DistError::BadParams("variance is not finite".into()));
        }
        Ok(())
    }

    /// Compiles the descriptor into a sampler for the hot path.
    pub fn compile(&self) -> Result<Sampler, DistError> {
        self.validate()?;
        Ok(match self {
            DistDescriptor::Exponential => Sampler::Exponential,
            DistDescriptor::Deterministic => Sampler::Deterministic,
            DistDescriptor::Lognormal { mean, variance } => {
                // mean M, variance V: sigma^2 = ln(1 + V/M^2), mu = ln M - sigma^2/2
                let sigma2 = (1.0 + variance / (mean * mean)).ln();
                let mu = mean.ln() - sigma2 / 2.0;
                let inner = LogNormal::new(mu, sigma2.sqrt())
                    .map_err(|e| DistError::BadParams(e.to_string()))?;
                Sampler::Lognormal(inner)
            }
            DistDescriptor::Hyperexponential { weights, rates } => {
                let mut cum = Vec::with_capacity(weights.len());
                let mut acc = 0.0;
                for w in weights {
                    acc += w;
                    cum.push(acc);
                }
                Sampler::Hyperexponential { cum, rates: rates.clone() }
            }
        })
    }
}

/// Compiled sampler for a unit-mean distribution.
#[derive(Clone, Debug)]
pub enum Sampler {
    Deterministic,
    Exponential,
    Lognormal(LogNormal<f64>),
    Hyperexponential { cum: Vec<f64>, rates: Vec<f64> },
}

impl Sampler {
    #[inline]
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            Sampler::Deterministic => 1.0,
            Sampler::Exponential => {
                // inverse CDF; u in [0,1) keeps the argument of ln positive
                let u: f64 = rng.random();
                -(1.0 - u).ln()
            }
            Sampler::Lognormal(inner) => inner.sample(rng),
            Sampler::Hyperexponential { cum, rates } => {
                let u: f64 = rng.random();
                let mut idx = cum.len() - 1;
                for (i, c) in cum.iter().enumerate() {
                    if u < *c {
                        idx = i;
                        break;
                    }
                }
                let v: f64 = rng.random();
                -(1.0 - v).ln() / rates[idx]
            }
        }
    }
}

/// Draws one value from a normalized distribution descriptor.
///
/// Convenience wrapper; repeated sampling should go through [`DistDescriptor::compile`].
pub fn sample(dist: &DistDescriptor, rng: &mut StreamRng) -> Result<f64, DistError> {
    Ok(dist.compile()?.sample(rng))
}
