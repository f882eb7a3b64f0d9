use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonnegative random duration in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDist {
    #[default]
    Zero,
    Fixed { value: f64 },
    Exponential { mean: f64 },
    /// `scale * |N(0, 1)|`.
    HalfNormal { scale: f64 },
}

impl DelayDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayDist::Zero => 0.0,
            DelayDist::Fixed { value } => value,
            DelayDist::Exponential { mean } => {
                if mean == 0.0 {
                    0.0
                } else {
                    Exp::new(1.0 / mean).expect("validated rate").sample(rng)
                }
            }
            DelayDist::HalfNormal { scale } => scale * sample_worker_delay(rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            DelayDist::Zero => 0.0,
            DelayDist::Fixed { value } => value,
            DelayDist::Exponential { mean } => mean,
            DelayDist::HalfNormal { scale } => scale,
        };
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid delay distribution {self:?}")))
        }
    }
}

/// Standard normal truncated to `[0, inf)`, drawn by rejection.
pub fn sample_worker_delay<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x >= 0.0 {
            return x;
        }
    }
}

/// Timing model of the cluster.
///
/// Worker `k` needs `base_compute * (1 + delay_scale * k_del[k])` simulated
/// seconds per gradient, with `k_del[k]` drawn once per run by
/// [`sample_worker_delay`]. Every message, in either direction, additionally
/// incurs an independent `latency` draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub base_compute: f64,
    pub delay_scale: f64,
    pub latency: DelayDist,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            base_compute: 1.0,
            delay_scale: 1.0,
            latency: DelayDist::Zero,
        }
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_compute.is_finite() && self.base_compute > 0.0) {
            return Err(Error::InvalidParameter("base compute time must be > 0".into()));
        }
        if !(self.delay_scale.is_finite() && self.delay_scale >= 0.0) {
            return Err(Error::InvalidParameter("delay scale must be >= 0".into()));
        }
        self.latency.validate()
    }

    /// Per-gradient compute times of `workers` workers.
    pub fn compute_times<R: Rng + ?Sized>(&self, workers: usize, rng: &mut R) -> Vec<f64> {
        (0..workers)
            .map(|_| self.base_compute * (1.0 + self.delay_scale * sample_worker_delay(rng)))
            .collect()
    }
}
