//! Worker behaviour: loyal stochastic gradients and Byzantine corruption.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};
use crate::sim::DelayDist;
use crate::tasks::Objective;

/// A gradient in flight from a worker to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage<T> {
    pub sender: usize,
    pub gradient: Vec<T>,
    /// Parameter version `t'` the gradient was computed on.
    pub base_version: u64,
    pub send_time: f64,
    pub arrive_time: f64,
    /// Whether the sender corrupted this gradient.
    pub attacked: bool,
}

impl<T> GradientMessage<T> {
    /// Delay of the message if it arrives when the server is at `iteration`.
    pub fn delay_at(&self, iteration: u64) -> u64 {
        iteration.saturating_sub(self.base_version)
    }
}

/// How `sigma^2 = ||scale * g||^2` is measured for random disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseNorm {
    /// Recomputed from every honest gradient.
    #[default]
    PerMessage,
    /// Fixed from the worker's first honest gradient.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Loyal,
    /// Sends `-k * g`.
    NegGrad { k: f64 },
    /// Sends `g + xi`, `xi_j ~ N(0, ||scale * g||^2)` i.i.d. per coordinate.
    RandDisturb { scale: f64, norm: NoiseNorm },
    /// Each coordinate is, with probability `prob`, replaced by its negation
    /// times `2^e` for `e` uniform in `-8..=8`.
    BitFlip { prob: f64 },
    /// Honest gradient held back by an extra transmission delay.
    Stale { extra_delay: DelayDist },
}

/// Iterations at which a Byzantine behaviour is switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Always,
    /// Active when the base version lies in one of the half-open ranges.
    Intervals { ranges: Vec<(u64, u64)> },
    /// Active independently per send with probability `p`.
    Probability { p: f64 },
}

impl Schedule {
    pub fn is_active<R: Rng + ?Sized>(&self, iteration: u64, rng: &mut R) -> bool {
        match self {
            Schedule::Always => true,
            Schedule::Intervals { ranges } => {
                ranges.iter().any(|&(lo, hi)| lo <= iteration && iteration < hi)
            }
            Schedule::Probability { p } => rng.random::<f64>() < *p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerBehavior {
    pub kind: AttackKind,
    pub schedule: Schedule,
    /// Copies of each gradient sent per compute.
    pub flood: u32,
}

impl Default for WorkerBehavior {
    fn default() -> Self {
        Self::loyal()
    }
}

impl WorkerBehavior {
    pub fn loyal() -> Self {
        Self {
            kind: AttackKind::Loyal,
            schedule: Schedule::Always,
            flood: 1,
        }
    }

    pub fn always(kind: AttackKind) -> Self {
        Self {
            kind,
            schedule: Schedule::Always,
            flood: 1,
        }
    }

    pub fn is_loyal(&self) -> bool {
        matches!(self.kind, AttackKind::Loyal)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        match &self.kind {
            AttackKind::NegGrad { k } if !(k.is_finite() && *k > 0.0) => {
                return bad("NG attack needs a finite k > 0")
            }
            AttackKind::RandDisturb { scale, .. } if !(scale.is_finite() && *scale > 0.0) => {
                return bad("RD attack needs a finite scale > 0")
            }
            AttackKind::BitFlip { prob } if !(0.0..=1.0).contains(prob) => {
                return bad("bit-flip probability must lie in [0, 1]")
            }
            AttackKind::Stale { extra_delay } => extra_delay.validate()?,
            _ => {}
        }
        match &self.schedule {
            Schedule::Probability { p } if !(0.0..=1.0).contains(p) => {
                return bad("schedule probability must lie in [0, 1]")
            }
            Schedule::Intervals { ranges } if ranges.iter().any(|(lo, hi)| lo > hi) => {
                return bad("schedule interval with start > end")
            }
            _ => {}
        }
        if self.flood == 0 {
            return bad("flood factor must be at least 1");
        }
        Ok(())
    }
}

/// Average of `batch` sampled instance gradients at `w`, indices drawn
/// uniformly with replacement from `shard`.
pub fn compute_loyal_gradient<T: Scalar, R: Rng + ?Sized>(
    objective: &Objective<T>,
    w: &[T],
    shard: &[usize],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if shard.is_empty() {
        return Err(Error::Config(vec!["worker shard is empty".into()]));
    }
    if w.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            found: w.len(),
        });
    }
    let batch = batch.max(1);
    let mut out = vec![T::zero(); w.len()];
    if batch == 1 {
        let i = shard[rng.random_range(0..shard.len())];
        objective.instance_gradient_into(w, i, &mut out);
        return Ok(out);
    }
    let mut g = vec![T::zero(); w.len()];
    for _ in 0..batch {
        let i = shard[rng.random_range(0..shard.len())];
        objective.instance_gradient_into(w, i, &mut g);
        out.iter_mut().zip(&g).for_each(|(o, &x)| *o += x);
    }
    let b = T::of(batch as f64);
    out.iter_mut().for_each(|o| *o /= b);
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
pub fn rand_disturb<T: Scalar, R: Rng + ?Sized>(g: &[T], sigma: T, rng: &mut R) -> Vec<T> {
    g.iter()
        .map(|&x| x + sigma * T::standard_normal(rng))
        .collect()
}

/// Applies the gradient corruption of `kind` to an honest gradient.
/// Loyal and stale behaviours return `g` unchanged.
pub fn apply_attack<T: Scalar, R: Rng + ?Sized>(kind: &AttackKind, g: &[T], rng: &mut R) -> Vec<T> {
    match kind {
        AttackKind::Loyal | AttackKind::Stale { .. } => g.to_vec(),
        AttackKind::NegGrad { k } => {
            let k = T::of(*k);
            g.iter().map(|&x| -k * x).collect()
        }
        AttackKind::RandDisturb { scale, .. } => {
            let sigma = T::of(*scale) * norm(g);
            rand_disturb(g, sigma, rng)
        }
        AttackKind::BitFlip { prob } => g
            .iter()
            .map(|&x| {
                if rng.random::<f64>() < *prob {
                    let e = rng.random_range(-8i32..=8);
                    -x * T::of(2f64.powi(e))
                } else {
                    x
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationClass {
    Loyal,
    Byzantine,
}

/// A message counts as loyal iff it was computed honestly and its delay at
/// `arrival_iteration` is at most `tau_max`.
pub fn classify_iteration<T>(
    msg: &GradientMessage<T>,
    arrival_iteration: u64,
    tau_max: u64,
) -> IterationClass {
    if !msg.attacked && msg.delay_at(arrival_iteration) <= tau_max {
        IterationClass::Loyal
    } else {
        IterationClass::Byzantine
    }
}

/// Mutable per-worker state driven by the simulation engine.
#[derive(Debug, Clone)]
pub struct Worker<T> {
    pub id: usize,
    pub shard: Vec<usize>,
    pub behavior: WorkerBehavior,
    pub batch: usize,
    /// Compute time per gradient in simulated seconds.
    pub compute_time: f64,
    params: Vec<T>,
    version: u64,
    sample_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    initial_norm: Option<T>,
}

/// Output of one worker compute.
#[derive(Debug, Clone)]
pub struct Computed<T> {
    pub gradient: Vec<T>,
    pub base_version: u64,
    pub attacked: bool,
}

impl<T: Scalar> Worker<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        shard: Vec<usize>,
        behavior: WorkerBehavior,
        batch: usize,
        compute_time: f64,
        params: Vec<T>,
        sample_rng: ChaCha8Rng,
        attack_rng: ChaCha8Rng,
    ) -> Self {
        Self {
            id,
            shard,
            behavior,
            batch,
            compute_time,
            params,
            version: 0,
            sample_rng,
            attack_rng,
            initial_norm: None,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Installs the latest parameters received from the server.
    pub fn receive(&mut self, params: &[T], version: u64) {
        self.params.clear();
        self.params.extend_from_slice(params);
        self.version = version;
    }

    /// Samples a gradient at the held parameters and applies the behaviour
    /// if its schedule is active for the held version.
    pub fn compute(&mut self, objective: &Objective<T>) -> Result<Computed<T>> {
        let honest = compute_loyal_gradient(
            objective,
            &self.params,
            &self.shard,
            self.batch,
            &mut self.sample_rng,
        )?;
        if self.initial_norm.is_none() {
            self.initial_norm = Some(norm(&honest));
        }
        if self.behavior.is_loyal()
            || !self.behavior.schedule.is_active(self.version, &mut self.attack_rng)
        {
            return Ok(Computed {
                gradient: honest,
                base_version: self.version,
                attacked: false,
            });
        }
        let gradient = match &self.behavior.kind {
            AttackKind::RandDisturb {
                scale,
                norm: NoiseNorm::Initial,
            } => {
                let sigma = T::of(*scale) * self.initial_norm.unwrap_or_else(T::zero);
                rand_disturb(&honest, sigma, &mut self.attack_rng)
            }
            kind => apply_attack(kind, &honest, &mut self.attack_rng),
        };
        Ok(Computed {
            gradient,
            base_version: self.version,
            attacked: !matches!(self.behavior.kind, AttackKind::Stale { .. }),
        })
    }

    /// Extra transmission delay for this send, if the behaviour is stale.
    pub fn extra_delay(&mut self) -> f64 {
        match &self.behavior.kind {
            AttackKind::Stale { extra_delay } => extra_delay.sample(&mut self.attack_rng),
            _ => 0.0,
        }
    }
}
