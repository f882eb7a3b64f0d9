//! The buffered asynchronous SGD server.
//!
//! Each arriving gradient goes to buffer `sender mod B`. Once every buffer has
//! received at least one gradient, the server aggregates the `B` buffer means,
//! takes one SGD step, zeroes the buffers and replies with the new parameters.
//! With `B = 1` and the mean rule every arrival triggers a step, which is plain
//! asynchronous SGD.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationRule;
use crate::buffer::BufferBank;
use crate::error::{Error, Result};
use crate::scalar::{norm_sq, Scalar};
use crate::worker::GradientMessage;

/// Step size as a function of the iteration count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `base * factor^k` after the `k`-th milestone has been passed.
    StepDecay {
        base: f64,
        milestones: Vec<u64>,
        factor: f64,
    },
    /// `1 / (L * sqrt(T))` for a horizon of `T` steps.
    InverseSqrt { smoothness: f64, horizon: u64 },
}

impl LearningRate {
    pub fn constant(eta: f64) -> Self {
        LearningRate::Constant { eta }
    }

    pub fn at(&self, t: u64) -> f64 {
        match self {
            LearningRate::Constant { eta } => *eta,
            LearningRate::StepDecay {
                base,
                milestones,
                factor,
            } => {
                let passed = milestones.iter().filter(|&&m| t >= m).count();
                base * factor.powi(passed as i32)
            }
            LearningRate::InverseSqrt { smoothness, horizon } => {
                1.0 / (smoothness * (*horizon as f64).sqrt())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let ok = match self {
            LearningRate::Constant { eta } => positive(*eta),
            LearningRate::StepDecay { base, factor, .. } => positive(*base) && positive(*factor),
            LearningRate::InverseSqrt { smoothness, horizon } => {
                positive(*smoothness) && *horizon > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid learning rate {self:?}")))
        }
    }
}

/// Emitted once per SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Iteration index `t` of the step, i.e. the version before the update.
    pub t: u64,
    pub eta: f64,
    /// `||G^t||^2`.
    pub aggregate_norm_sq: f64,
}

/// Server answer to one gradient message.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply<T> {
    pub params: Vec<T>,
    pub version: u64,
    pub step: Option<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct Server<T> {
    w: Vec<T>,
    t: u64,
    bank: BufferBank<T>,
    learning_rate: LearningRate,
    rule: AggregationRule,
}

impl<T: Scalar> Server<T> {
    pub fn new(
        w0: Vec<T>,
        buffers: usize,
        learning_rate: LearningRate,
        rule: AggregationRule,
    ) -> Result<Self> {
        learning_rate.validate()?;
        if let AggregationRule::TrimmedMean { q } = rule {
            if 2 * q >= buffers {
                return Err(Error::InvalidParameter(format!(
                    "trimmed mean needs q < B/2 (q = {q}, B = {buffers})"
                )));
            }
        }
        let bank = BufferBank::new(buffers, w0.len())?;
        Ok(Self {
            w: w0,
            t: 0,
            bank,
            learning_rate,
            rule,
        })
    }

    pub fn params(&self) -> &[T] {
        &self.w
    }

    /// Number of SGD steps executed so far.
    pub fn version(&self) -> u64 {
        self.t
    }

    pub fn bank(&self) -> &BufferBank<T> {
        &self.bank
    }

    pub fn buffers(&self) -> usize {
        self.bank.len()
    }

    pub fn rule(&self) -> AggregationRule {
        self.rule
    }

    pub fn learning_rate(&self) -> &LearningRate {
        &self.learning_rate
    }

    /// Routes `msg` to its buffer, steps if every buffer is non-empty, and
    /// returns the latest parameters. Non-finite gradient values are accepted
    /// as they come; the aggregation rule decides what survives.
    pub fn on_gradient(&mut self, msg: &GradientMessage<T>) -> Result<Reply<T>> {
        let b = self.bank.buffer_for(msg.sender);
        self.bank.accumulate(b, &msg.gradient)?;
        let step = if self.bank.all_ready() {
            Some(self.sgd_step()?)
        } else {
            None
        };
        Ok(Reply {
            params: self.w.clone(),
            version: self.t,
            step,
        })
    }

    /// `w <- w - eta(t) * Aggr(h_1..h_B)`, then `t <- t + 1` and zero-out.
    pub fn sgd_step(&mut self) -> Result<StepRecord> {
        if !self.bank.all_ready() {
            return Err(Error::NotReady {
                empty: self.bank.empty_buffers(),
            });
        }
        let g = self.rule.aggregate(&self.bank.candidates())?;
        let eta = self.learning_rate.at(self.t);
        let eta_t = T::of(eta);
        for (w, &gj) in self.w.iter_mut().zip(&g) {
            *w -= eta_t * gj;
        }
        let record = StepRecord {
            t: self.t,
            eta,
            aggregate_norm_sq: norm_sq(&g).to_f64_lossy(),
        };
        self.t += 1;
        self.bank.zero_out();
        Ok(record)
    }
}

/// Plain asynchronous SGD: every message updates `w <- w - eta(t) * g`.
///
/// Starts from `server`'s current state without modifying it and returns the
/// parameter trajectory, initial point included. Only defined for a
/// single-buffer mean server.
pub fn run_asgd_reference<T: Scalar>(
    server: &Server<T>,
    msgs: &[GradientMessage<T>],
) -> Result<Vec<Vec<T>>> {
    if server.buffers() != 1 || server.rule() != AggregationRule::Mean {
        return Err(Error::InvalidParameter(format!(
            "ASGD reference needs B = 1 with the mean rule (B = {}, rule = {})",
            server.buffers(),
            server.rule()
        )));
    }
    let mut w = server.params().to_vec();
    let mut trajectory = Vec::with_capacity(msgs.len() + 1);
    trajectory.push(w.clone());
    for (t, msg) in (server.version()..).zip(msgs) {
        if msg.gradient.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                found: msg.gradient.len(),
            });
        }
        let eta = T::of(server.learning_rate().at(t));
        for (wj, &gj) in w.iter_mut().zip(&msg.gradient) {
            *wj -= eta * gj;
        }
        trajectory.push(w.clone());
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(sender: usize, g: Vec<f64>) -> GradientMessage<f64> {
        GradientMessage {
            sender,
            gradient: g,
            base_version: 0,
            send_time: 0.0,
            arrive_time: 0.0,
            attacked: false,
        }
    }

    #[test]
    fn single_buffer_steps_every_message() {
        let mut s = Server::new(vec![0.0], 1, LearningRate::constant(0.1), AggregationRule::Mean)
            .unwrap();
        for k in 1..=5 {
            let reply = s.on_gradient(&msg(k % 3, vec![1.0])).unwrap();
            assert_eq!(reply.version, k as u64);
            assert!(reply.step.is_some());
        }
        assert_eq!(s.version(), 5);
    }

    #[test]
    fn step_waits_for_every_buffer() {
        let mut s =
            Server::new(vec![0.0], 2, LearningRate::constant(0.1), AggregationRule::Median)
                .unwrap();
        for sender in [0, 2, 4] {
            let reply = s.on_gradient(&msg(sender, vec![1.0])).unwrap();
            assert_eq!(reply.version, 0);
            assert!(reply.step.is_none());
        }
        assert_eq!(s.params(), &[0.0]);
    }

    #[test]
    fn step_fires_on_completion() {
        let mut s =
            Server::new(vec![0.0, 0.0], 2, LearningRate::constant(1.0), AggregationRule::Mean)
                .unwrap();
        assert!(s.on_gradient(&msg(0, vec![2.0, 0.0])).unwrap().step.is_none());
        let reply = s.on_gradient(&msg(1, vec![4.0, 2.0])).unwrap();
        let step = reply.step.unwrap();
        assert_eq!(step.t, 0);
        assert_eq!(reply.params, vec![-3.0, -1.0]);
        assert_eq!(reply.version, 1);
        assert!(!s.bank().all_ready());
    }

    #[test]
    fn one_step_arithmetic() {
        let mut s =
            Server::new(vec![1.0], 1, LearningRate::constant(0.1), AggregationRule::Mean).unwrap();
        s.on_gradient(&msg(0, vec![2.0])).unwrap();
        assert!((s.params()[0] - 0.8).abs() < 1e-15);

        let mut s =
            Server::new(vec![1.0], 1, LearningRate::constant(0.1), AggregationRule::Mean).unwrap();
        s.on_gradient(&msg(0, vec![0.0])).unwrap();
        assert_eq!((s.params(), s.version()), (&[1.0][..], 1));
    }

    #[test]
    fn median_step_stays_within_honest_range() {
        let mut s =
            Server::new(vec![0.0, 0.0], 3, LearningRate::constant(1.0), AggregationRule::Median)
                .unwrap();
        s.on_gradient(&msg(0, vec![1.0, -2.0])).unwrap();
        s.on_gradient(&msg(1, vec![3.0, -1.0])).unwrap();
        let reply = s.on_gradient(&msg(2, vec![-1e6, f64::NAN])).unwrap();
        let g: Vec<f64> = reply.params.iter().map(|w| -w).collect();
        assert!((1.0..=3.0).contains(&g[0]));
        assert!((-2.0..=-1.0).contains(&g[1]));
    }

    #[test]
    fn sgd_step_requires_ready_bank() {
        let mut s =
            Server::new(vec![0.0], 2, LearningRate::constant(0.1), AggregationRule::Mean).unwrap();
        s.on_gradient(&msg(0, vec![1.0])).unwrap();
        assert!(matches!(s.sgd_step(), Err(Error::NotReady { empty }) if empty == vec![1]));
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(Server::new(
            vec![0.0],
            4,
            LearningRate::constant(0.1),
            AggregationRule::TrimmedMean { q: 2 }
        )
        .is_err());
        assert!(
            Server::new(vec![0.0], 0, LearningRate::constant(0.1), AggregationRule::Mean).is_err()
        );
        assert!(
            Server::new(vec![0.0], 1, LearningRate::constant(-1.0), AggregationRule::Mean).is_err()
        );
        let mut s =
            Server::new(vec![0.0], 1, LearningRate::constant(0.1), AggregationRule::Mean).unwrap();
        assert!(s.on_gradient(&msg(0, vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn learning_rate_schedules() {
        let lr = LearningRate::StepDecay {
            base: 0.1,
            milestones: vec![50, 75],
            factor: 0.1,
        };
        assert_eq!(lr.at(0), 0.1);
        assert!((lr.at(50) - 0.01).abs() < 1e-15);
        assert!((lr.at(99) - 0.001).abs() < 1e-15);
        let lr = LearningRate::InverseSqrt {
            smoothness: 2.0,
            horizon: 100,
        };
        assert_eq!(lr.at(7), 0.05);
    }

    #[test]
    fn asgd_reference() {
        let s =
            Server::new(vec![1.0], 1, LearningRate::constant(0.5), AggregationRule::Mean).unwrap();
        assert_eq!(run_asgd_reference(&s, &[]).unwrap(), vec![vec![1.0]]);
        let traj = run_asgd_reference(&s, &[msg(0, vec![2.0]), msg(1, vec![-4.0])]).unwrap();
        assert_eq!(traj, vec![vec![1.0], vec![0.0], vec![2.0]]);

        let mut bas = s.clone();
        let msgs = vec![msg(3, vec![0.7]), msg(1, vec![-0.3]), msg(0, vec![1.9])];
        let mut traj = vec![bas.params().to_vec()];
        for m in &msgs {
            traj.push(bas.on_gradient(m).unwrap().params);
        }
        assert_eq!(traj, run_asgd_reference(&s, &msgs).unwrap());

        let b2 =
            Server::new(vec![1.0], 2, LearningRate::constant(0.5), AggregationRule::Mean).unwrap();
        assert!(run_asgd_reference(&b2, &[]).is_err());
    }
}
