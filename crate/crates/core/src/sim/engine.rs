use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::delay::DelayModel;
use super::histogram::TauHistogram;
use crate::aggregation::AggregationRule;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::server::{LearningRate, Server, StepRecord};
use crate::tasks::{Objective, Partition};
use crate::worker::{classify_iteration, GradientMessage, IterationClass, Worker, WorkerBehavior};

/// When a run ends. Whichever limit is hit first wins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriterion {
    pub max_steps: Option<u64>,
    pub max_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workers: usize,
    pub buffers: usize,
    pub rule: AggregationRule,
    pub learning_rate: LearningRate,
    /// One behaviour per worker.
    pub behaviors: Vec<WorkerBehavior>,
    pub delay: DelayModel,
    pub tau_max: u64,
    pub batch: usize,
    pub stop: StopCriterion,
    /// Longest stretch of simulated time allowed without an SGD step.
    pub starvation_window: f64,
    pub seed: u64,
    /// Keep every delivered message, in delivery order.
    pub record_messages: bool,
    /// Keep the parameters after every step.
    pub record_trajectory: bool,
}

impl SimConfig {
    /// All-loyal configuration with default timing.
    pub fn new(
        workers: usize,
        buffers: usize,
        rule: AggregationRule,
        learning_rate: LearningRate,
        max_steps: u64,
        seed: u64,
    ) -> Self {
        Self {
            workers,
            buffers,
            rule,
            learning_rate,
            behaviors: vec![WorkerBehavior::loyal(); workers],
            delay: DelayModel::default(),
            tau_max: u64::MAX,
            batch: 1,
            stop: StopCriterion {
                max_steps: Some(max_steps),
                max_time: None,
            },
            starvation_window: 1e4,
            seed,
            record_messages: false,
            record_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.buffers == 0 || self.buffers > self.workers {
            problems.push(format!(
                "buffer count must satisfy 0 < B <= m (B = {}, m = {})",
                self.buffers, self.workers
            ));
        }
        if self.behaviors.len() != self.workers {
            problems.push(format!(
                "{} behaviours configured for {} workers",
                self.behaviors.len(),
                self.workers
            ));
        }
        for (k, b) in self.behaviors.iter().enumerate() {
            if let Err(e) = b.validate() {
                problems.push(format!("worker {k}: {e}"));
            }
        }
        if let Err(e) = self.delay.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.learning_rate.validate() {
            problems.push(e.to_string());
        }
        if let AggregationRule::TrimmedMean { q } = self.rule {
            if 2 * q >= self.buffers {
                problems.push(format!("q < B/2 required (q = {q}, B = {})", self.buffers));
            }
        }
        if self.stop.max_steps.is_none() && self.stop.max_time.is_none() {
            problems.push("a step or time budget is required".into());
        }
        if !(self.starvation_window > 0.0) {
            problems.push("starvation window must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Delay statistics of the messages aggregated in one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauStats {
    pub messages: u64,
    pub mean: f64,
    pub max: u64,
}

/// Passed to the observer after every SGD step.
#[derive(Debug)]
pub struct StepObservation<'a, T> {
    pub record: StepRecord,
    pub time: f64,
    /// Parameters after the step.
    pub params: &'a [T],
    pub tau: TauStats,
    /// Distinct senders of this step's messages classified Byzantine.
    pub byzantine_senders: usize,
    /// Messages in this step that were deliberately corrupted.
    pub attacked_messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    MaxTime,
    /// Parameters became non-finite.
    Diverged,
    Starved {
        now: f64,
        last_step_time: f64,
        empty_buffers: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct SimOutput<T> {
    pub final_params: Vec<T>,
    pub steps: u64,
    pub sim_time: f64,
    pub stop_reason: StopReason,
    pub sends: u64,
    pub deliveries: u64,
    /// Messages that reached the server after the run stopped and were dropped.
    pub dropped_after_stop: u64,
    pub tau_histogram: TauHistogram,
    pub compute_times: Vec<f64>,
    pub messages: Vec<GradientMessage<T>>,
    /// `w^0, w^1, ...` when requested.
    pub trajectory: Vec<Vec<T>>,
    pub max_byzantine_senders: usize,
}

impl<T> SimOutput<T> {
    pub fn starved(&self) -> bool {
        matches!(self.stop_reason, StopReason::Starved { .. })
    }

    /// Turns a starvation stop into an error.
    pub fn check(&self, window: f64) -> Result<()> {
        match &self.stop_reason {
            StopReason::Starved {
                now,
                last_step_time,
                empty_buffers,
            } => Err(Error::Starvation {
                now: *now,
                last_step_time: *last_step_time,
                window,
                empty_buffers: empty_buffers.clone(),
            }),
            _ => Ok(()),
        }
    }
}

enum EventKind<T> {
    WorkerSend(usize),
    ServerDeliver(Box<GradientMessage<T>>),
    WorkerReceive {
        worker: usize,
        params: Vec<T>,
        version: u64,
    },
}

struct Event<T> {
    time: f64,
    seq: u64,
    kind: EventKind<T>,
}

impl<T> PartialEq for Event<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Event<T> {}

impl<T> PartialOrd for Event<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Event<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Queue<T> {
    heap: BinaryHeap<Event<T>>,
    next_seq: u64,
}

impl<T> Queue<T> {
    fn push(&mut self, time: f64, kind: EventKind<T>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }
}

#[derive(Default)]
struct PendingStep {
    taus: Vec<u64>,
    byzantine: BTreeSet<usize>,
    attacked: u64,
}

impl PendingStep {
    fn take_stats(&mut self) -> (TauStats, usize, u64) {
        let messages = self.taus.len() as u64;
        let stats = TauStats {
            messages,
            mean: if messages == 0 {
                0.0
            } else {
                self.taus.iter().sum::<u64>() as f64 / messages as f64
            },
            max: self.taus.iter().copied().max().unwrap_or(0),
        };
        let out = (stats, self.byzantine.len(), self.attacked);
        *self = Self::default();
        out
    }
}

/// Runs the buffered asynchronous SGD protocol on `objective` from `w0`.
///
/// Worker `k` samples from `partition.shard(k)`. `observer` is called after
/// every SGD step. A run that goes `cfg.starvation_window` simulated seconds
/// without a step stops with [`StopReason::Starved`].
pub fn run<T, F>(
    cfg: &SimConfig,
    objective: &Objective<T>,
    partition: &Partition,
    w0: Vec<T>,
    mut observer: F,
) -> Result<SimOutput<T>>
where
    T: Scalar,
    F: FnMut(&StepObservation<'_, T>),
{
    cfg.validate()?;
    if partition.len() != cfg.workers {
        return Err(Error::Config(vec![format!(
            "partition has {} shards for {} workers",
            partition.len(),
            cfg.workers
        )]));
    }
    if w0.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            found: w0.len(),
        });
    }

    let mut server = Server::new(w0.clone(), cfg.buffers, cfg.learning_rate.clone(), cfg.rule)?;
    let compute_times = cfg
        .delay
        .compute_times(cfg.workers, &mut stream_rng(cfg.seed, streams::WORKER_DELAY));
    let mut latency_rng = stream_rng(cfg.seed, streams::LATENCY);
    let mut workers: Vec<Worker<T>> = (0..cfg.workers)
        .map(|k| {
            Worker::new(
                k,
                partition.shard(k).to_vec(),
                cfg.behaviors[k].clone(),
                cfg.batch,
                compute_times[k],
                w0.clone(),
                stream_rng(cfg.seed, streams::SAMPLING + k as u64),
                stream_rng(cfg.seed, streams::ATTACK + k as u64),
            )
        })
        .collect();
    let mut outstanding = vec![0u32; cfg.workers];

    let mut queue = Queue {
        heap: BinaryHeap::new(),
        next_seq: 0,
    };
    for (k, w) in workers.iter().enumerate() {
        queue.push(w.compute_time, EventKind::WorkerSend(k));
    }

    let mut out = SimOutput {
        final_params: Vec::new(),
        steps: 0,
        sim_time: 0.0,
        stop_reason: StopReason::MaxSteps,
        sends: 0,
        deliveries: 0,
        dropped_after_stop: 0,
        tau_histogram: TauHistogram::default(),
        compute_times: compute_times.clone(),
        messages: Vec::new(),
        trajectory: Vec::new(),
        max_byzantine_senders: 0,
    };
    if cfg.record_trajectory {
        out.trajectory.push(w0);
    }

    let mut pending = PendingStep::default();
    let mut last_step_time = 0.0f64;
    let mut stop: Option<StopReason> = None;

    if cfg.stop.max_steps == Some(0) {
        stop = Some(StopReason::MaxSteps);
    }

    while stop.is_none() {
        let Some(event) = queue.heap.pop() else {
            stop = Some(StopReason::Starved {
                now: out.sim_time,
                last_step_time,
                empty_buffers: server.bank().empty_buffers(),
            });
            break;
        };
        if let Some(limit) = cfg.stop.max_time {
            if event.time > limit {
                queue.heap.push(event);
                out.sim_time = limit;
                stop = Some(StopReason::MaxTime);
                break;
            }
        }
        if event.time - last_step_time > cfg.starvation_window {
            queue.heap.push(event);
            out.sim_time = last_step_time + cfg.starvation_window;
            stop = Some(StopReason::Starved {
                now: out.sim_time,
                last_step_time,
                empty_buffers: server.bank().empty_buffers(),
            });
            break;
        }
        let now = event.time;
        out.sim_time = now;

        match event.kind {
            EventKind::WorkerSend(k) => {
                let worker = &mut workers[k];
                let computed = worker.compute(objective)?;
                let flood = worker.behavior.flood;
                for _ in 0..flood {
                    let latency = cfg.delay.latency.sample(&mut latency_rng) + worker.extra_delay();
                    let msg = GradientMessage {
                        sender: k,
                        gradient: computed.gradient.clone(),
                        base_version: computed.base_version,
                        send_time: now,
                        arrive_time: now + latency,
                        attacked: computed.attacked,
                    };
                    queue.push(msg.arrive_time, EventKind::ServerDeliver(Box::new(msg)));
                }
                outstanding[k] = flood;
                out.sends += u64::from(flood);
            }
            EventKind::ServerDeliver(msg) => {
                out.deliveries += 1;
                let arrival_iteration = server.version();
                let tau = msg.delay_at(arrival_iteration);
                out.tau_histogram.record(tau);
                pending.taus.push(tau);
                if classify_iteration(&msg, arrival_iteration, cfg.tau_max)
                    == IterationClass::Byzantine
                {
                    pending.byzantine.insert(msg.sender);
                }
                pending.attacked += u64::from(msg.attacked);

                let reply = server.on_gradient(&msg)?;
                let sender = msg.sender;
                if cfg.record_messages {
                    out.messages.push(*msg);
                }
                if let Some(record) = reply.step {
                    last_step_time = now;
                    out.steps += 1;
                    let (tau, byzantine_senders, attacked_messages) = pending.take_stats();
                    out.max_byzantine_senders = out.max_byzantine_senders.max(byzantine_senders);
                    observer(&StepObservation {
                        record,
                        time: now,
                        params: &reply.params,
                        tau,
                        byzantine_senders,
                        attacked_messages,
                    });
                    if cfg.record_trajectory {
                        out.trajectory.push(reply.params.clone());
                    }
                    if reply.params.iter().any(|x| !x.is_finite()) {
                        stop = Some(StopReason::Diverged);
                    } else if cfg.stop.max_steps.is_some_and(|m| out.steps >= m) {
                        stop = Some(StopReason::MaxSteps);
                    }
                }
                let back = cfg.delay.latency.sample(&mut latency_rng);
                queue.push(
                    now + back,
                    EventKind::WorkerReceive {
                        worker: sender,
                        params: reply.params,
                        version: reply.version,
                    },
                );
            }
            EventKind::WorkerReceive {
                worker,
                params,
                version,
            } => {
                outstanding[worker] -= 1;
                if outstanding[worker] == 0 {
                    let w = &mut workers[worker];
                    w.receive(&params, version);
                    queue.push(now + w.compute_time, EventKind::WorkerSend(worker));
                }
            }
        }
    }

    // Drain: messages still in flight reach a stopped server and are dropped.
    while let Some(event) = queue.heap.pop() {
        if let EventKind::ServerDeliver(_) = event.kind {
            out.deliveries += 1;
            out.dropped_after_stop += 1;
        }
    }

    out.stop_reason = stop.expect("loop exits with a stop reason");
    out.final_params = server.params().to_vec();
    Ok(out)
}
