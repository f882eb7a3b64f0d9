//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; keys are case-sensitive and
//! unknown keys are rejected. See [`CONFIG_KEYS`] for the accepted keys.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::aggregation::AggregationRule;
use crate::error::{Error, Result};
use crate::server::LearningRate;
use crate::sim::{DelayDist, DelayModel, SimConfig, StopCriterion};
use crate::worker::{AttackKind, NoiseNorm, Schedule, WorkerBehavior};

/// Accepted configuration keys with their meaning.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("name", "run label used in reports (default: run)"),
    ("task", "quadratic | logistic"),
    ("n", "number of training instances"),
    ("d", "model dimension"),
    ("separation", "logistic: label signal strength"),
    ("l2", "logistic: l2 penalty"),
    ("holdout", "logistic: held-out instances for accuracy"),
    ("heterogeneity", "quadratic: per-shard target shift (0 = i.i.d. shards)"),
    ("workers", "worker count m (alias: m)"),
    ("buffers", "buffer count B (alias: B)"),
    ("aggregation", "mean | median | trmean"),
    ("q", "trim order / declared robustness order"),
    ("r", "declared Byzantine count"),
    ("robustness_checks", "enforce 0 <= r <= q < B/2 (default: true)"),
    ("tau_max", "largest loyal delay, integer or `inf`"),
    ("attack", "none | ng | rd | bitflip | stale"),
    ("attack_workers", "comma-separated worker ids"),
    ("attack_k", "ng: gradient multiplier (default 10)"),
    ("attack_scale", "rd: noise scale, sigma = ||scale * g|| (default 0.2)"),
    ("attack_norm", "rd: per_message | initial"),
    ("attack_prob", "bitflip: per-coordinate corruption probability"),
    ("attack_extra_delay", "stale: delay distribution"),
    ("attack_schedule", "always | intervals:a-b,c-d | prob:p"),
    ("attack_flood", "copies sent per gradient"),
    ("lr", "base learning rate"),
    ("lr_schedule", "constant | step | inv_sqrt (default step, or constant without max_steps)"),
    ("lr_milestones", "step: fractions of max_steps, comma-separated"),
    ("lr_factor", "step: decay factor"),
    ("seed", "master seed"),
    ("max_steps", "SGD step budget"),
    ("max_time", "simulated-time budget"),
    ("starvation_window", "simulated seconds allowed without a step"),
    ("base_compute", "base compute time per gradient"),
    ("delay_scale", "multiplier on the per-worker half-normal delay"),
    ("latency", "per-message network latency distribution"),
    ("batch", "instances per stochastic gradient"),
    ("init", "zero | normal:scale"),
    ("expect", "none | converge | diverge"),
    ("expect_grad_norm_sq", "converge: threshold on the final ||grad F||^2"),
    ("out", "output directory"),
];

const ALIASES: &[(&str, &str)] = &[("m", "workers"), ("B", "buffers")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

/// Everything that determines the objective. Paired runs must agree on it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub d: usize,
    pub separation: f64,
    pub l2: f64,
    pub holdout: usize,
    pub heterogeneity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub workers: Vec<usize>,
    pub schedule: Schedule,
    pub flood: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpectSpec {
    None,
    Converge { grad_norm_sq: f64 },
    Diverge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Zero,
    Normal { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskSpec,
    pub workers: usize,
    pub buffers: usize,
    pub rule: AggregationRule,
    /// Declared robustness order used by the checks and bounds.
    pub q: usize,
    pub r: usize,
    pub robustness_checks: bool,
    pub tau_max: Option<u64>,
    pub attack: Option<AttackSpec>,
    pub learning_rate: LearningRate,
    pub seed: u64,
    pub stop: StopCriterion,
    pub starvation_window: f64,
    pub delay: DelayModel,
    pub batch: usize,
    pub init: InitSpec,
    pub expect: ExpectSpec,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            task: TaskSpec {
                kind: TaskKind::Quadratic,
                n: 1000,
                d: 20,
                separation: 4.0,
                l2: 0.0,
                holdout: 1000,
                heterogeneity: 0.0,
            },
            workers: 10,
            buffers: 1,
            rule: AggregationRule::Mean,
            q: 0,
            r: 0,
            robustness_checks: true,
            tau_max: None,
            attack: None,
            learning_rate: LearningRate::StepDecay {
                base: 0.1,
                milestones: vec![5_000, 7_500],
                factor: 0.1,
            },
            seed: 0,
            stop: StopCriterion {
                max_steps: Some(10_000),
                max_time: None,
            },
            starvation_window: 1e4,
            delay: DelayModel::default(),
            batch: 1,
            init: InitSpec::Zero,
            expect: ExpectSpec::None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Behaviour of every worker.
    pub fn behaviors(&self) -> Vec<WorkerBehavior> {
        let mut behaviors = vec![WorkerBehavior::loyal(); self.workers];
        if let Some(attack) = &self.attack {
            for &k in &attack.workers {
                if let Some(b) = behaviors.get_mut(k) {
                    *b = WorkerBehavior {
                        kind: attack.kind.clone(),
                        schedule: attack.schedule.clone(),
                        flood: attack.flood,
                    };
                }
            }
        }
        behaviors
    }

    /// Engine configuration for this run.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            workers: self.workers,
            buffers: self.buffers,
            rule: self.rule,
            learning_rate: self.learning_rate.clone(),
            behaviors: self.behaviors(),
            delay: self.delay.clone(),
            tau_max: self.tau_max.unwrap_or(u64::MAX),
            batch: self.batch,
            stop: self.stop,
            starvation_window: self.starvation_window,
            seed: self.seed,
            record_messages: false,
            record_trajectory: false,
        }
    }

    /// Buffers whose every worker is a configured attacker.
    pub fn fully_byzantine_buffers(&self) -> Vec<usize> {
        let Some(attack) = &self.attack else {
            return Vec::new();
        };
        (0..self.buffers)
            .filter(|&b| {
                (0..self.workers)
                    .filter(|k| k % self.buffers == b)
                    .all(|k| attack.workers.contains(&k))
            })
            .collect()
    }

    /// Cross-field constraints; returns every violation found.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.buffers == 0 || self.buffers > self.workers {
            v.push(format!(
                "buffer count must satisfy 0 < B <= m (B = {}, m = {})",
                self.buffers, self.workers
            ));
        }
        if self.task.n < self.workers {
            v.push(format!(
                "need n >= m (n = {}, m = {})",
                self.task.n, self.workers
            ));
        }
        if self.task.d == 0 {
            v.push("d must be at least 1".into());
        }
        if self.task.kind == TaskKind::Logistic && self.task.n < 2 {
            v.push("logistic task needs n >= 2".into());
        }
        if let AggregationRule::TrimmedMean { q } = self.rule {
            if 2 * q >= self.buffers && self.buffers > 0 {
                v.push(format!("q < B/2 required (q = {q}, B = {})", self.buffers));
            }
        }
        if self.robustness_checks {
            if 2 * self.q >= self.buffers && self.buffers > 0 {
                let msg = format!("q < B/2 required (q = {}, B = {})", self.q, self.buffers);
                if !v.contains(&msg) {
                    v.push(msg);
                }
            }
            if self.r > self.q {
                v.push(format!("r <= q required (r = {}, q = {})", self.r, self.q));
            }
            let robust = self.rule.robustness(self.buffers);
            if self.q > robust {
                v.push(format!(
                    "{} is only {robust}-BR with B = {}, declared q = {}",
                    self.rule, self.buffers, self.q
                ));
            }
        }
        if let Some(attack) = &self.attack {
            for &k in &attack.workers {
                if k >= self.workers {
                    v.push(format!("attacked worker {k} does not exist (m = {})", self.workers));
                }
            }
            let behavior = WorkerBehavior {
                kind: attack.kind.clone(),
                schedule: attack.schedule.clone(),
                flood: attack.flood,
            };
            if let Err(e) = behavior.validate() {
                v.push(e.to_string());
            }
        }
        if let Err(e) = self.learning_rate.validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.delay.validate() {
            v.push(e.to_string());
        }
        if self.stop.max_steps.is_none() && self.stop.max_time.is_none() {
            v.push("max_steps or max_time is required".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, errors: &mut Vec<String>) -> Option<T> {
    match value.parse() {
        Ok(x) => Some(x),
        Err(_) => {
            errors.push(format!("`{key}`: cannot parse `{value}`"));
            None
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, errors: &mut Vec<String>) -> Option<Vec<T>> {
    if value.trim().is_empty() {
        return Some(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_num(key, s.trim(), errors))
        .collect()
}

fn parse_delay(key: &str, value: &str, errors: &mut Vec<String>) -> Option<DelayDist> {
    if value == "zero" || value == "0" {
        return Some(DelayDist::Zero);
    }
    let Some((kind, x)) = value.split_once(':') else {
        errors.push(format!("`{key}`: expected zero | fixed:x | exp:x | halfnormal:x"));
        return None;
    };
    let x: f64 = parse_num(key, x.trim(), errors)?;
    match kind.trim() {
        "fixed" => Some(DelayDist::Fixed { value: x }),
        "exp" => Some(DelayDist::Exponential { mean: x }),
        "halfnormal" => Some(DelayDist::HalfNormal { scale: x }),
        other => {
            errors.push(format!("`{key}`: unknown delay distribution `{other}`"));
            None
        }
    }
}

fn parse_schedule(value: &str, errors: &mut Vec<String>) -> Option<Schedule> {
    if value == "always" {
        return Some(Schedule::Always);
    }
    if let Some(p) = value.strip_prefix("prob:") {
        return parse_num("attack_schedule", p.trim(), errors).map(|p| Schedule::Probability { p });
    }
    if let Some(spec) = value.strip_prefix("intervals:") {
        let mut ranges = Vec::new();
        for part in spec.split(',').filter(|s| !s.trim().is_empty()) {
            let Some((a, b)) = part.split_once('-') else {
                errors.push(format!("`attack_schedule`: bad interval `{part}`"));
                return None;
            };
            ranges.push((
                parse_num("attack_schedule", a.trim(), errors)?,
                parse_num("attack_schedule", b.trim(), errors)?,
            ));
        }
        return Some(Schedule::Intervals { ranges });
    }
    errors.push(format!("`attack_schedule`: unknown schedule `{value}`"));
    None
}

/// Parses and validates a configuration. Every problem found is reported.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut errors = Vec::new();
    let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`", lineno + 1));
            continue;
        };
        let key = key.trim();
        let key = ALIASES
            .iter()
            .find(|(alias, _)| *alias == key)
            .map_or(key, |(_, canonical)| *canonical);
        if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
            errors.push(format!("line {}: unknown key `{key}`", lineno + 1));
            continue;
        }
        if entries.insert(key, (lineno + 1, value.trim())).is_some() {
            errors.push(format!("line {}: duplicate key `{key}`", lineno + 1));
        }
    }
    let get = |k: &str| entries.get(k).map(|(_, v)| *v);

    let mut cfg = RunConfig::default();
    macro_rules! num {
        ($key:literal, $field:expr) => {
            if let Some(v) = get($key) {
                if let Some(x) = parse_num($key, v, &mut errors) {
                    $field = x;
                }
            }
        };
    }

    if let Some(v) = get("name") {
        cfg.name = v.to_string();
    }
    match get("task") {
        None | Some("quadratic") => cfg.task.kind = TaskKind::Quadratic,
        Some("logistic") => cfg.task.kind = TaskKind::Logistic,
        Some(other) => errors.push(format!("`task`: unknown task `{other}`")),
    }
    num!("n", cfg.task.n);
    num!("d", cfg.task.d);
    num!("separation", cfg.task.separation);
    num!("l2", cfg.task.l2);
    num!("holdout", cfg.task.holdout);
    num!("heterogeneity", cfg.task.heterogeneity);
    num!("workers", cfg.workers);
    num!("buffers", cfg.buffers);
    num!("r", cfg.r);
    num!("robustness_checks", cfg.robustness_checks);
    num!("seed", cfg.seed);
    num!("starvation_window", cfg.starvation_window);
    num!("base_compute", cfg.delay.base_compute);
    num!("delay_scale", cfg.delay.delay_scale);
    num!("batch", cfg.batch);

    let q: Option<usize> = get("q").and_then(|v| parse_num("q", v, &mut errors));
    match get("aggregation") {
        None | Some("mean") => cfg.rule = AggregationRule::Mean,
        Some("median") => cfg.rule = AggregationRule::Median,
        Some("trmean") => match q {
            Some(q) => cfg.rule = AggregationRule::TrimmedMean { q },
            None => errors.push("`aggregation = trmean` needs `q`".into()),
        },
        Some(other) => match other.parse::<AggregationRule>() {
            Ok(rule) => cfg.rule = rule,
            Err(e) => errors.push(format!("`aggregation`: {e}")),
        },
    }
    cfg.q = q.unwrap_or_else(|| cfg.rule.robustness(cfg.buffers));

    match get("tau_max") {
        None | Some("inf") => cfg.tau_max = None,
        Some(v) => cfg.tau_max = parse_num("tau_max", v, &mut errors),
    }

    let mut max_steps = cfg.stop.max_steps;
    if let Some(v) = get("max_steps") {
        max_steps = if v == "none" {
            None
        } else {
            parse_num("max_steps", v, &mut errors)
        };
    }
    let max_time = get("max_time").and_then(|v| parse_num("max_time", v, &mut errors));
    cfg.stop = StopCriterion {
        max_steps,
        max_time,
    };

    if let Some(v) = get("latency") {
        if let Some(d) = parse_delay("latency", v, &mut errors) {
            cfg.delay.latency = d;
        }
    }

    let lr: f64 = get("lr")
        .and_then(|v| parse_num("lr", v, &mut errors))
        .unwrap_or(0.1);
    let default_schedule = if max_steps.is_some() { "step" } else { "constant" };
    cfg.learning_rate = match get("lr_schedule").unwrap_or(default_schedule) {
        "constant" => LearningRate::constant(lr),
        "step" => {
            let fractions: Vec<f64> = get("lr_milestones")
                .and_then(|v| parse_list("lr_milestones", v, &mut errors))
                .unwrap_or_else(|| vec![0.5, 0.75]);
            let factor = get("lr_factor")
                .and_then(|v| parse_num("lr_factor", v, &mut errors))
                .unwrap_or(0.1);
            match max_steps {
                Some(total) => LearningRate::StepDecay {
                    base: lr,
                    milestones: fractions
                        .iter()
                        .map(|f| (f * total as f64).round() as u64)
                        .collect(),
                    factor,
                },
                None => {
                    errors.push("`lr_schedule = step` needs `max_steps`".into());
                    LearningRate::constant(lr)
                }
            }
        }
        "inv_sqrt" => match max_steps {
            Some(horizon) => LearningRate::InverseSqrt {
                smoothness: 1.0 / lr,
                horizon,
            },
            None => {
                errors.push("`lr_schedule = inv_sqrt` needs `max_steps`".into());
                LearningRate::constant(lr)
            }
        },
        other => {
            errors.push(format!("`lr_schedule`: unknown schedule `{other}`"));
            LearningRate::constant(lr)
        }
    };

    match get("init") {
        None | Some("zero") => {}
        Some(v) => match v.strip_prefix("normal:") {
            Some(s) => {
                if let Some(scale) = parse_num("init", s.trim(), &mut errors) {
                    cfg.init = InitSpec::Normal { scale };
                }
            }
            None => errors.push(format!("`init`: expected zero | normal:scale, got `{v}`")),
        },
    }

    let attack_kind = match get("attack").unwrap_or("none") {
        "none" => None,
        "ng" => Some(AttackKind::NegGrad {
            k: get("attack_k")
                .and_then(|v| parse_num("attack_k", v, &mut errors))
                .unwrap_or(10.0),
        }),
        "rd" => Some(AttackKind::RandDisturb {
            scale: get("attack_scale")
                .and_then(|v| parse_num("attack_scale", v, &mut errors))
                .unwrap_or(0.2),
            norm: match get("attack_norm").unwrap_or("per_message") {
                "per_message" => NoiseNorm::PerMessage,
                "initial" => NoiseNorm::Initial,
                other => {
                    errors.push(format!("`attack_norm`: unknown value `{other}`"));
                    NoiseNorm::PerMessage
                }
            },
        }),
        "bitflip" => Some(AttackKind::BitFlip {
            prob: get("attack_prob")
                .and_then(|v| parse_num("attack_prob", v, &mut errors))
                .unwrap_or(0.01),
        }),
        "stale" => Some(AttackKind::Stale {
            extra_delay: get("attack_extra_delay")
                .and_then(|v| parse_delay("attack_extra_delay", v, &mut errors))
                .unwrap_or(DelayDist::Fixed { value: 10.0 }),
        }),
        other => {
            errors.push(format!("`attack`: unknown attack `{other}`"));
            None
        }
    };
    if let Some(kind) = attack_kind {
        let workers = get("attack_workers")
            .and_then(|v| parse_list("attack_workers", v, &mut errors))
            .unwrap_or_default();
        if workers.is_empty() {
            errors.push("`attack` needs a non-empty `attack_workers`".into());
        }
        let schedule = get("attack_schedule")
            .and_then(|v| parse_schedule(v, &mut errors))
            .unwrap_or_default();
        let flood = get("attack_flood")
            .and_then(|v| parse_num("attack_flood", v, &mut errors))
            .unwrap_or(1);
        cfg.attack = Some(AttackSpec {
            kind,
            workers,
            schedule,
            flood,
        });
    }

    cfg.expect = match get("expect").unwrap_or("none") {
        "none" => ExpectSpec::None,
        "diverge" => ExpectSpec::Diverge,
        "converge" => match get("expect_grad_norm_sq") {
            Some(v) => match parse_num("expect_grad_norm_sq", v, &mut errors) {
                Some(grad_norm_sq) => ExpectSpec::Converge { grad_norm_sq },
                None => ExpectSpec::None,
            },
            None => {
                errors.push("`expect = converge` needs `expect_grad_norm_sq`".into());
                ExpectSpec::None
            }
        },
        other => {
            errors.push(format!("`expect`: unknown value `{other}`"));
            ExpectSpec::None
        }
    };
    cfg.out = get("out").map(PathBuf::from);

    if errors.is_empty() {
        if let Err(Error::Config(v)) = cfg.validate() {
            errors.extend(v);
        }
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}
