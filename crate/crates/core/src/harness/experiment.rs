use std::fs;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::config::{ExpectSpec, InitSpec, RunConfig, TaskKind};
use crate::aggregation::{lemma1_bound, lemma2_bound, BoundInputs};
use crate::error::Result;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::scalar::{norm, norm_sq, Scalar};
use crate::sim::{self, StopReason};
use crate::tasks::{
    make_logistic_with_holdout, make_quadratic_heterogeneous, partition_contiguous,
    partition_uniform, Objective, Partition,
};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Loss above this multiple of the initial loss counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e3;

/// One row of `metrics.csv`; columns appear in field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub sim_time: f64,
    pub eta: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub aggregate_norm_sq: f64,
    pub tau_messages: u64,
    pub tau_mean: f64,
    pub tau_max: u64,
    pub byzantine_senders: usize,
    pub attacked_messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Acceptance {
    pub checked: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Rows are aligned on server iterations, not worker epochs.
    pub alignment: &'static str,
    pub steps: u64,
    pub sim_time: f64,
    pub stop_reason: StopReason,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub diverged: bool,
    pub starved: bool,
    pub heldout_accuracy: Option<f64>,
    pub mean_tau: f64,
    pub max_tau: u64,
    pub tau_fraction_exceeding: Option<f64>,
    pub sends: u64,
    pub deliveries: u64,
    pub dropped_after_stop: u64,
    /// Largest sampled per-instance gradient norm along the trajectory.
    pub empirical_d: f64,
    pub smoothness: f64,
    pub lemma1_rhs: Option<f64>,
    pub lemma2_rhs: Option<f64>,
    pub max_byzantine_senders: usize,
    pub r_exceeded: bool,
    pub warnings: Vec<String>,
    pub acceptance: Acceptance,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    pub final_params: Vec<f64>,
}

impl ExperimentOutput {
    /// False on starvation or a failed declared expectation.
    pub fn success(&self) -> bool {
        !self.summary.starved && (!self.summary.acceptance.checked || self.summary.acceptance.passed)
    }
}

/// Objective, optional held-out set and partition of a configuration.
pub(crate) fn build_task(
    cfg: &RunConfig,
) -> Result<(Objective<f64>, Option<Objective<f64>>, Partition)> {
    let data_seed = derive_seed(cfg.seed, streams::DATA);
    let (objective, holdout) = match cfg.task.kind {
        TaskKind::Quadratic => (
            make_quadratic_heterogeneous(
                cfg.task.n,
                cfg.task.d,
                cfg.workers,
                cfg.task.heterogeneity,
                data_seed,
            )?,
            None,
        ),
        TaskKind::Logistic => make_logistic_with_holdout(
            cfg.task.n,
            cfg.task.holdout,
            cfg.task.d,
            cfg.task.separation,
            cfg.task.l2,
            data_seed,
        )?,
    };
    let partition = if cfg.task.heterogeneity != 0.0 && cfg.task.kind == TaskKind::Quadratic {
        partition_contiguous(cfg.task.n, cfg.workers)?
    } else {
        partition_uniform(cfg.task.n, cfg.workers, derive_seed(cfg.seed, streams::PARTITION))?
    };
    Ok((objective, holdout, partition))
}

fn initial_params(cfg: &RunConfig) -> Vec<f64> {
    match cfg.init {
        InitSpec::Zero => vec![0.0; cfg.task.d],
        InitSpec::Normal { scale } => {
            let mut rng = stream_rng(cfg.seed, streams::INIT);
            (0..cfg.task.d)
                .map(|_| scale * f64::standard_normal(&mut rng))
                .collect()
        }
    }
}

/// Runs one configuration end to end and summarizes it. Starvation is not an
/// error here: the partial records are returned with `summary.starved` set.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (objective, holdout, partition) = build_task(cfg)?;
    let w0 = initial_params(cfg);
    let initial_loss = objective.full_loss(&w0)?;

    let mut records = Vec::new();
    let mut probe_rng = stream_rng(cfg.seed, streams::PROBE);
    let mut empirical_d = 0.0f64;
    let mut probe = vec![0.0; cfg.task.d];
    let mut probe_norm = |w: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
        let i = rng.random_range(0..objective.n());
        objective.instance_gradient_into(w, i, &mut probe);
        norm(&probe)
    };
    empirical_d = empirical_d.max(probe_norm(&w0, &mut probe_rng));

    let output = sim::run(&cfg.sim_config(), &objective, &partition, w0, |obs| {
        let loss = objective.full_loss(obs.params).unwrap_or(f64::NAN);
        let grad = objective.full_gradient(obs.params).expect("dimension fixed");
        let d = probe_norm(obs.params, &mut probe_rng);
        if d.is_finite() {
            empirical_d = empirical_d.max(d);
        }
        records.push(MetricsRecord {
            step: obs.record.t + 1,
            sim_time: obs.time,
            eta: obs.record.eta,
            loss,
            grad_norm_sq: norm_sq(&grad),
            aggregate_norm_sq: obs.record.aggregate_norm_sq,
            tau_messages: obs.tau.messages,
            tau_mean: obs.tau.mean,
            tau_max: obs.tau.max,
            byzantine_senders: obs.byzantine_senders,
            attacked_messages: obs.attacked_messages,
        });
    })?;

    let final_params = output.final_params.clone();
    let final_loss = objective.full_loss(&final_params)?;
    let final_grad_norm_sq = norm_sq(&objective.full_gradient(&final_params)?);
    let diverged = output.stop_reason == StopReason::Diverged
        || !final_loss.is_finite()
        || final_loss > DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE);
    let starved = output.starved();

    let robust_params = cfg.r <= cfg.q && 2 * cfg.q < cfg.buffers;
    let bound_inputs = BoundInputs {
        grad_bound: empirical_d,
        smoothness: objective.smoothness(),
        tau_max: cfg.tau_max.unwrap_or(0),
        dim: cfg.task.d,
    };
    let (b, q, r) = (cfg.buffers as u64, cfg.q as u64, cfg.r as u64);
    let lemma1_rhs = robust_params
        .then(|| lemma1_bound(&bound_inputs, b, q, r).ok())
        .flatten();
    let lemma2_rhs = (robust_params && cfg.tau_max.is_some())
        .then(|| lemma2_bound(&bound_inputs, b, q, r).ok())
        .flatten();

    let mut warnings = Vec::new();
    for b in cfg.fully_byzantine_buffers() {
        warnings.push(format!("buffer {b} is served only by attacking workers"));
    }
    let attack_always = cfg
        .attack
        .as_ref()
        .is_some_and(|a| a.schedule == crate::worker::Schedule::Always);
    let r_exceeded = output.max_byzantine_senders > cfg.r;
    if r_exceeded && attack_always {
        warnings.push(format!(
            "up to {} Byzantine senders in one step, declared r = {}",
            output.max_byzantine_senders, cfg.r
        ));
    }

    let acceptance = match cfg.expect {
        ExpectSpec::None => Acceptance {
            checked: false,
            passed: true,
            detail: String::new(),
        },
        ExpectSpec::Converge { grad_norm_sq } => Acceptance {
            checked: true,
            passed: !diverged && final_grad_norm_sq <= grad_norm_sq,
            detail: format!("final ||grad F||^2 = {final_grad_norm_sq:e}, threshold {grad_norm_sq:e}"),
        },
        ExpectSpec::Diverge => Acceptance {
            checked: true,
            passed: diverged,
            detail: format!("final loss {final_loss:e}, initial {initial_loss:e}"),
        },
    };

    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        name: cfg.name.clone(),
        seed: cfg.seed,
        alignment: "server_iteration",
        steps: output.steps,
        sim_time: output.sim_time,
        stop_reason: output.stop_reason.clone(),
        initial_loss,
        final_loss,
        final_grad_norm_sq,
        diverged,
        starved,
        heldout_accuracy: holdout
            .as_ref()
            .and_then(|h| h.accuracy(&final_params)),
        mean_tau: output.tau_histogram.mean(),
        max_tau: output.tau_histogram.max().unwrap_or(0),
        tau_fraction_exceeding: cfg.tau_max.map(|t| output.tau_histogram.fraction_exceeding(t)),
        sends: output.sends,
        deliveries: output.deliveries,
        dropped_after_stop: output.dropped_after_stop,
        empirical_d,
        smoothness: objective.smoothness(),
        lemma1_rhs,
        lemma2_rhs,
        max_byzantine_senders: output.max_byzantine_senders,
        r_exceeded,
        warnings,
        acceptance,
    };
    Ok(ExperimentOutput {
        config: cfg.clone(),
        records,
        summary,
        final_params,
    })
}

/// Serializes the records with a header row.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        writer.write_record([
            "step",
            "sim_time",
            "eta",
            "loss",
            "grad_norm_sq",
            "aggregate_norm_sq",
            "tau_messages",
            "tau_mean",
            "tau_max",
            "byzantine_senders",
            "attacked_messages",
        ])?;
    }
    for r in records {
        writer.serialize(r)?;
    }
    writer
        .into_inner()
        .map_err(|e| crate::error::Error::Io(e.into_error()))
}

/// Writes `metrics.csv` and `summary.json` into `dir`, creating it.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&output.records)?)?;
    let mut json = serde_json::to_vec_pretty(&output.summary)?;
    json.push(b'\n');
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_config;

    #[test]
    fn summary_fields_are_consistent() {
        let cfg = parse_config("m = 4\nB = 2\naggregation = median\nn = 100\nd = 3\nmax_steps = 200\ninit = normal:3\n")
            .unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 200);
        assert_eq!(out.summary.steps, 200);
        assert_eq!(out.summary.sends, out.summary.deliveries);
        assert!(out.summary.final_loss < out.summary.initial_loss);
        assert!(out.summary.lemma1_rhs.is_some());
        assert_eq!(out.records.last().unwrap().loss, out.summary.final_loss);
        assert!(out.records.windows(2).all(|w| w[0].step + 1 == w[1].step));
        assert!(out.success());
    }

    #[test]
    fn csv_header_and_rows() {
        let cfg = parse_config("m = 2\nn = 10\nd = 2\nmax_steps = 3\n").unwrap();
        let out = run_experiment(&cfg).unwrap();
        let text = String::from_utf8(metrics_csv(&out.records).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,sim_time,eta,loss,grad_norm_sq,aggregate_norm_sq,tau_messages,tau_mean,tau_max,byzantine_senders,attacked_messages"
        );
        assert_eq!(lines.count(), 3);
        let empty = String::from_utf8(metrics_csv(&[]).unwrap()).unwrap();
        assert!(empty.starts_with("step,"));
    }

    #[test]
    fn divergence_flag_and_expectation() {
        let cfg = parse_config(
            "m = 4\nB = 1\nn = 100\nd = 3\nmax_steps = 2000\nattack = ng\nattack_workers = 0,1\n\
             robustness_checks = false\nexpect = diverge\n",
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summary.diverged);
        assert!(out.summary.acceptance.passed);
        assert!(out.summary.max_byzantine_senders >= 1);
    }

    #[test]
    fn logistic_reports_accuracy() {
        let cfg = parse_config(
            "task = logistic\nm = 3\nn = 300\nd = 4\nholdout = 200\nmax_steps = 500\n",
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        let acc = out.summary.heldout_accuracy.unwrap();
        assert!(acc > 0.7, "accuracy {acc}");
    }

    #[test]
    fn starvation_is_reported() {
        let cfg = parse_config(
            "m = 2\nB = 2\naggregation = median\nq = 0\nn = 10\nd = 2\nattack = stale\n\
             attack_workers = 1\nattack_extra_delay = fixed:1e9\nstarvation_window = 20\n\
             robustness_checks = false\n",
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summary.starved);
        assert!(!out.success());
        assert!(out.summary.warnings.iter().any(|w| w.contains("buffer 1")));
    }
}
