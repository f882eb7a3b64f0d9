//! Paired comparison of runs that share a task.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{parse_config, RunConfig};
use super::experiment::{run_experiment, ExperimentOutput};
use crate::error::{Error, Result};

/// Compare `variant` against `baseline`. The pair passes when
/// `variant_loss / baseline_loss` lies within the given ratio limits; a
/// non-finite variant loss counts as an infinite ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pairing {
    pub baseline: String,
    pub variant: String,
    pub max_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
}

impl Pairing {
    pub fn new(baseline: &str, variant: &str) -> Self {
        Self {
            baseline: baseline.into(),
            variant: variant.into(),
            max_ratio: None,
            min_ratio: None,
        }
    }

    /// Parses `baseline variant [max_ratio=x] [min_ratio=y]`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let (Some(baseline), Some(variant)) = (parts.next(), parts.next()) else {
            return Err(Error::InvalidPairing(format!("expected two run names in `{line}`")));
        };
        let mut pairing = Pairing::new(baseline, variant);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidPairing(format!("bad option `{part}`")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| Error::InvalidPairing(format!("bad number in `{part}`")))?;
            match key {
                "max_ratio" => pairing.max_ratio = Some(value),
                "min_ratio" => pairing.min_ratio = Some(value),
                _ => return Err(Error::InvalidPairing(format!("unknown option `{key}`"))),
            }
        }
        Ok(pairing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub baseline: String,
    pub variant: String,
    /// Configuration fields that differ between the two runs.
    pub differs_in: Vec<String>,
    pub baseline_final_loss: f64,
    pub variant_final_loss: f64,
    pub loss_delta: f64,
    pub loss_ratio: f64,
    pub baseline_grad_norm_sq: f64,
    pub variant_grad_norm_sq: f64,
    pub grad_norm_sq_delta: f64,
    pub baseline_accuracy: Option<f64>,
    pub variant_accuracy: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub alignment: &'static str,
    pub rows: Vec<PairRow>,
    pub all_passed: bool,
}

impl SuiteReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "baseline",
            "variant",
            "differs_in",
            "baseline_final_loss",
            "variant_final_loss",
            "loss_delta",
            "loss_ratio",
            "baseline_grad_norm_sq",
            "variant_grad_norm_sq",
            "grad_norm_sq_delta",
            "passed",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.baseline.clone(),
                r.variant.clone(),
                r.differs_in.join(";"),
                r.baseline_final_loss.to_string(),
                r.variant_final_loss.to_string(),
                r.loss_delta.to_string(),
                r.loss_ratio.to_string(),
                r.baseline_grad_norm_sq.to_string(),
                r.variant_grad_norm_sq.to_string(),
                r.grad_norm_sq_delta.to_string(),
                r.passed.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn differing_fields(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let to_map = |c: &RunConfig| match serde_json::to_value(c) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => Default::default(),
    };
    let (ma, mb) = (to_map(a), to_map(b));
    ma.iter()
        .filter(|(k, v)| *k != "name" && *k != "out" && mb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Runs every configuration (in parallel; each run is single-threaded) and
/// evaluates the pairings. Runs are keyed by `RunConfig::name`.
pub fn compare_suite(configs: &[RunConfig], pairings: &[Pairing]) -> Result<(SuiteReport, Vec<ExperimentOutput>)> {
    let mut index = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        if index.insert(c.name.clone(), i).is_some() {
            return Err(Error::InvalidPairing(format!("duplicate run name `{}`", c.name)));
        }
    }
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidPairing(format!("no run named `{name}`")))
    };
    let mut resolved = Vec::with_capacity(pairings.len());
    for p in pairings {
        let (b, v) = (lookup(&p.baseline)?, lookup(&p.variant)?);
        if configs[b].task != configs[v].task {
            return Err(Error::InvalidPairing(format!(
                "`{}` and `{}` use different tasks",
                p.baseline, p.variant
            )));
        }
        resolved.push((p, b, v));
    }

    let outputs: Vec<ExperimentOutput> = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<_>>()?;

    let rows: Vec<PairRow> = resolved
        .into_iter()
        .map(|(p, b, v)| {
            let (sb, sv) = (&outputs[b].summary, &outputs[v].summary);
            let ratio = if sv.final_loss.is_finite() {
                sv.final_loss / sb.final_loss
            } else {
                f64::INFINITY
            };
            let passed = p.max_ratio.is_none_or(|m| ratio <= m)
                && p.min_ratio.is_none_or(|m| ratio >= m);
            PairRow {
                baseline: p.baseline.clone(),
                variant: p.variant.clone(),
                differs_in: differing_fields(&configs[b], &configs[v]),
                baseline_final_loss: sb.final_loss,
                variant_final_loss: sv.final_loss,
                loss_delta: sv.final_loss - sb.final_loss,
                loss_ratio: ratio,
                baseline_grad_norm_sq: sb.final_grad_norm_sq,
                variant_grad_norm_sq: sv.final_grad_norm_sq,
                grad_norm_sq_delta: sv.final_grad_norm_sq - sb.final_grad_norm_sq,
                baseline_accuracy: sb.heldout_accuracy,
                variant_accuracy: sv.heldout_accuracy,
                passed,
            }
        })
        .collect();
    let all_passed = rows.iter().all(|r| r.passed);
    Ok((
        SuiteReport {
            alignment: "server_iteration",
            rows,
            all_passed,
        },
        outputs,
    ))
}

/// Loads every `*.cfg` file in `dir` (run name defaults to the file stem)
/// and the optional `pairs.txt`, one [`Pairing`] per non-comment line.
pub fn load_suite_dir(dir: &Path) -> Result<(Vec<RunConfig>, Vec<Pairing>)> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    paths.sort();
    let mut configs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let mut cfg = parse_config(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(
                v.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })?;
        if !text.lines().any(|l| l.trim_start().starts_with("name")) {
            cfg.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        configs.push(cfg);
    }
    let pairs_path = dir.join("pairs.txt");
    let pairings = if pairs_path.exists() {
        fs::read_to_string(pairs_path)?
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(Pairing::parse)
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok((configs, pairings))
}
