use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use basgd::aggregation::{
    c_constant_extended, c_upper_bound, check_qbr, lemma1_bound, lemma2_bound, CandidateSet,
    QbrCheckOptions,
};
use basgd::harness::{compare_suite, load_suite_dir, parse_config, run_experiment, write_outputs, CONFIG_KEYS};
use basgd::rng::{stream_rng, streams};
use basgd::{AggregationRule, BoundInputs, Scalar};
use clap::{Parser, Subcommand};
use serde_json::json;

/// Buffered asynchronous SGD simulator.
#[derive(Parser)]
#[command(name = "basgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration file and write metrics.csv and summary.json.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's `out`, else out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every *.cfg in a directory and compare the pairs in pairs.txt.
    Suite {
        dir: PathBuf,
        /// Overrides the seed of every run.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out/suite")]
        out: PathBuf,
    },
    /// Check the q-Byzantine-robust properties of a rule on random inputs.
    CheckQbr {
        #[arg(long, short = 'B', default_value_t = 5)]
        buffers: usize,
        #[arg(long, short = 'd', default_value_t = 3)]
        dim: usize,
        /// mean | median | trmean(q)
        #[arg(long, default_value = "median")]
        rule: AggregationRule,
        /// Order to check (default: the rule's own).
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate C, its upper estimate and both second-moment bounds.
    Bounds {
        #[arg(value_name = "B")]
        buffers: u64,
        q: u64,
        r: u64,
        #[arg(value_name = "D")]
        grad_bound: f64,
        #[arg(value_name = "L")]
        smoothness: f64,
        tau_max: u64,
        d: usize,
    },
    /// List the configuration keys.
    Keys,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Suite { dir, seed, out } => suite(&dir, seed, &out),
        Command::CheckQbr {
            buffers,
            dim,
            rule,
            q,
            trials,
            seed,
        } => qbr(buffers, dim, rule, q, trials, seed),
        Command::Bounds {
            buffers,
            q,
            r,
            grad_bound,
            smoothness,
            tau_max,
            d,
        } => bounds(buffers, q, r, grad_bound, smoothness, tau_max, d),
        Command::Keys => {
            for (key, help) in CONFIG_KEYS {
                println!("{key:20} {help}");
            }
            Ok(true)
        }
    }
}

fn run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    if !text.lines().any(|l| l.trim_start().starts_with("name")) {
        if let Some(stem) = path.file_stem() {
            cfg.name = stem.to_string_lossy().into_owned();
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let output = run_experiment(&cfg)?;
    write_outputs(&output, &dir)?;

    let s = &output.summary;
    println!(
        "{}: {} steps, final loss {:.6e}, ||grad F||^2 {:.6e}, mean tau {:.2}, stop {:?}",
        s.name, s.steps, s.final_loss, s.final_grad_norm_sq, s.mean_tau, s.stop_reason
    );
    if s.acceptance.checked {
        println!(
            "expectation {}: {}",
            if s.acceptance.passed { "passed" } else { "FAILED" },
            s.acceptance.detail
        );
    }
    if s.starved {
        eprintln!("run starved; partial output written");
    }
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", dir.display());
    Ok(output.success())
}

fn suite(dir: &Path, seed: Option<u64>, out: &Path) -> Result<bool> {
    let (mut configs, pairings) = load_suite_dir(dir)?;
    if configs.is_empty() {
        bail!("no *.cfg files in {}", dir.display());
    }
    if let Some(s) = seed {
        configs.iter_mut().for_each(|c| c.seed = s);
    }
    let (report, outputs) = compare_suite(&configs, &pairings)?;
    for o in &outputs {
        write_outputs(o, &out.join(&o.summary.name))?;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;

    println!("alignment: {}", report.alignment);
    for r in &report.rows {
        println!(
            "{:4} {} -> {}: loss {:.6e} -> {:.6e} (ratio {:.4})",
            if r.passed { "ok" } else { "FAIL" },
            r.baseline,
            r.variant,
            r.baseline_final_loss,
            r.variant_final_loss,
            r.loss_ratio
        );
    }
    let runs_ok = outputs.iter().all(|o| o.success());
    for o in outputs.iter().filter(|o| !o.success()) {
        eprintln!("run {} failed (starved = {})", o.summary.name, o.summary.starved);
    }
    println!("wrote {}", out.display());
    Ok(report.all_passed && runs_ok)
}

fn qbr(b: usize, d: usize, rule: AggregationRule, q: Option<usize>, trials: usize, seed: u64) -> Result<bool> {
    if b == 0 || d == 0 {
        bail!("B and d must be positive");
    }
    let q = q.unwrap_or_else(|| rule.robustness(b));
    if 2 * q >= b {
        bail!("q < B/2 required (B = {b}, q = {q})");
    }
    let mut rng = stream_rng(seed, streams::PROBE);
    let mut violations = Vec::new();
    let mut residual = 0.0f64;
    for trial in 0..trials {
        let cs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| f64::standard_normal(&mut rng)).collect())
            .collect();
        let set = CandidateSet::new(cs)?;
        let options = QbrCheckOptions {
            seed: trial as u64,
            ..Default::default()
        };
        let report = check_qbr(|c: &[Vec<f64>]| rule.aggregate(c), &set, q, &options);
        residual = residual.max(report.max_shift_residual);
        if !report.holds && violations.len() < 5 {
            violations.push(json!({ "trial": trial, "violations": report.violations }));
        }
    }
    let holds = violations.is_empty();
    let summary = json!({
        "rule": rule.to_string(),
        "B": b,
        "d": d,
        "q": q,
        "trials": trials,
        "max_shift_residual": residual,
        "holds": holds,
        "first_violations": violations,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(holds)
}

fn bounds(b: u64, q: u64, r: u64, grad_bound: f64, smoothness: f64, tau_max: u64, d: usize) -> Result<bool> {
    let bi = BoundInputs {
        grad_bound,
        smoothness,
        tau_max,
        dim: d,
    };
    let lemma1 = lemma1_bound(&bi, b, q, r)?;
    let lemma2 = lemma2_bound(&bi, b, q, r)?;
    let summary = json!({
        "B": b,
        "q": q,
        "r": r,
        "c": c_constant_extended(b - r, q - r + 1)?,
        "c_upper_bound": c_upper_bound(b, q, r)?,
        "lemma1": lemma1,
        "lemma2": lemma2,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}
