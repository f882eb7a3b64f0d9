use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::rules::CandidateSet;
use crate::error::Result;
use crate::scalar::Scalar;

/// Knobs for [`check_qbr`].
#[derive(Debug, Clone, Copy)]
pub struct QbrCheckOptions {
    /// Number of random shift vectors used for shift-equivariance.
    pub shifts: usize,
    /// Standard deviation of the shift coordinates.
    pub shift_scale: f64,
    /// Maximum absolute residual tolerated for shift-equivariance.
    pub shift_tol: f64,
    /// Slack for the bracketing check, relative to the column's magnitude.
    pub bracket_rel_tol: f64,
    pub seed: u64,
}

impl Default for QbrCheckOptions {
    fn default() -> Self {
        Self {
            shifts: 32,
            shift_scale: 10.0,
            shift_tol: 1e-9,
            bracket_rel_tol: 1e-12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum QbrViolation {
    /// Property (a): `Aggr(h + c) != Aggr(h) + c`.
    ShiftEquivariance {
        shift_index: usize,
        coordinate: usize,
        residual: f64,
    },
    /// Property (b): the aggregate leaves `[min, max]` of a size-`(B - q)` subset.
    Bracketing {
        coordinate: usize,
        subset: Vec<usize>,
        value: f64,
        min: f64,
        max: f64,
    },
    /// The aggregation rule itself failed on the input.
    AggregationFailed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QbrReport {
    pub holds: bool,
    /// Largest shift-equivariance residual observed.
    pub max_shift_residual: f64,
    /// Number of size-`(B - q)` subsets enumerated per coordinate.
    pub subsets_checked: usize,
    pub violations: Vec<QbrViolation>,
}

/// Checks the two q-Byzantine-robust properties of `aggr` on `cs`:
///
/// (a) shift-equivariance on `options.shifts` seeded random shift vectors;
/// (b) for every coordinate, the aggregate lies within `[min, max]` of every
///     size-`(B - q)` subset of the candidates, enumerated exhaustively.
///
/// Violations are collected rather than returned as errors. The first
/// bracketing violation per coordinate is reported.
pub fn check_qbr<T, F>(aggr: F, cs: &CandidateSet<T>, q: usize, options: &QbrCheckOptions) -> QbrReport
where
    T: Scalar,
    F: Fn(&[Vec<T>]) -> Result<Vec<T>>,
{
    let mut violations = Vec::new();
    let b = cs.len();
    let d = cs.dim();

    let base = match aggr(cs.candidates()) {
        Ok(g) => g,
        Err(e) => {
            return QbrReport {
                holds: false,
                max_shift_residual: f64::NAN,
                subsets_checked: 0,
                violations: vec![QbrViolation::AggregationFailed {
                    message: e.to_string(),
                }],
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let scale = T::of(options.shift_scale);
    let mut max_shift_residual = 0.0f64;
    for k in 0..options.shifts {
        let shift: Vec<T> = (0..d).map(|_| T::standard_normal(&mut rng) * scale).collect();
        let shifted = cs.shifted(&shift).expect("shift has the candidate dimension");
        let g = match aggr(shifted.candidates()) {
            Ok(g) => g,
            Err(e) => {
                violations.push(QbrViolation::AggregationFailed {
                    message: e.to_string(),
                });
                continue;
            }
        };
        for j in 0..d {
            let residual = (g[j] - (base[j] + shift[j])).abs().to_f64_lossy();
            if residual.is_nan() || residual > max_shift_residual {
                max_shift_residual = residual;
            }
            if !(residual <= options.shift_tol) {
                violations.push(QbrViolation::ShiftEquivariance {
                    shift_index: k,
                    coordinate: j,
                    residual,
                });
            }
        }
    }

    let keep = b.saturating_sub(q);
    let mut subsets_checked = 0;
    for j in 0..d {
        let column: Vec<f64> = cs.column(j).iter().map(|x| x.to_f64_lossy()).collect();
        let value = base[j].to_f64_lossy();
        let magnitude = column.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let slack = options.bracket_rel_tol * magnitude;
        let mut count = 0;
        for subset in (0..b).combinations(keep) {
            count += 1;
            let (min, max) = subset.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(column[s]), hi.max(column[s]))
            });
            if !(value >= min - slack && value <= max + slack) {
                violations.push(QbrViolation::Bracketing {
                    coordinate: j,
                    subset,
                    value,
                    min,
                    max,
                });
                break;
            }
        }
        subsets_checked = count;
    }

    QbrReport {
        holds: violations.is_empty(),
        max_shift_residual,
        subsets_checked,
        violations,
    }
}
