use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{total_cmp, Scalar};

/// A validated set of `B >= 1` candidate vectors of a common dimension `d >= 1`
/// with only finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    candidates: Vec<Vec<T>>,
    dim: usize,
}

impl<T: Scalar> CandidateSet<T> {
    pub fn new(candidates: Vec<Vec<T>>) -> Result<Self> {
        let dim = check_shape(&candidates)?;
        for (b, c) in candidates.iter().enumerate() {
            if let Some(j) = c.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "candidate {b} has a non-finite value at coordinate {j}"
                )));
            }
        }
        Ok(Self { candidates, dim })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn candidates(&self) -> &[Vec<T>] {
        &self.candidates
    }

    /// Returns a copy with `shift` added to every candidate.
    pub fn shifted(&self, shift: &[T]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: shift.len(),
            });
        }
        let candidates = self
            .candidates
            .iter()
            .map(|c| c.iter().zip(shift).map(|(&x, &s)| x + s).collect())
            .collect();
        Ok(Self {
            candidates,
            dim: self.dim,
        })
    }

    /// Values of coordinate `j` across all candidates, in candidate order.
    pub fn column(&self, j: usize) -> Vec<T> {
        self.candidates.iter().map(|c| c[j]).collect()
    }

    pub fn into_inner(self) -> Vec<Vec<T>> {
        self.candidates
    }
}

/// Trim order `q` and assumed Byzantine count `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessParams {
    pub q: usize,
    pub r: usize,
}

impl RobustnessParams {
    /// Checks `0 <= r <= q < B/2`.
    pub fn validate(&self, buffers: usize) -> Result<()> {
        if self.r > self.q {
            return Err(Error::InvalidParameter(format!(
                "r <= q required (r = {}, q = {})",
                self.r, self.q
            )));
        }
        if 2 * self.q >= buffers {
            return Err(Error::InvalidParameter(format!(
                "q < B/2 required (q = {}, B = {buffers})",
                self.q
            )));
        }
        Ok(())
    }
}

/// Aggregation rule applied to the buffered candidates at each SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    Mean,
    Median,
    TrimmedMean { q: usize },
}

impl AggregationRule {
    pub fn aggregate<T: Scalar>(&self, candidates: &[Vec<T>]) -> Result<Vec<T>> {
        match *self {
            AggregationRule::Mean => mean_aggregate(candidates),
            AggregationRule::Median => median_aggregate(candidates),
            AggregationRule::TrimmedMean { q } => trimmed_mean_aggregate(candidates, q),
        }
    }

    /// Largest `q` for which the rule is q-BR with `buffers` candidates.
    /// The mean is not robust for any `q > 0`; a zero-trim mean neither.
    pub fn robustness(&self, buffers: usize) -> usize {
        match *self {
            AggregationRule::Mean => 0,
            AggregationRule::Median => buffers.saturating_sub(1) / 2,
            AggregationRule::TrimmedMean { q } => q,
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::Mean => write!(f, "mean"),
            AggregationRule::Median => write!(f, "median"),
            AggregationRule::TrimmedMean { q } => write!(f, "trmean({q})"),
        }
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    /// Accepts `mean`, `median`, `trmean(q)` or `trmean:q`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "mean" => return Ok(AggregationRule::Mean),
            "median" => return Ok(AggregationRule::Median),
            _ => {}
        }
        let q = s
            .strip_prefix("trmean(")
            .and_then(|rest| rest.strip_suffix(')'))
            .or_else(|| s.strip_prefix("trmean:"))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown aggregation rule `{s}`")))?;
        let q = q
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad trim order in `{s}`")))?;
        Ok(AggregationRule::TrimmedMean { q })
    }
}

/// Validates shape only; non-finite entries are allowed so Byzantine buffers
/// can flow through the robust rules.
fn check_shape<T>(candidates: &[Vec<T>]) -> Result<usize> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::InvalidInput("empty candidate set".into()))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::InvalidInput("candidates have dimension 0".into()));
    }
    for c in candidates {
        if c.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.len(),
            });
        }
    }
    Ok(dim)
}

/// Coordinate-wise arithmetic mean.
pub fn mean_aggregate<T: Scalar>(candidates: &[Vec<T>]) -> Result<Vec<T>> {
    let dim = check_shape(candidates)?;
    let count = T::of(candidates.len() as f64);
    let mut out = vec![T::zero(); dim];
    for c in candidates {
        for (o, &x) in out.iter_mut().zip(c) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= count;
    }
    Ok(out)
}

/// Coordinate-wise median. For even `B` the two middle order statistics are
/// averaged. Ties keep sorted order.
pub fn median_aggregate<T: Scalar>(candidates: &[Vec<T>]) -> Result<Vec<T>> {
    let dim = check_shape(candidates)?;
    let b = candidates.len();
    let mut column = Vec::with_capacity(b);
    let two = T::of(2.0);
    Ok((0..dim)
        .map(|j| {
            sorted_column(candidates, j, &mut column);
            if b % 2 == 1 {
                column[b / 2]
            } else {
                let (lo, hi) = (column[b / 2 - 1], column[b / 2]);
                lo / two + hi / two
            }
        })
        .collect())
}

/// Coordinate-wise q-trimmed-mean: per coordinate, the mean of the `B - 2q`
/// values left after dropping the `q` largest and `q` smallest.
///
/// `q = 0` is accepted and equals the mean; it is not robust.
pub fn trimmed_mean_aggregate<T: Scalar>(candidates: &[Vec<T>], q: usize) -> Result<Vec<T>> {
    let dim = check_shape(candidates)?;
    let b = candidates.len();
    if 2 * q >= b {
        return Err(Error::InvalidParameter(format!(
            "trimmed mean needs q < B/2 (q = {q}, B = {b})"
        )));
    }
    let kept = T::of((b - 2 * q) as f64);
    let mut column = Vec::with_capacity(b);
    Ok((0..dim)
        .map(|j| {
            sorted_column(candidates, j, &mut column);
            let sum: T = column[q..b - q].iter().copied().sum();
            sum / kept
        })
        .collect())
}

fn sorted_column<T: Scalar>(candidates: &[Vec<T>], j: usize, column: &mut Vec<T>) {
    column.clear();
    column.extend(candidates.iter().map(|c| c[j]));
    column.sort_by(total_cmp);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_aggregate(&col(&[1.0, 2.0, 3.0])).unwrap(), vec![2.0]);
        assert_eq!(
            mean_aggregate(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn mean_dragged_by_one_outlier() {
        let cs = col(&[0.1, 0.9, 0.5, 1.0, 50.0]);
        let m = mean_aggregate(&cs).unwrap()[0];
        assert!(m >= 10.0);
        assert!(cs[..4].iter().all(|c| m > c[0]));
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median_aggregate(&col(&[3.0, 1.0, 2.0])).unwrap(), vec![2.0]);
        assert_eq!(
            median_aggregate(&col(&[10.0, 1.0, 3.0, 2.0])).unwrap(),
            vec![2.5]
        );
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(
            trimmed_mean_aggregate(&col(&[0.0, 1.0, 2.0, 3.0, 100.0]), 1).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            trimmed_mean_aggregate(&col(&[5.0; 5]), 1).unwrap(),
            vec![5.0]
        );
        let vals = [4.0, -1.0, 7.5, 3.25, 0.0];
        assert_eq!(
            trimmed_mean_aggregate(&col(&vals), 2).unwrap(),
            median_aggregate(&col(&vals)).unwrap()
        );
    }

    #[test]
    fn zero_trim_is_mean() {
        let cs = vec![vec![1.0, -2.0], vec![4.0, 8.0], vec![0.5, 0.25]];
        assert_eq!(
            trimmed_mean_aggregate(&cs, 0).unwrap(),
            mean_aggregate(&cs).unwrap()
        );
    }

    #[test]
    fn trim_order_too_large() {
        let err = trimmed_mean_aggregate(&col(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn empty_and_ragged_inputs() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            mean_aggregate(&empty),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            median_aggregate(&empty),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            median_aggregate(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(CandidateSet::new(vec![vec![f64::NAN]]).is_err());
        assert!(CandidateSet::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn non_finite_values_are_trimmed() {
        let cs = col(&[1.0, f64::NAN, 2.0, f64::INFINITY, 3.0, f64::NEG_INFINITY, 2.5]);
        let g = trimmed_mean_aggregate(&cs, 2).unwrap();
        assert!(g[0].is_finite());
        assert!((1.0..=3.0).contains(&g[0]));
        assert!(median_aggregate(&cs).unwrap()[0].is_finite());
        assert!(mean_aggregate(&cs).unwrap()[0].is_nan());
    }

    #[test]
    fn f32_rules() {
        let cs: Vec<Vec<f32>> = vec![vec![1.0], vec![2.0], vec![9.0]];
        assert_eq!(median_aggregate(&cs).unwrap(), vec![2.0f32]);
        assert_eq!(trimmed_mean_aggregate(&cs, 1).unwrap(), vec![2.0f32]);
    }

    #[test]
    fn rule_parsing_and_display() {
        for (s, rule) in [
            ("mean", AggregationRule::Mean),
            ("median", AggregationRule::Median),
            ("trmean(3)", AggregationRule::TrimmedMean { q: 3 }),
            ("trmean:2", AggregationRule::TrimmedMean { q: 2 }),
        ] {
            assert_eq!(s.parse::<AggregationRule>().unwrap(), rule);
        }
        assert_eq!(AggregationRule::TrimmedMean { q: 3 }.to_string(), "trmean(3)");
        assert!("krum".parse::<AggregationRule>().is_err());
        assert_eq!(AggregationRule::Median.robustness(10), 4);
        assert_eq!(AggregationRule::Median.robustness(5), 2);
    }

    #[test]
    fn robustness_params_validation() {
        assert!(RobustnessParams { q: 3, r: 3 }.validate(10).is_ok());
        assert!(RobustnessParams { q: 5, r: 0 }.validate(10).is_err());
        assert!(RobustnessParams { q: 1, r: 2 }.validate(10).is_err());
    }
}
