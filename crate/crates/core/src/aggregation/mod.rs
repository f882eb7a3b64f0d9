//! Candidate-gradient aggregation.
//!
//! The three rules (mean, coordinate-wise median, coordinate-wise
//! q-trimmed-mean) are pure functions over a set of `B` candidate vectors.
//! Per iteration the cost is `O(Bd)` for the mean and `O(Bd log B)` for the
//! order-statistic rules, which sort every coordinate column.
//!
//! [`check_qbr`] verifies the q-Byzantine-robust property of any rule on a
//! concrete candidate set, and [`bounds`] holds the constants that govern the
//! variance and bias of a q-BR rule.

pub mod bounds;
mod qbr;
mod rules;

pub use bounds::{
    c_constant, c_constant_exact, c_constant_extended, c_upper_bound, lemma1_bound, lemma2_bound,
    BoundInputs,
};
pub use qbr::{check_qbr, QbrCheckOptions, QbrReport, QbrViolation};
pub use rules::{
    mean_aggregate, median_aggregate, trimmed_mean_aggregate, AggregationRule, CandidateSet,
    RobustnessParams,
};
