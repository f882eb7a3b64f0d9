use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::SimOutput;

/// Counts of observed delays `tau`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TauHistogram {
    pub counts: BTreeMap<u64, u64>,
}

impl TauHistogram {
    pub fn record(&mut self, tau: u64) {
        *self.counts.entry(tau).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn max(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let weighted: f64 = self.counts.iter().map(|(&t, &c)| t as f64 * c as f64).sum();
        weighted / total as f64
    }

    /// Fraction of messages with `tau > tau_max`.
    pub fn fraction_exceeding(&self, tau_max: u64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let over: u64 = self.counts.range(tau_max + 1..).map(|(_, &c)| c).sum();
        over as f64 / total as f64
    }
}

/// Delay histogram of a completed run.
pub fn tau_histogram<T>(output: &SimOutput<T>) -> &TauHistogram {
    &output.tau_histogram
}
