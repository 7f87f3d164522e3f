//! Stopping criteria for FL rounds and clustering rounds.
//!
//! Only the fixed-round criterion ships; `satisfied` takes a keyword-metrics
//! map so new criteria (weight change thresholds and the like) can be added
//! without touching existing call sites.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StoppingCriterion {
    FixedRounds { max_rounds: u32 },
}

impl StoppingCriterion {
    pub fn fixed_rounds(max_rounds: u32) -> Self {
        StoppingCriterion::FixedRounds {
            max_rounds: max_rounds.max(1),
        }
    }

    /// `round` is the number of completed rounds. Extra metrics arrive as
    /// keyword arguments; the fixed-round criterion ignores them.
    pub fn satisfied(&self, round: u32, _metrics: &BTreeMap<String, Value>) -> bool {
        match self {
            StoppingCriterion::FixedRounds { max_rounds } => round >= *max_rounds,
        }
    }

    pub fn max_rounds(&self) -> u32 {
        match self {
            StoppingCriterion::FixedRounds { max_rounds } => *max_rounds,
        }
    }
}
