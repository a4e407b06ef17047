//! Metrics: forget-concept score, retain MMD, related-concept score and the
//! gradient-alignment trend.

mod metrics;
mod mmd;
mod plot;

pub use metrics::{
    alignment_series, classified_as, concept_samples, forget_score, ols, related_score, retain_mmd,
    AlignmentSummary, MetricReport,
};
pub use mmd::{median_bandwidth, mmd2_unbiased, mmd2_unbiased_with};
pub use plot::{line_chart_svg, Series};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample counts and seeds shared by every metric evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    /// Concepts averaged into the curve's retain MMD.
    pub retain_concepts: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 1000, seed: 7, retain_concepts: vec!["U1".into(), "U2".into()] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::config("eval.samples", "must be at least 100"));
        }
        if self.retain_concepts.is_empty() {
            return Err(Error::config("eval.retain_concepts", "need at least one concept"));
        }
        Ok(())
    }
}
