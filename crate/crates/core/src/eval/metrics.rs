use autodiff::Array;
use serde::{Deserialize, Serialize};

use super::mmd::mmd2_unbiased;
use crate::concepts::{draw_concept, nearest_concept, ConceptTable, Role};
use crate::diffusion::{sample, DenoiserParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::meta::MetaStepRecord;
use crate::rng::{stream_rng, Stream};

/// Samples conditioned on a named concept.
pub fn concept_samples(
    params: &DenoiserParams,
    table: &ConceptTable,
    concept: &str,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Array> {
    let c = table.get(concept)?;
    let cond = table.condition(&c.embedding, 1, params.config().tokens);
    sample(params, &cond, s, &mut stream_rng(seed, Stream::Sampler), n)
}

/// Percentage of rows whose nearest center is `concept`.
pub fn classified_as(table: &ConceptTable, x: &Array, concept: &str) -> f64 {
    let hits = (0..x.rows()).filter(|&i| nearest_concept(table, x.row_slice(i)) == concept).count();
    100.0 * hits as f64 / x.rows() as f64
}

/// Percentage of forget-conditioned samples classified as the forget concept.
pub fn forget_score(params: &DenoiserParams, table: &ConceptTable, s: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    if n < 100 {
        return Err(Error::config("eval.samples", "forget score needs at least 100 samples"));
    }
    let f = &table.forget().name;
    let x = concept_samples(params, table, f, s, n, seed)?;
    Ok(classified_as(table, &x, f))
}

/// Fraction (as a percentage) of samples conditioned on each related
/// concept that land on it; the mean over related concepts.
pub fn related_score(params: &DenoiserParams, table: &ConceptTable, s: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    let related: Vec<&str> = table.with_role(Role::RelatedRetain).map(|c| c.name.as_str()).collect();
    if related.is_empty() {
        return Err(Error::config("world.concepts", "no related concept"));
    }
    let mut acc = 0.0;
    for name in &related {
        let x = concept_samples(params, table, name, s, n, seed)?;
        acc += classified_as(table, &x, name);
    }
    Ok(acc / related.len() as f64)
}

/// Squared MMD between model samples and fresh ground-truth draws of a
/// retained concept.
pub fn retain_mmd(
    params: &DenoiserParams,
    table: &ConceptTable,
    concept: &str,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let c = table.get(concept)?;
    if c.role == Role::Forget {
        return Err(Error::config("eval.retain_concepts", format!("`{concept}` is the forget concept")));
    }
    if n < 2 {
        return Err(Error::config("eval.samples", "retain MMD needs at least 2 samples"));
    }
    let model = concept_samples(params, table, concept, s, n, seed)?;
    let truth = draw_concept(c, n, &mut stream_rng(seed, Stream::Eval));
    mmd2_unbiased(&model, &truth.x)
}

/// Ordinary least squares of `y` on `x`: `(slope, intercept)`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::config("eval.alignment", "least squares needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("least squares with constant abscissa".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// OLS trend of the normalized inner-product term against the step index.
pub fn alignment_series(records: &[MetaStepRecord]) -> Result<(f64, f64)> {
    if records.len() < 2 {
        return Err(Error::config("eval.alignment", "needs at least 2 records"));
    }
    let x: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.inner_product_norm).collect();
    ols(&x, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSummary {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub forget_score: f64,
    /// `(concept, squared MMD)` per retained concept.
    pub retain_mmd: Vec<(String, f64)>,
    pub related_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentSummary>,
}

impl MetricReport {
    pub fn evaluate(
        params: &DenoiserParams,
        table: &ConceptTable,
        s: &NoiseSchedule,
        n: usize,
        seed: u64,
        records: Option<&[MetaStepRecord]>,
    ) -> Result<Self> {
        let forget_score = forget_score(params, table, s, n, seed)?;
        let mut retain = Vec::new();
        for c in table.retained() {
            retain.push((c.name.clone(), retain_mmd(params, table, &c.name, s, n, seed)?));
        }
        let related_score = related_score(params, table, s, n, seed)?;
        let alignment = match records {
            Some(r) if r.len() >= 2 => {
                let (slope, intercept) = alignment_series(r)?;
                Some(AlignmentSummary { slope, intercept })
            }
            _ => None,
        };
        Ok(MetricReport { forget_score, retain_mmd: retain, related_score, alignment })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::default_world;

    #[test]
    fn ols_fixtures() {
        assert_eq!(ols(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), (-1.0, 1.0));
        let (s, _) = ols(&[0.0, 1.0, 2.0, 3.0], &[4.0; 4]).unwrap();
        assert_eq!(s, 0.0);
        // y = 2x + 1 + (+-0.5): slope 2 - 0.3, hand-computed
        let (s, i) = ols(&[0.0, 1.0, 2.0, 3.0], &[1.5, 2.5, 5.5, 6.5]).unwrap();
        assert!((s - 1.8).abs() < 1e-12 && (i - 1.3).abs() < 1e-12);
        assert!(ols(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn classifier_percentages() {
        let t = default_world(0);
        let at_f = Array::row(vec![2.0, 2.0]).broadcast_rows(10);
        let at_u1 = Array::row(vec![-2.0, 2.0]).broadcast_rows(10);
        assert_eq!(classified_as(&t, &at_f, "F"), 100.0);
        assert_eq!(classified_as(&t, &at_u1, "F"), 0.0);
    }
}
