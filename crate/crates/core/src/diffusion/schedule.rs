use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a linear variance schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 100, beta_start: 1e-3, beta_end: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step tables of a discrete forward process, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas; `sigma_t = sqrt(beta_t)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(NoiseSchedule::from_betas(betas))
    }

    /// Panics unless every beta lies in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0), "betas must lie in (0, 1)");
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        NoiseSchedule { betas, alphas, alpha_bars, sigmas }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps`
pub fn forward_diffuse(x: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check(t)?;
    if x.len() != eps.len() {
        return Err(Error::Shape(format!("x has {} coords, noise has {}", x.len(), eps.len())));
    }
    let ab = s.alpha_bar(t);
    Ok(diffuse_with(x, eps, ab))
}

pub(crate) fn diffuse_with(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x.iter().zip(eps).map(|(xi, ei)| a * xi + b * ei).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]);
        assert_eq!(s.alpha_bar(2), 0.9 * 0.8);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn invariants_hold() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.sigma(t) >= 0.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn noiseless_limit_and_direct_formula() {
        let s = NoiseSchedule::from_betas(vec![0.75]);
        assert_eq!(forward_diffuse(&[1.0, 0.0], 1, &[0.0, 0.0], &s).unwrap(), vec![0.5, 0.0]);
        let xt = forward_diffuse(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap();
        assert_eq!(xt, vec![0.5, 0.75f64.sqrt()]);
        assert_eq!(diffuse_with(&[0.3, -2.0], &[9.0, 9.0], 1.0), vec![0.3, -2.0]);
    }

    #[test]
    fn timestep_out_of_range() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        assert!(matches!(forward_diffuse(&[0.0], 0, &[0.0], &s), Err(Error::Timestep { .. })));
        assert!(matches!(forward_diffuse(&[0.0], 6, &[0.0], &s), Err(Error::Timestep { .. })));
    }
}
