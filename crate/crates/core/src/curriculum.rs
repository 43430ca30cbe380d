//! Competence schedule driving the edge-drop ratio.
//!
//! `c(t) = min(1, (t (1 - c0^p) / T + c0^p)^(1/p))` starts at `c0`, reaches
//! 1 at `t = T` and stays there. Larger `p` rises faster early and flattens
//! later. The drop ratio of an epoch is `min(c(t), beta_max)`.

use serde::{Deserialize, Serialize};

use crate::error::{CptError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompetenceConfig {
    /// Initial competence, in (0, 1].
    pub c0: f64,
    /// Sharpness, at least 1.
    pub p: f64,
    /// Iterations until full competence (T).
    pub max_iter: usize,
    /// Upper bound on the drop ratio.
    pub beta_max: f64,
}

impl CompetenceConfig {
    pub fn new(c0: f64, p: f64, max_iter: usize) -> Result<Self> {
        let cfg = Self {
            c0,
            p,
            max_iter,
            beta_max: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_beta_max(mut self, beta_max: f64) -> Result<Self> {
        self.beta_max = beta_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c0 <= 1.0) {
            return Err(CptError::Config(format!("c0 must lie in (0, 1], got {}", self.c0)));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(CptError::Config(format!("p must be a finite value >= 1, got {}", self.p)));
        }
        if self.max_iter == 0 {
            return Err(CptError::Config("curriculum length T must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return Err(CptError::Config(format!(
                "beta_max must lie in [0, 1], got {}",
                self.beta_max
            )));
        }
        Ok(())
    }
}

impl Default for CompetenceConfig {
    fn default() -> Self {
        Self {
            c0: 0.01,
            p: 2.0,
            max_iter: 2000,
            beta_max: 1.0,
        }
    }
}

pub fn competence(t: usize, cfg: &CompetenceConfig) -> Result<f64> {
    cfg.validate()?;
    let c0p = cfg.c0.powf(cfg.p);
    let arg = t as f64 * ((1.0 - c0p) / cfg.max_iter as f64) + c0p;
    Ok(arg.powf(1.0 / cfg.p).min(1.0))
}

pub fn beta_for_epoch(t: usize, cfg: &CompetenceConfig) -> Result<f64> {
    Ok(competence(t, cfg)?.min(cfg.beta_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        let cfg = CompetenceConfig::new(0.1, 2.0, 2000).unwrap();
        assert!((competence(0, &cfg).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(competence(2000, &cfg).unwrap(), 1.0);
        assert_eq!(competence(5000, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn square_root_midpoint() {
        let cfg = CompetenceConfig::new(0.1, 2.0, 2000).unwrap();
        // sqrt(500 * 0.99 / 2000 + 0.01) = sqrt(0.2575)
        let c = competence(500, &cfg).unwrap();
        assert!((c - 0.507_444_578_254_611_4).abs() < 1e-12, "{c}");
    }

    #[test]
    fn linear_case_and_cap() {
        let cfg = CompetenceConfig::new(0.2, 1.0, 10).unwrap();
        assert!((beta_for_epoch(5, &cfg).unwrap() - 0.6).abs() < 1e-15);
        let capped = cfg.with_beta_max(0.5).unwrap();
        assert_eq!(beta_for_epoch(10, &capped).unwrap(), 0.5);
        assert_eq!(beta_for_epoch(0, &capped).unwrap(), 0.2);
    }

    #[test]
    fn invalid_configs() {
        assert!(CompetenceConfig::new(0.0, 2.0, 10).is_err());
        assert!(CompetenceConfig::new(1.5, 2.0, 10).is_err());
        assert!(CompetenceConfig::new(0.1, 0.5, 10).is_err());
        assert!(CompetenceConfig::new(0.1, 2.0, 0).is_err());
        let cfg = CompetenceConfig::new(0.1, 2.0, 10).unwrap();
        assert!(cfg.with_beta_max(1.2).is_err());
    }

    #[test]
    fn full_initial_competence_is_constant() {
        let cfg = CompetenceConfig::new(1.0, 3.0, 50).unwrap();
        for t in 0..60 {
            assert_eq!(competence(t, &cfg).unwrap(), 1.0);
        }
    }
}
