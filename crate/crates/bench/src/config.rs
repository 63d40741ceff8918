//! Experiment configuration, mirrored field-for-field by the JSON config
//! file. Every field has a default, so partial configs are valid; unknown
//! fields are rejected.

use ipf_core::filters::FilterKind;
use ipf_core::kf_bank::UtParams;
use ipf_core::models::Lorenz96Config;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// One roster entry: a filter kind and its particle count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub particles: usize,
}

/// Initial estimate bias: a scalar broadcast over every component, or a full
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitBias {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl InitBias {
    pub fn to_vector(&self, n_x: usize) -> Result<DVector<f64>> {
        match self {
            InitBias::Scalar(b) => Ok(DVector::from_element(n_x, *b)),
            InitBias::Vector(v) => {
                if v.len() != n_x {
                    return Err(BenchError::Config(format!(
                        "init_bias has length {}, model dimension is {n_x}",
                        v.len()
                    )));
                }
                Ok(DVector::from_vec(v.clone()))
            }
        }
    }
}

/// The full benchmark protocol configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Lorenz96Config,
    /// Assimilation steps per run.
    pub steps: usize,
    /// Monte Carlo repetitions per filter.
    pub n_mc: usize,
    pub filters: Vec<FilterSpec>,
    /// Reference concentration used by the implicit filters.
    pub alpha: f64,
    pub ut: UtParams,
    /// Resample when `ess <= frac * N`.
    pub resample_threshold_frac: f64,
    /// Added to the true initial state to form the initial estimate.
    pub init_bias: InitBias,
    /// Initial ensemble covariance is `init_spread * I`.
    pub init_spread: f64,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Lorenz96Config::default(),
            steps: 500,
            n_mc: 50,
            filters: vec![
                FilterSpec {
                    kind: FilterKind::Epf,
                    particles: 1000,
                },
                FilterSpec {
                    kind: FilterKind::ExtendedIpf,
                    particles: 1000,
                },
                FilterSpec {
                    kind: FilterKind::Upf,
                    particles: 100,
                },
                FilterSpec {
                    kind: FilterKind::IterativeIpf,
                    particles: 100,
                },
                FilterSpec {
                    kind: FilterKind::UnscentedIpf,
                    particles: 10,
                },
            ],
            alpha: 0.05,
            ut: UtParams::default(),
            resample_threshold_frac: 0.5,
            init_bias: InitBias::Scalar(1.0),
            init_spread: 1.0,
            master_seed: 1729,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_mc == 0 {
            return Err(BenchError::Config("n_mc must be at least 1".into()));
        }
        for spec in &self.filters {
            if spec.particles == 0 {
                return Err(BenchError::Config(format!(
                    "{} needs at least one particle",
                    spec.kind
                )));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(BenchError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold_frac) {
            return Err(BenchError::Config(format!(
                "resample_threshold_frac must lie in [0, 1], got {}",
                self.resample_threshold_frac
            )));
        }
        if self.init_spread.is_nan() || self.init_spread < 0.0 {
            return Err(BenchError::Config(format!(
                "init_spread must be non-negative, got {}",
                self.init_spread
            )));
        }
        self.ut.validate(self.model.n_x)?;
        self.init_bias.to_vector(self.model.n_x)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(BenchError::io(path))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roster_matches_reported_particle_counts() {
        let cfg = ExperimentConfig::default();
        let roster: Vec<(FilterKind, usize)> =
            cfg.filters.iter().map(|f| (f.kind, f.particles)).collect();
        assert_eq!(
            roster,
            vec![
                (FilterKind::Epf, 1000),
                (FilterKind::ExtendedIpf, 1000),
                (FilterKind::Upf, 100),
                (FilterKind::IterativeIpf, 100),
                (FilterKind::UnscentedIpf, 10),
            ]
        );
        assert_eq!(cfg.n_mc, 50);
        assert_eq!(cfg.alpha, 0.05);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"steps": 20, "n_mc": 3}"#).unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.n_mc, 3);
        assert_eq!(cfg.model.n_x, 40);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"stepz": 20}"#).is_err());
    }

    #[test]
    fn bias_forms() {
        let scalar: InitBias = serde_json::from_str("1.5").unwrap();
        assert_eq!(scalar.to_vector(3).unwrap(), DVector::from_element(3, 1.5));
        let vector: InitBias = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(
            vector.to_vector(2).unwrap(),
            DVector::from_vec(vec![1.0, 2.0])
        );
        assert!(vector.to_vector(3).is_err());
    }

    #[test]
    fn validation_rejects_bad_knobs() {
        let mut cfg = ExperimentConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.05;
        cfg.resample_threshold_frac = 1.5;
        assert!(cfg.validate().is_err());
        cfg.resample_threshold_frac = 0.5;
        cfg.n_mc = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
