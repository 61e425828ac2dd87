//! Experiment configuration: one TOML file per archived run, overridable
//! by command-line flags (flags win). Unset horizon and replica counts
//! fall back to per-subcommand defaults so a bare invocation reproduces
//! the standard study.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use jsq_core::ctmc::InitialCondition;
use jsq_core::seqspace::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub choices: u32,
    /// Population sizes for the LLN rate study.
    pub ns: Vec<u64>,
    /// Population size for single-N studies.
    pub n: u64,
    /// Horizon; per-subcommand default when unset.
    pub t_end: Option<f64>,
    /// Sampling grid spacing for sup-over-time statistics.
    pub grid_dt: f64,
    /// Euler-Maruyama step of the OU simulation.
    pub ou_dt: f64,
    pub k_max: usize,
    /// Geometric weight of the comparison norm.
    pub theta: f64,
    /// Replica count; per-subcommand default when unset.
    pub replicas: Option<usize>,
    /// Coordinates `1..=coords` entering the verdicts.
    pub coords: usize,
    pub init: InitialCondition,
    pub seed: u64,
    /// Output directory; no files are written when unset.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            choices: 2,
            ns: vec![100, 400, 1600],
            n: 1000,
            t_end: None,
            grid_dt: 0.05,
            ou_dt: 1e-3,
            k_max: 8,
            theta: 0.5,
            replicas: None,
            coords: 3,
            init: InitialCondition::Empty,
            seed: 0,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
    }

    pub fn params(&self) -> Result<ModelParams, String> {
        ModelParams::new(self.alpha, self.beta, self.choices).map_err(|e| e.to_string())
    }

    /// All the range checks of the underlying modules, surfaced before any
    /// work starts so misconfigurations fail fast with exit code 2.
    pub fn validate(&self) -> Result<(), String> {
        self.params()?;
        if self.ns.is_empty() {
            return Err("ns must list at least one population size".into());
        }
        for &n in self.ns.iter().chain([&self.n]) {
            if n < self.choices as u64 {
                return Err(format!(
                    "population size {n} is below choices = {} (no arrival can sample \
                     {} distinct queues)",
                    self.choices, self.choices
                ));
            }
        }
        if self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err("ns must be strictly increasing".into());
        }
        if let Some(t) = self.t_end {
            if !(t > 0.0) {
                return Err(format!("t_end must be positive, got {t}"));
            }
        }
        if !(self.grid_dt > 0.0) {
            return Err(format!("grid_dt must be positive, got {}", self.grid_dt));
        }
        if !(self.ou_dt > 0.0) {
            return Err(format!("ou_dt must be positive, got {}", self.ou_dt));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if self.replicas == Some(0) {
            return Err("replicas must be at least 1".into());
        }
        if self.coords == 0 {
            return Err("coords must be at least 1".into());
        }
        if self.k_max < self.coords {
            return Err(format!(
                "k_max = {} cannot be below coords = {}",
                self.k_max, self.coords
            ));
        }
        if let InitialCondition::IidGeometric { q, .. } = self.init {
            if !(q > 0.0 && q <= 1.0) {
                return Err(format!("init.q must lie in (0, 1], got {q}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.alpha = 1.0 / 3.0;
        cfg.theta = 0.7;
        cfg.t_end = Some(2.5);
        cfg.replicas = Some(123);
        cfg.init = InitialCondition::IidGeometric {
            q: 0.123456789012345678,
            max_level: 9,
        };
        cfg.out = Some(PathBuf::from("runs/demo"));
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown_keys() {
        let cfg: ExperimentConfig = toml::from_str("seed = 9\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.beta, 2.0);
        assert!(toml::from_str::<ExperimentConfig>("alhpa = 0.5\n").is_err());
    }

    #[test]
    fn validation_messages_name_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid_dt = -1.0;
        assert!(cfg.validate().unwrap_err().contains("grid_dt"));

        let mut cfg = ExperimentConfig::default();
        cfg.theta = 1.5;
        assert!(cfg.validate().unwrap_err().contains("theta"));

        let mut cfg = ExperimentConfig::default();
        cfg.ns = vec![1, 400];
        assert!(cfg.validate().unwrap_err().contains("choices"));

        let mut cfg = ExperimentConfig::default();
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
    }
}
