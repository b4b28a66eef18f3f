use std::path::Path;

use aqflow_core::loss::LossConfig;
use aqflow_core::metrics::EnergyModel;
use aqflow_core::optimize::SolverConfig;
use aqflow_core::synth::SceneSpec;
use aqflow_snn::train::TrainConfig;
use aqflow_snn::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable of a run, one TOML section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub loss: LossConfig,
    pub solver: SolverConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub energy: EnergyModel,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_phi: bool,
    pub lambda0: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.scene.seed = seed;
            self.network.seed = seed;
        }
        if o.no_phi {
            self.solver.fit_phi = false;
            self.network.predict_phi = false;
        }
        if let Some(l0) = o.lambda0 {
            self.loss.lambda0 = l0;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |section: &str, e: aqflow_core::Error| CliError::Usage(format!("[{section}] {e}"));
        self.scene.validate().map_err(|e| usage("scene", e))?;
        self.loss.validate().map_err(|e| usage("loss", e))?;
        self.solver.validate().map_err(|e| usage("solver", e))?;
        self.network.validate().map_err(|e| usage("network", e))?;
        self.train.validate().map_err(|e| usage("train", e))?;
        self.energy.validate().map_err(|e| usage("energy", e))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(7),
            no_phi: true,
            lambda0: Some(0.0),
        });
        cfg.train.max_updates = Some(5);
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg = RunConfig::parse("[scene]\nnoise_rate = 5.0\n[scene.pattern]\nkind = \"step_edge\"\norientation_deg = 30.0\n").unwrap();
        assert_eq!(cfg.scene.noise_rate, 5.0);
        assert_eq!(cfg.solver, SolverConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[solver]\nmax_iter = 3\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
    }
}
