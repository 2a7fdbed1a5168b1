//! Run configuration: strict TOML, every key optional with documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::DynModelConfig;
use crate::env::{EnvConfig, RandomizationConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pipeline::LitConfig;
use crate::policy::NetworkConfig;
use crate::ppo::PpoHyper;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub randomization: RandomizationConfig,
    pub network: NetworkConfig,
    pub dynamics: DynModelConfig,
    pub ppo: PpoHyper,
    pub lit: LitConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.randomization.validate()?;
        self.network.validate()?;
        self.dynamics.validate()?;
        self.ppo.validate()?;
        self.lit.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// SHA-256 over the sections that shape trained parameters. The seed and the
    /// evaluation settings are excluded so one checkpoint serves many evaluations.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Trained<'a> {
            env: &'a EnvConfig,
            randomization: &'a RandomizationConfig,
            network: &'a NetworkConfig,
            dynamics: &'a DynModelConfig,
            ppo: &'a PpoHyper,
            lit: &'a LitConfig,
        }
        let t = Trained {
            env: &self.env,
            randomization: &self.randomization,
            network: &self.network,
            dynamics: &self.dynamics,
            ppo: &self.ppo,
            lit: &self.lit,
        };
        let text = toml::to_string(&t).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..16])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml("seed = 7\n[ppo]\nnum_envs = 16\n[lit]\nk = 0.25\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ppo.num_envs, 16);
        assert_eq!(c.lit.k, 0.25);
        assert_eq!(c.ppo.horizon, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 7\n").is_err());
        assert!(RunConfig::from_toml("[ppo]\ngama = 0.9\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(RunConfig::from_toml("[ppo]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[randomization]\nmass_scale = [1.2, 0.8]\n").is_err());
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.eval.payload_grid = vec![1.0, 3.0];
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn fingerprint_tracks_training_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.push_samples = 7;
        b.seed = 3;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.ppo.lr = 1e-3;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 32);
    }
}
