use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::AlgorithmConfig;
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::training::{HeterogeneityConfig, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub name: String,
    /// Expected sites must join before the experiment starts; others are
    /// admitted whenever they show up.
    #[serde(default = "yes")]
    pub expected: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPolicy {
    /// Block the round until the lost site rejoins.
    #[default]
    Wait,
    /// Drop the lost site for the round while quorum holds.
    ContinueWithout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub sites: Vec<SiteSpec>,
    pub rounds: u64,
    pub algorithm: AlgorithmConfig,
    pub trainer: TrainerConfig,
    pub heterogeneity: HeterogeneityConfig,
    #[serde(default)]
    pub on_client_loss: LossPolicy,
    #[serde(default)]
    pub min_clients_per_round: Option<usize>,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_path: PathBuf,
    #[serde(default)]
    pub round_timeout_seconds: Option<f64>,
}

fn default_checkpoint() -> PathBuf {
    PathBuf::from("checkpoint.json")
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("sites: at least one site is required".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sites {
            if s.name.trim().is_empty() {
                return Err(Error::Config("sites: site names must not be empty".into()));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("sites: duplicate site name {:?}", s.name)));
            }
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        match (self.on_client_loss, self.min_clients_per_round) {
            (LossPolicy::ContinueWithout, None) => {
                return Err(Error::Config(
                    "min_clients_per_round is required when on_client_loss is continue_without".into(),
                ))
            }
            (_, Some(0)) => return Err(Error::Config("min_clients_per_round must be >= 1".into())),
            (_, Some(m)) if m > self.sites.len() => {
                return Err(Error::Config(format!(
                    "min_clients_per_round ({m}) exceeds the number of sites ({})",
                    self.sites.len()
                )))
            }
            _ => {}
        }
        let expected = self.sites.iter().filter(|s| s.expected).count();
        if expected == 0 {
            return Err(Error::Config("sites: at least one site must be expected".into()));
        }
        if expected < self.min_clients() {
            return Err(Error::Config(format!(
                "only {expected} expected sites for min_clients_per_round {}",
                self.min_clients()
            )));
        }
        if let Some(t) = self.round_timeout_seconds {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("round_timeout_seconds must be > 0, got {t}")));
            }
        }
        self.algorithm.validate()?;
        self.trainer.validate()?;
        self.heterogeneity.validate()?;
        Ok(())
    }

    /// Quorum for a round; defaults to every site.
    pub fn min_clients(&self) -> usize {
        self.min_clients_per_round.unwrap_or(self.sites.len())
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn expected_sites(&self) -> BTreeSet<String> {
        self.sites.iter().filter(|s| s.expected).map(|s| s.name.clone()).collect()
    }

    pub fn param_dim(&self) -> usize {
        self.trainer.trainer.param_dim(&self.heterogeneity)
    }

    /// Starting global model.
    pub fn initial_global(&self) -> Result<ParameterVector> {
        ParameterVector::zeros(self.param_dim())
    }

    /// SHA-256 over the canonical JSON of everything that shapes the
    /// experiment; the checkpoint location is excluded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.checkpoint_path = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::training::TrainerKind;

    pub(crate) fn sample() -> FederationConfig {
        FederationConfig {
            sites: ["strasbourg", "basel", "mock"]
                .iter()
                .map(|n| SiteSpec { name: n.to_string(), expected: true })
                .collect(),
            rounds: 3,
            algorithm: AlgorithmConfig::fedavg(),
            trainer: TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 1, 7).unwrap(),
            heterogeneity: HeterogeneityConfig {
                base_optimum: vec![1.0, -1.0, 0.5],
                shift_scale: 0.3,
                noise_std: 0.1,
                samples_per_site: 16,
                fraction: 1.0,
                site_fractions: Vec::new(),
            },
            on_client_loss: LossPolicy::Wait,
            min_clients_per_round: None,
            checkpoint_path: "ckpt.json".into(),
            round_timeout_seconds: None,
        }
    }

    #[test]
    fn validation_rules() {
        assert!(sample().validate().is_ok());
        let mut c = sample();
        c.on_client_loss = LossPolicy::ContinueWithout;
        assert!(c.validate().is_err());
        c.min_clients_per_round = Some(4);
        assert!(c.validate().is_err());
        c.min_clients_per_round = Some(2);
        assert!(c.validate().is_ok());
        let mut dup = sample();
        dup.sites[1].name = "strasbourg".into();
        assert!(dup.validate().is_err());
        let mut zero = sample();
        zero.rounds = 0;
        assert!(zero.validate().is_err());
    }

    #[test]
    fn hash_ignores_checkpoint_location() {
        let a = sample();
        let mut b = sample();
        b.checkpoint_path = "elsewhere.json".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.algorithm = AlgorithmConfig::fedprox(0.1);
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
