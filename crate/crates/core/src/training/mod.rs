//! Local training: the trainer contract, two reference trainers and the
//! synthetic non-IID data they train on.

pub mod data;
pub mod least_squares;
pub mod segmentation;

use serde::{Deserialize, Serialize};

use crate::aggregation::{ditto_personal_step, proximal_loss_gradient, AlgorithmConfig, AlgorithmKind};
use crate::error::{Error, Result};
use crate::params::{EvalScore, Metric, ModelUpdate, ParameterVector};

pub use data::{
    generate_site_data, generate_site_split, ClientDataset, HeterogeneityConfig, SiteFraction, Split, Targets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    LeastSquares,
    SyntheticSegmentation,
}

impl TrainerKind {
    /// The metric this trainer is evaluated with.
    pub fn metric(self) -> Metric {
        match self {
            TrainerKind::LeastSquares => Metric::MseLoss,
            TrainerKind::SyntheticSegmentation => Metric::Dice,
        }
    }

    /// Parameter dimension for a given base optimum.
    pub fn param_dim(self, het: &HeterogeneityConfig) -> usize {
        match self {
            TrainerKind::LeastSquares => het.base_optimum.len(),
            TrainerKind::SyntheticSegmentation => segmentation::FEATURES,
        }
    }

    pub fn loss(self, params: &ParameterVector, data: &ClientDataset) -> Result<f64> {
        match self {
            TrainerKind::LeastSquares => least_squares::loss(params, data),
            TrainerKind::SyntheticSegmentation => segmentation::loss(params, data),
        }
    }

    pub fn gradient(self, params: &ParameterVector, data: &ClientDataset) -> Result<ParameterVector> {
        match self {
            TrainerKind::LeastSquares => least_squares::gradient(params, data),
            TrainerKind::SyntheticSegmentation => segmentation::gradient(params, data),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub trainer: TrainerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_local_steps")]
    pub local_steps: u32,
    #[serde(default)]
    pub batch: Batch,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.1
}

fn default_local_steps() -> u32 {
    1
}

impl TrainerConfig {
    pub fn new(trainer: TrainerKind, lr: f64, local_steps: u32, seed: u64) -> Result<Self> {
        let cfg = Self { trainer, lr, local_steps, batch: Batch::Full, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Nominal cost of one round of local work, in seconds: one unit per
    /// multiply-add of the full-batch gradient at 1 GFLOP/s.
    pub fn work_estimate_seconds(&self, data: &ClientDataset) -> f64 {
        let per_row = match self.trainer {
            TrainerKind::LeastSquares => data.feature_dim(),
            TrainerKind::SyntheticSegmentation => data.feature_dim() * segmentation::FEATURES,
        };
        f64::from(self.local_steps) * (data.rows() * per_row) as f64 * 1e-9
    }
}

/// Result of a local training run, before it is stamped with a client id,
/// round and timing.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ParameterVector,
    pub sample_count: u64,
}

impl LocalOutcome {
    pub fn into_update(self, client_id: &str, round: u64, train_seconds: f64) -> Result<ModelUpdate> {
        ModelUpdate::new(client_id, round, self.params, self.sample_count, train_seconds)
    }
}

/// Runs `local_steps` full-batch gradient steps from `start`. FedProx routes
/// the gradient through the proximal term; FedAvg and Ditto's global track
/// use the plain local gradient.
pub fn local_train(
    start: &ParameterVector,
    data: &ClientDataset,
    tcfg: &TrainerConfig,
    acfg: &AlgorithmConfig,
    w_global: &ParameterVector,
) -> Result<LocalOutcome> {
    tcfg.validate()?;
    start.check_dim(w_global)?;
    let mut w = start.clone();
    for step in 0..tcfg.local_steps {
        let grad = tcfg.trainer.gradient(&w, data).map_err(|e| at_step(e, step))?;
        let direction = match acfg.kind {
            AlgorithmKind::Fedprox => proximal_loss_gradient(&grad, &w, w_global, acfg.prox_mu)?,
            AlgorithmKind::Fedavg | AlgorithmKind::Ditto => grad,
        };
        w = w.add_scaled(&direction, -tcfg.lr).map_err(|e| at_step(e, step))?;
    }
    Ok(LocalOutcome { params: w, sample_count: data.rows() as u64 })
}

fn at_step(e: Error, step: u32) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("diverged at local step {step}: {msg}")),
        other => other,
    }
}

/// Scores `params` on `data`. The metric must match the trainer that the
/// dataset was generated for.
pub fn evaluate(params: &ParameterVector, data: &ClientDataset, metric: Metric) -> Result<EvalScore> {
    match (metric, &data.targets) {
        (Metric::MseLoss, Targets::Values(_)) => least_squares::evaluate(params, data),
        (Metric::Dice, Targets::Masks(_)) => segmentation::evaluate(params, data),
        (m, _) => Err(Error::Config(format!("metric {m:?} does not match the dataset's trainer"))),
    }
}

/// A site's training state across rounds.
///
/// Under Ditto the site keeps a personal model `v` next to the global
/// track; only the global track ever leaves the site.
#[derive(Debug, Clone)]
pub struct SiteTrainer {
    pub site: String,
    pub train: ClientDataset,
    pub validation: ClientDataset,
    pub tcfg: TrainerConfig,
    pub acfg: AlgorithmConfig,
    personal: Option<ParameterVector>,
}

impl SiteTrainer {
    pub fn new(
        site: impl Into<String>,
        train: ClientDataset,
        validation: ClientDataset,
        tcfg: TrainerConfig,
        acfg: AlgorithmConfig,
    ) -> Result<Self> {
        tcfg.validate()?;
        acfg.validate()?;
        Ok(Self { site: site.into(), train, validation, tcfg, acfg, personal: None })
    }

    /// Generates the site's synthetic train/validation splits.
    pub fn generate(
        site: impl Into<String>,
        site_index: usize,
        het: &HeterogeneityConfig,
        tcfg: TrainerConfig,
        acfg: AlgorithmConfig,
    ) -> Result<Self> {
        let train = generate_site_split(het, tcfg.trainer, site_index, tcfg.seed, Split::Train)?;
        let validation = generate_site_split(het, tcfg.trainer, site_index, tcfg.seed, Split::Validation)?;
        Self::new(site, train, validation, tcfg, acfg)
    }

    /// One round of local work against `global`; the returned update carries
    /// zero `train_seconds` for the caller to fill in.
    pub fn train_round(&mut self, round: u64, global: &ParameterVector) -> Result<ModelUpdate> {
        let outcome = local_train(global, &self.train, &self.tcfg, &self.acfg, global)?;
        if self.acfg.kind == AlgorithmKind::Ditto {
            let mut v = self.personal.take().unwrap_or_else(|| global.clone());
            for step in 0..self.tcfg.local_steps {
                let grad = self.tcfg.trainer.gradient(&v, &self.train)?;
                v = ditto_personal_step(&v, &grad, global, self.acfg.ditto_lambda, self.tcfg.lr)
                    .map_err(|e| at_step(e, step))?;
            }
            self.personal = Some(v);
        }
        outcome.into_update(&self.site, round, 0.0)
    }

    pub fn evaluate(&self, params: &ParameterVector) -> Result<EvalScore> {
        evaluate(params, &self.validation, self.tcfg.trainer.metric())
    }

    pub fn personal(&self) -> Option<&ParameterVector> {
        self.personal.as_ref()
    }

    /// Drops the personal track, as a restarted site process would.
    pub fn reset_personal(&mut self) {
        self.personal = None;
    }

    pub fn set_algorithm(&mut self, acfg: AlgorithmConfig) -> Result<()> {
        acfg.validate()?;
        self.acfg = acfg;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls_data() -> ClientDataset {
        ClientDataset::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            Targets::Values(vec![1.0, 2.0, 0.0]),
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn single_step_matches_hand_gradient() {
        let tcfg = TrainerConfig::new(TrainerKind::LeastSquares, 0.3, 1, 0).unwrap();
        let start = ParameterVector::new(vec![0.5, -1.0]).unwrap();
        let out = local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedavg(), &start).unwrap();
        // gradient (-1/3, -7/6)
        assert!((out.params.values()[0] - (0.5 + 0.3 / 3.0)).abs() < 1e-15);
        assert!((out.params.values()[1] - (-1.0 + 0.3 * 7.0 / 6.0)).abs() < 1e-15);
        assert_eq!(out.sample_count, 3);
    }

    #[test]
    fn zero_lr_rejected() {
        assert!(TrainerConfig::new(TrainerKind::LeastSquares, 0.0, 1, 0).is_err());
        assert!(TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 0, 0).is_err());
    }

    #[test]
    fn converges_to_generating_optimum() {
        let het = HeterogeneityConfig {
            base_optimum: vec![0.7, -1.2, 2.0],
            shift_scale: 0.0,
            noise_std: 0.0,
            samples_per_site: 24,
            fraction: 1.0,
            site_fractions: Vec::new(),
        };
        let data = generate_site_data(&het, TrainerKind::LeastSquares, 0, 3).unwrap();
        let tcfg = TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 2000, 3).unwrap();
        let start = ParameterVector::zeros(3).unwrap();
        let out = local_train(&start, &data, &tcfg, &AlgorithmConfig::fedavg(), &start).unwrap();
        for (w, t) in out.params.values().iter().zip(&het.base_optimum) {
            assert!((w - t).abs() < 1e-6);
        }
        let at_opt = ParameterVector::new(het.base_optimum.clone()).unwrap();
        assert_eq!(evaluate(&at_opt, &data, Metric::MseLoss).unwrap().mean, 0.0);
    }

    #[test]
    fn divergence_names_the_step() {
        let tcfg = TrainerConfig::new(TrainerKind::LeastSquares, 1e200, 5, 0).unwrap();
        let start = ParameterVector::new(vec![1e200, 1e200]).unwrap();
        let err = local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedavg(), &start).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("local step"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metric_mismatch_is_config_error() {
        let p = ParameterVector::zeros(2).unwrap();
        assert!(matches!(evaluate(&p, &ls_data(), Metric::Dice), Err(Error::Config(_))));
        let a = evaluate(&p, &ls_data(), Metric::MseLoss).unwrap();
        let b = evaluate(&p, &ls_data(), Metric::MseLoss).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let tcfg = TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 1, 0).unwrap();
        let start = ParameterVector::zeros(3).unwrap();
        assert!(matches!(
            local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedavg(), &start),
            Err(Error::Dimension { .. })
        ));
        let g2 = ParameterVector::zeros(2).unwrap();
        assert!(matches!(
            local_train(&g2, &ls_data(), &tcfg, &AlgorithmConfig::fedavg(), &start),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fedprox_pulls_toward_global() {
        let tcfg = TrainerConfig::new(TrainerKind::LeastSquares, 0.1, 50, 0).unwrap();
        let start = ParameterVector::zeros(2).unwrap();
        let plain = local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedavg(), &start).unwrap();
        let prox = local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedprox(5.0), &start).unwrap();
        assert!(prox.params.norm() < plain.params.norm());
        let mu0 = local_train(&start, &ls_data(), &tcfg, &AlgorithmConfig::fedprox(0.0), &start).unwrap();
        assert_eq!(mu0, plain);
    }
}
