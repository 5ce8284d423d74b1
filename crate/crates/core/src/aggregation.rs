//! FedAvg aggregation, the FedProx proximal gradient and the Ditto
//! personalisation step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModelUpdate, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Fedavg,
    Fedprox,
    Ditto,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    SampleCount,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub ditto_lambda: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

impl AlgorithmConfig {
    pub fn fedavg() -> Self {
        Self { kind: AlgorithmKind::Fedavg, prox_mu: 0.0, ditto_lambda: 0.0, weighting: Weighting::SampleCount }
    }

    pub fn fedprox(mu: f64) -> Self {
        Self { kind: AlgorithmKind::Fedprox, prox_mu: mu, ..Self::fedavg() }
    }

    pub fn ditto(lambda: f64) -> Self {
        Self { kind: AlgorithmKind::Ditto, ditto_lambda: lambda, ..Self::fedavg() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("prox_mu", self.prox_mu), ("ditto_lambda", self.ditto_lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        match self.kind {
            AlgorithmKind::Fedavg if self.prox_mu != 0.0 || self.ditto_lambda != 0.0 => {
                Err(Error::Config("fedavg requires prox_mu = 0 and ditto_lambda = 0".into()))
            }
            AlgorithmKind::Fedprox if self.ditto_lambda != 0.0 => {
                Err(Error::Config("fedprox requires ditto_lambda = 0".into()))
            }
            AlgorithmKind::Ditto if self.prox_mu != 0.0 => Err(Error::Config("ditto requires prox_mu = 0".into())),
            _ => Ok(()),
        }
    }
}

/// Weighted average of client parameters: `Σ (n_k / Σn) w_k` under
/// sample-count weighting, the plain mean under uniform weighting.
///
/// All updates must belong to the same round and share a dimension.
pub fn federated_average(updates: &[ModelUpdate], weighting: Weighting) -> Result<ParameterVector> {
    let first = updates.first().ok_or(Error::EmptyAggregation)?;
    let dim = first.params.dim();
    for u in updates {
        if u.round != first.round {
            return Err(Error::Protocol(format!(
                "cannot aggregate round {} together with round {}",
                u.round, first.round
            )));
        }
        if u.params.dim() != dim {
            return Err(Error::dim(dim, u.params.dim()));
        }
        u.validate()?;
    }

    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0; updates.len()],
        Weighting::SampleCount => updates.iter().map(|u| u.sample_count as f64).collect(),
    };
    let total: f64 = weights.iter().sum();

    // Accumulate offsets from the first update so that averaging identical
    // vectors returns them exactly.
    let anchor = first.params.values();
    let mut offset = vec![0.0; dim];
    for (u, w) in updates.iter().zip(&weights).skip(1) {
        let share = w / total;
        for ((o, v), a) in offset.iter_mut().zip(u.params.values()).zip(anchor) {
            *o += share * (v - a);
        }
    }
    let values = anchor.iter().zip(&offset).map(|(a, o)| a + o).collect();
    ParameterVector::new(values)
}

/// FedProx local gradient `∇F_k(w) + μ (w − w_global)`.
///
/// With `mu == 0` the local gradient is returned untouched, so a FedProx run
/// with μ = 0 is bit-identical to FedAvg.
pub fn proximal_loss_gradient(
    local_grad: &ParameterVector,
    w: &ParameterVector,
    w_global: &ParameterVector,
    mu: f64,
) -> Result<ParameterVector> {
    local_grad.check_dim(w)?;
    w.check_dim(w_global)?;
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::Domain(format!("proximal mu must be >= 0, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(local_grad.clone());
    }
    let values = local_grad
        .values()
        .iter()
        .zip(w.values().iter().zip(w_global.values()))
        .map(|(g, (wi, gi))| g + mu * (wi - gi))
        .collect();
    ParameterVector::new(values)
}

/// One Ditto personal-model step `v − lr (∇F_k(v) + λ (v − w_global))`.
pub fn ditto_personal_step(
    v: &ParameterVector,
    local_grad_at_v: &ParameterVector,
    w_global: &ParameterVector,
    lambda: f64,
    lr: f64,
) -> Result<ParameterVector> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be > 0, got {lr}")));
    }
    // The regulariser gradient has the same form as the proximal term, so
    // λ = 0 collapses to a plain local step through the same code path.
    let direction = proximal_loss_gradient(local_grad_at_v, v, w_global, lambda)?;
    v.add_scaled(&direction, -lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn update(id: &str, round: u64, v: &[f64], n: u64) -> ModelUpdate {
        ModelUpdate::new(id, round, pv(v), n, 0.0).unwrap()
    }

    #[test]
    fn average_examples() {
        let ups = [update("a", 0, &[1.0, 3.0], 5), update("b", 0, &[3.0, 5.0], 5)];
        assert_eq!(federated_average(&ups, Weighting::SampleCount).unwrap(), pv(&[2.0, 4.0]));

        let ups = [update("a", 0, &[0.0, 0.0], 1), update("b", 0, &[4.0, 8.0], 3)];
        assert_eq!(federated_average(&ups, Weighting::SampleCount).unwrap(), pv(&[3.0, 6.0]));
        assert_eq!(federated_average(&ups, Weighting::Uniform).unwrap(), pv(&[2.0, 4.0]));

        let single = [update("a", 3, &[0.1, -7.25], 9)];
        assert_eq!(federated_average(&single, Weighting::SampleCount).unwrap(), pv(&[0.1, -7.25]));
    }

    #[test]
    fn average_errors() {
        assert!(matches!(federated_average(&[], Weighting::Uniform), Err(Error::EmptyAggregation)));
        let mixed_dims = [update("a", 0, &[1.0], 1), update("b", 0, &[1.0, 2.0], 1)];
        assert!(matches!(federated_average(&mixed_dims, Weighting::Uniform), Err(Error::Dimension { .. })));
        let mixed_rounds = [update("a", 0, &[1.0], 1), update("b", 1, &[1.0], 1)];
        assert!(matches!(federated_average(&mixed_rounds, Weighting::Uniform), Err(Error::Protocol(_))));
    }

    #[test]
    fn proximal_examples() {
        let g = pv(&[0.3, -1.7]);
        let out = proximal_loss_gradient(&g, &pv(&[5.0, 6.0]), &pv(&[-1.0, 2.0]), 0.0).unwrap();
        assert_eq!(out.values(), g.values());

        let out = proximal_loss_gradient(&pv(&[0.0]), &pv(&[2.0]), &pv(&[0.0]), 1.0).unwrap();
        assert_eq!(out.values(), &[2.0]);

        assert!(proximal_loss_gradient(&pv(&[0.0]), &pv(&[2.0, 1.0]), &pv(&[0.0]), 1.0).is_err());
    }

    #[test]
    fn proximal_descent_reaches_regularized_minimizer() {
        // ½(w − 2)² + (μ/2) w², μ = 1: minimiser (2 + μ·0) / (1 + μ) = 1.
        let global = pv(&[0.0]);
        let mut w = pv(&[0.0]);
        for _ in 0..200 {
            let grad = pv(&[w.values()[0] - 2.0]);
            let dir = proximal_loss_gradient(&grad, &w, &global, 1.0).unwrap();
            w = w.add_scaled(&dir, -0.1).unwrap();
        }
        assert!((w.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ditto_examples() {
        let out = ditto_personal_step(&pv(&[1.0]), &pv(&[0.0]), &pv(&[0.0]), 2.0, 0.1).unwrap();
        assert!((out.values()[0] - 0.8).abs() < 1e-15);

        let v = pv(&[0.4, -2.0]);
        let g = pv(&[1.5, 0.25]);
        let plain = v.add_scaled(&g, -0.05).unwrap();
        let l0 = ditto_personal_step(&v, &g, &pv(&[9.0, 9.0]), 0.0, 0.05).unwrap();
        assert_eq!(l0, plain);
        let at_global = ditto_personal_step(&v, &g, &v, 123.0, 0.05).unwrap();
        assert_eq!(at_global, plain);

        assert!(ditto_personal_step(&v, &g, &v, 1.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlgorithmConfig::fedavg().validate().is_ok());
        assert!(AlgorithmConfig { prox_mu: 0.1, ..AlgorithmConfig::fedavg() }.validate().is_err());
        assert!(AlgorithmConfig::fedprox(-1.0).validate().is_err());
        assert!(AlgorithmConfig::ditto(0.5).validate().is_ok());
    }

    fn update_set() -> impl Strategy<Value = Vec<(Vec<f64>, u64)>> {
        (1usize..12, 1usize..6)
            .prop_flat_map(|(dim, k)| prop::collection::vec((prop::collection::vec(-50.0f64..50.0, dim), 1u64..100), k))
    }

    proptest! {
        #[test]
        fn uniform_copies_are_fixed_points(v in prop::collection::vec(-1e6f64..1e6, 1..10), k in 1usize..9) {
            let ups: Vec<_> = (0..k).map(|i| update(&i.to_string(), 0, &v, 1)).collect();
            let avg = federated_average(&ups, Weighting::Uniform).unwrap();
            prop_assert_eq!(avg.values(), &v[..]);
        }

        #[test]
        fn average_is_convex_combination(set in update_set()) {
            let ups: Vec<_> = set.iter().enumerate()
                .map(|(i, (v, n))| update(&i.to_string(), 0, v, *n)).collect();
            let avg = federated_average(&ups, Weighting::SampleCount).unwrap();
            for (j, a) in avg.values().iter().enumerate() {
                let lo = set.iter().map(|(v, _)| v[j]).fold(f64::INFINITY, f64::min);
                let hi = set.iter().map(|(v, _)| v[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*a >= lo - 1e-9 && *a <= hi + 1e-9);
            }
        }

        #[test]
        fn equal_counts_match_uniform_bitwise(set in update_set(), n in 1u64..1000) {
            let ups: Vec<_> = set.iter().enumerate()
                .map(|(i, (v, _))| update(&i.to_string(), 0, v, n)).collect();
            prop_assert_eq!(
                federated_average(&ups, Weighting::SampleCount).unwrap(),
                federated_average(&ups, Weighting::Uniform).unwrap()
            );
        }
    }
}
