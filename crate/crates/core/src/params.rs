//! Parameter vectors, model updates and evaluation scores.
//!
//! Model weights travel as a single flat `f64` vector; any layer structure
//! is private to the trainer that produced it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat, ordered model weights. Never empty, never non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("parameter vector must not be empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite ({})", values[i])));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn check_dim(&self, other: &ParameterVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::dim(self.dim(), other.dim()));
        }
        Ok(())
    }

    /// Element-wise `self + coeff * other`.
    pub fn add_scaled(&self, other: &ParameterVector, coeff: f64) -> Result<ParameterVector> {
        add_scaled(self, other, coeff)
    }

    pub fn l2_distance(&self, other: &ParameterVector) -> Result<f64> {
        l2_distance(self, other)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}

/// Element-wise `a + coeff * b`.
pub fn add_scaled(a: &ParameterVector, b: &ParameterVector, coeff: f64) -> Result<ParameterVector> {
    a.check_dim(b)?;
    if !coeff.is_finite() {
        return Err(Error::Numeric(format!("coefficient {coeff} is not finite")));
    }
    let values: Vec<f64> = a.0.iter().zip(&b.0).map(|(x, y)| x + coeff * y).collect();
    ParameterVector::new(values)
}

/// Euclidean distance between two parameter vectors.
pub fn l2_distance(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    a.check_dim(b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// A client's post-training parameters for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelUpdate {
    pub client_id: String,
    pub round: u64,
    pub params: ParameterVector,
    pub sample_count: u64,
    pub train_seconds: f64,
}

impl ModelUpdate {
    pub fn new(
        client_id: impl Into<String>,
        round: u64,
        params: ParameterVector,
        sample_count: u64,
        train_seconds: f64,
    ) -> Result<Self> {
        let update = Self { client_id: client_id.into(), round, params, sample_count, train_seconds };
        update.validate()?;
        Ok(update)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Domain(format!("update from {} has sample_count 0", self.client_id)));
        }
        if !(self.train_seconds.is_finite() && self.train_seconds >= 0.0) {
            return Err(Error::Domain(format!(
                "update from {} has invalid train_seconds {}",
                self.client_id, self.train_seconds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    MseLoss,
}

impl Metric {
    /// True when a larger value is a better model.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Dice)
    }
}

/// Mean and spread of a metric over evaluation cases.
///
/// `std` is the population standard deviation over cases (images for Dice,
/// samples for MSE), not over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalScore {
    pub mean: f64,
    pub std: f64,
    pub metric: Metric,
}

impl EvalScore {
    pub fn new(mean: f64, std: f64, metric: Metric) -> Result<Self> {
        let score = Self { mean, std, metric };
        score.validate()?;
        Ok(score)
    }

    /// Summarise per-case values.
    pub fn from_cases(cases: &[f64], metric: Metric) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Domain("no cases to score".into()));
        }
        let n = cases.len() as f64;
        let mean = cases.iter().sum::<f64>() / n;
        let var = cases.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        // Summation can leave Dice a hair outside [0, 1].
        let mean = match metric {
            Metric::Dice => mean.clamp(0.0, 1.0),
            Metric::MseLoss => mean,
        };
        Self::new(mean, var.sqrt(), metric)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.std.is_finite() || self.std < 0.0 {
            return Err(Error::Domain(format!("invalid score {self:?}")));
        }
        if self.metric == Metric::Dice && !(0.0..=1.0).contains(&self.mean) {
            return Err(Error::Domain(format!("dice mean {} outside [0, 1]", self.mean)));
        }
        Ok(())
    }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)` of two binary masks.
///
/// Two empty masks agree perfectly and score 1.0.
pub fn dice_score(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::dim(truth.len(), predicted.len()));
    }
    let mut both = 0u64;
    let mut total = 0u64;
    for (&p, &t) in predicted.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Domain(format!("mask entries must be 0 or 1, got ({p}, {t})")));
        }
        both += u64::from(p & t);
        total += u64::from(p) + u64::from(t);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn add_scaled_examples() {
        assert_eq!(add_scaled(&pv(&[1.0, 2.0]), &pv(&[3.0, 4.0]), 0.0).unwrap(), pv(&[1.0, 2.0]));
        assert_eq!(add_scaled(&pv(&[1.0, 2.0]), &pv(&[1.0, 2.0]), -1.0).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(add_scaled(&pv(&[1.0, 0.0]), &pv(&[2.0, 2.0]), 0.5).unwrap(), pv(&[2.0, 1.0]));
    }

    #[test]
    fn add_scaled_errors() {
        assert!(matches!(add_scaled(&pv(&[1.0]), &pv(&[1.0, 2.0]), 1.0), Err(Error::Dimension { .. })));
        assert!(matches!(add_scaled(&pv(&[1e308]), &pv(&[1e308]), 10.0), Err(Error::Numeric(_))));
        assert!(matches!(add_scaled(&pv(&[1.0]), &pv(&[1.0]), f64::NAN), Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&pv(&[1.0, 1.0]), &pv(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(l2_distance(&pv(&[0.0, 0.0]), &pv(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(l2_distance(&pv(&[2.0]), &pv(&[-2.0])).unwrap(), 4.0);
        assert!(matches!(l2_distance(&pv(&[2.0]), &pv(&[-2.0, 1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_vector_rejects_bad_values() {
        assert!(ParameterVector::new(vec![]).is_err());
        assert!(ParameterVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(serde_json::from_str::<ParameterVector>("[]").is_err());
    }

    #[test]
    fn dice_examples() {
        let m = [1, 1, 0, 1];
        assert_eq!(dice_score(&m, &m).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        // |A| = 4, |B| = 6, |A∩B| = 3
        let a = [1, 1, 1, 1, 0, 0, 0, 0, 0];
        let b = [1, 1, 1, 0, 1, 1, 1, 0, 0];
        assert!((dice_score(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice_score(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn dice_errors() {
        assert!(matches!(dice_score(&[1], &[1, 0]), Err(Error::Dimension { .. })));
        assert!(matches!(dice_score(&[2], &[1]), Err(Error::Domain(_))));
    }

    #[test]
    fn eval_score_bounds() {
        assert!(EvalScore::new(1.2, 0.0, Metric::Dice).is_err());
        assert!(EvalScore::new(1.2, 0.0, Metric::MseLoss).is_ok());
        assert!(EvalScore::new(0.5, -0.1, Metric::Dice).is_err());
        let s = EvalScore::from_cases(&[0.5, 0.5], Metric::Dice).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.0));
    }

    fn vec_triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|n| {
            let v = || prop::collection::vec(-1e3f64..1e3, n);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn l2_symmetric_and_triangle((a, b, c) in vec_triple()) {
            let (a, b, c) = (pv(&a), pv(&b), pv(&c));
            let ab = l2_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, l2_distance(&b, &a).unwrap());
            let ac = l2_distance(&a, &c).unwrap();
            let cb = l2_distance(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9 * (1.0 + ab));
        }

        #[test]
        fn add_scaled_finite_within_range(
            (a, b) in (1usize..8).prop_flat_map(|n| (
                prop::collection::vec(-1e100f64..1e100, n),
                prop::collection::vec(-1e100f64..1e100, n),
            )),
            coeff in -1e100f64..1e100,
        ) {
            // |a + c b| <= 1e100 + 1e200 stays finite.
            let out = add_scaled(&pv(&a), &pv(&b), coeff).unwrap();
            prop_assert!(out.values().iter().all(|v| v.is_finite()));
        }

        #[test]
        fn dice_symmetric(masks in (1usize..64).prop_flat_map(|n| (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(0u8..2, n),
        ))) {
            let (a, b) = masks;
            prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
            if a.contains(&1) {
                prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
