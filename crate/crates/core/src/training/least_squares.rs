//! Linear least squares, `F(w) = 1/(2n) Σ (x·w − y)²`.

use crate::error::{Error, Result};
use crate::params::{EvalScore, Metric, ParameterVector};
use crate::training::data::{ClientDataset, Targets};

fn targets(data: &ClientDataset) -> Result<&[f64]> {
    match &data.targets {
        Targets::Values(v) => Ok(v),
        Targets::Masks(_) => Err(Error::Config("least_squares needs real-valued targets".into())),
    }
}

fn residuals<'a>(
    params: &'a ParameterVector,
    data: &'a ClientDataset,
) -> Result<impl Iterator<Item = (&'a Vec<f64>, f64)> + 'a> {
    if params.dim() != data.feature_dim() {
        return Err(Error::dim(data.feature_dim(), params.dim()));
    }
    let ys = targets(data)?;
    let w = params.values();
    Ok(data.features.iter().zip(ys).map(move |(x, y)| {
        let pred: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        (x, pred - y)
    }))
}

pub fn loss(params: &ParameterVector, data: &ClientDataset) -> Result<f64> {
    let sum: f64 = residuals(params, data)?.map(|(_, r)| r * r).sum();
    Ok(sum / (2.0 * data.rows() as f64))
}

/// Full-batch gradient `1/n Σ (x·w − y) x`.
pub fn gradient(params: &ParameterVector, data: &ClientDataset) -> Result<ParameterVector> {
    let mut grad = vec![0.0; params.dim()];
    for (x, r) in residuals(params, data)? {
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
    }
    let n = data.rows() as f64;
    ParameterVector::new(grad.into_iter().map(|g| g / n).collect())
}

/// Mean squared error over samples (no ½ factor).
pub fn evaluate(params: &ParameterVector, data: &ClientDataset) -> Result<EvalScore> {
    let cases: Vec<f64> = residuals(params, data)?.map(|(_, r)| r * r).collect();
    EvalScore::from_cases(&cases, Metric::MseLoss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> ClientDataset {
        let d = xs[0].len();
        ClientDataset::new(xs, Targets::Values(ys), vec![0.0; d]).unwrap()
    }

    #[test]
    fn hand_computed_gradient() {
        // rows (1,0), (0,1), (1,1); y = (1, 2, 0); w = (0.5, -1)
        // residuals: -0.5, -3, -0.5 → grad = 1/3 (-0.5 - 0.5, -3 - 0.5) = (-1/3, -7/6)
        let d = ds(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![1.0, 2.0, 0.0]);
        let w = ParameterVector::new(vec![0.5, -1.0]).unwrap();
        let g = gradient(&w, &d).unwrap();
        assert!((g.values()[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((g.values()[1] + 7.0 / 6.0).abs() < 1e-15);
        // ½·mean(0.25, 9, 0.25)
        assert!((loss(&w, &d).unwrap() - 9.5 / 6.0).abs() < 1e-15);
        let s = evaluate(&w, &d).unwrap();
        assert!((s.mean - 9.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_and_kind_errors() {
        let d = ds(vec![vec![1.0, 0.0]], vec![1.0]);
        assert!(matches!(gradient(&ParameterVector::zeros(3).unwrap(), &d), Err(Error::Dimension { .. })));
        let masks = ClientDataset::new(vec![vec![0.0, 1.0]], Targets::Masks(vec![vec![0, 1]]), vec![]).unwrap();
        assert!(matches!(loss(&ParameterVector::zeros(2).unwrap(), &masks), Err(Error::Config(_))));
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..10).prop_flat_map(|(d, n)| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-2.0f64..2.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences((xs, ys, w) in instance()) {
            let d = ds(xs, ys);
            let w = ParameterVector::new(w).unwrap();
            let g = gradient(&w, &d).unwrap();
            let h = 1e-6;
            for j in 0..w.dim() {
                let mut plus = w.values().to_vec();
                let mut minus = w.values().to_vec();
                plus[j] += h;
                minus[j] -= h;
                let fd = (loss(&ParameterVector::new(plus).unwrap(), &d).unwrap()
                    - loss(&ParameterVector::new(minus).unwrap(), &d).unwrap()) / (2.0 * h);
                let gj = g.values()[j];
                // Relative error, with an absolute floor for near-zero components.
                prop_assert!((fd - gj).abs() <= 1e-5 * gj.abs().max(1e-2), "fd {} vs {}", fd, gj);
            }
        }
    }
}
