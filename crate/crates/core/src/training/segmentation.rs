//! Per-pixel logistic segmentation of 8×8 synthetic images.
//!
//! Every image holds one bright 3×3 blob at a random position. A pixel's
//! features are `[1, intensity, 3×3 neighbourhood mean]`; the ground-truth
//! mask labels the pixels where the site's rater rule `θ_i · φ_clean > 0`
//! fires, `θ_i = w* + δ_i`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{dice_score, EvalScore, Metric, ParameterVector};
use crate::training::data::{ClientDataset, Targets};

pub const SIDE: usize = 8;
pub const IMAGE_PIXELS: usize = SIDE * SIDE;
pub const FEATURES: usize = 3;
const BLOB: usize = 3;

/// Rater rule that labels exactly the noise-free blob.
pub const DEFAULT_OPTIMUM: [f64; FEATURES] = [-4.0, 4.0, 4.0];

pub(crate) fn synth_image<R: Rng>(rng: &mut R, theta: &[f64], noise_std: f64) -> (Vec<f64>, Vec<u8>) {
    let top = rng.random_range(0..=SIDE - BLOB);
    let left = rng.random_range(0..=SIDE - BLOB);
    let mut clean = vec![0.0; IMAGE_PIXELS];
    for r in top..top + BLOB {
        for c in left..left + BLOB {
            clean[r * SIDE + c] = 1.0;
        }
    }
    let mask = pixel_features(&clean).iter().map(|phi| u8::from(dot(theta, phi) > 0.0)).collect();
    let noisy = clean
        .iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            v + noise_std * n
        })
        .collect();
    (noisy, mask)
}

fn dot(a: &[f64], b: &[f64; FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pixel_features(image: &[f64]) -> Vec<[f64; FEATURES]> {
    let mut out = Vec::with_capacity(IMAGE_PIXELS);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let mut sum = 0.0;
            let mut count = 0.0;
            for nr in r.saturating_sub(1)..=(r + 1).min(SIDE - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(SIDE - 1) {
                    sum += image[nr * SIDE + nc];
                    count += 1.0;
                }
            }
            out.push([1.0, image[r * SIDE + c], sum / count]);
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn masks(data: &ClientDataset) -> Result<&[Vec<u8>]> {
    match &data.targets {
        Targets::Masks(m) => Ok(m),
        Targets::Values(_) => Err(Error::Config("synthetic_segmentation needs mask targets".into())),
    }
}

fn check(params: &ParameterVector, data: &ClientDataset) -> Result<()> {
    if params.dim() != FEATURES {
        return Err(Error::dim(FEATURES, params.dim()));
    }
    if data.feature_dim() != IMAGE_PIXELS {
        return Err(Error::dim(IMAGE_PIXELS, data.feature_dim()));
    }
    Ok(())
}

/// Mean binary cross-entropy over every pixel of every image.
pub fn loss(params: &ParameterVector, data: &ClientDataset) -> Result<f64> {
    check(params, data)?;
    let masks = masks(data)?;
    let theta = params.values();
    let mut total = 0.0;
    for (image, mask) in data.features.iter().zip(masks) {
        for (phi, &y) in pixel_features(image).iter().zip(mask) {
            let z = dot(theta, phi);
            // log(1 + e^z) − y z, stable for large |z|
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            total += softplus - f64::from(y) * z;
        }
    }
    Ok(total / (data.rows() * IMAGE_PIXELS) as f64)
}

pub fn gradient(params: &ParameterVector, data: &ClientDataset) -> Result<ParameterVector> {
    check(params, data)?;
    let masks = masks(data)?;
    let theta = params.values();
    let mut grad = [0.0; FEATURES];
    for (image, mask) in data.features.iter().zip(masks) {
        for (phi, &y) in pixel_features(image).iter().zip(mask) {
            let residual = sigmoid(dot(theta, phi)) - f64::from(y);
            for (g, f) in grad.iter_mut().zip(phi) {
                *g += residual * f;
            }
        }
    }
    let scale = (data.rows() * IMAGE_PIXELS) as f64;
    ParameterVector::new(grad.iter().map(|g| g / scale).collect())
}

/// Per-image Dice of the thresholded prediction (`p > 0.5`), averaged.
pub fn evaluate(params: &ParameterVector, data: &ClientDataset) -> Result<EvalScore> {
    check(params, data)?;
    let masks = masks(data)?;
    let theta = params.values();
    let mut cases = Vec::with_capacity(data.rows());
    for (image, mask) in data.features.iter().zip(masks) {
        let predicted: Vec<u8> = pixel_features(image).iter().map(|phi| u8::from(dot(theta, phi) > 0.0)).collect();
        cases.push(dice_score(&predicted, mask)?);
    }
    EvalScore::from_cases(&cases, Metric::Dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, noise: f64) -> ClientDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (imgs, masks): (Vec<_>, Vec<_>) = (0..n).map(|_| synth_image(&mut rng, &DEFAULT_OPTIMUM, noise)).unzip();
        ClientDataset::new(imgs, Targets::Masks(masks), vec![0.0; FEATURES]).unwrap()
    }

    #[test]
    fn default_rule_labels_the_blob() {
        let d = dataset(20, 0.0);
        let Targets::Masks(ms) = &d.targets else { panic!() };
        for (img, m) in d.features.iter().zip(ms) {
            let blob: Vec<u8> = img.iter().map(|&v| u8::from(v > 0.5)).collect();
            assert_eq!(&blob, m);
            assert_eq!(m.iter().filter(|&&v| v == 1).count(), BLOB * BLOB);
        }
    }

    #[test]
    fn generating_rule_scores_perfect_dice_without_noise() {
        let d = dataset(10, 0.0);
        let p = ParameterVector::new(DEFAULT_OPTIMUM.to_vec()).unwrap();
        let s = evaluate(&p, &d).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn zero_params_score_below_one() {
        let d = dataset(10, 0.1);
        let s = evaluate(&ParameterVector::zeros(FEATURES).unwrap(), &d).unwrap();
        assert!(s.mean < 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = dataset(6, 0.2);
        let p = ParameterVector::new(vec![-1.0, 0.5, 2.0]).unwrap();
        let g = gradient(&p, &d).unwrap();
        let h = 1e-6;
        for j in 0..FEATURES {
            let mut plus = p.values().to_vec();
            let mut minus = p.values().to_vec();
            plus[j] += h;
            minus[j] -= h;
            let fd = (loss(&ParameterVector::new(plus).unwrap(), &d).unwrap()
                - loss(&ParameterVector::new(minus).unwrap(), &d).unwrap())
                / (2.0 * h);
            assert!((fd - g.values()[j]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", g.values()[j]);
        }
    }

    #[test]
    fn gradient_descent_improves_dice() {
        let d = dataset(16, 0.1);
        let mut p = ParameterVector::zeros(FEATURES).unwrap();
        let start = evaluate(&p, &d).unwrap().mean;
        for _ in 0..300 {
            let g = gradient(&p, &d).unwrap();
            p = p.add_scaled(&g, -2.0).unwrap();
        }
        assert!(evaluate(&p, &d).unwrap().mean > start + 0.5);
    }
}
