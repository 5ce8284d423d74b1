//! Non-IID synthetic site data.
//!
//! Each site draws a private optimum shift `δ_i` (uniform direction, norm
//! exactly `shift_scale`) and generates samples whose targets follow
//! `w* + δ_i`. The shift and each split use independent ChaCha streams keyed
//! by `(seed, site_index)`, so a site's training and validation data share
//! the same shift and a reduced `fraction` yields a prefix of the full set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::segmentation::{self, IMAGE_PIXELS};
use crate::training::TrainerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    pub base_optimum: Vec<f64>,
    pub shift_scale: f64,
    pub noise_std: f64,
    pub samples_per_site: usize,
    #[serde(default = "one")]
    pub fraction: f64,
    /// Per-site overrides of `fraction`, keyed by site index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub site_fractions: Vec<SiteFraction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteFraction {
    pub site_index: usize,
    pub fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl HeterogeneityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_optimum.is_empty() || self.base_optimum.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("base_optimum must be a non-empty finite vector".into()));
        }
        if !(self.shift_scale.is_finite() && self.shift_scale >= 0.0) {
            return Err(Error::Config(format!("shift_scale must be >= 0, got {}", self.shift_scale)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.samples_per_site == 0 {
            return Err(Error::Config("samples_per_site must be >= 1".into()));
        }
        check_fraction(self.fraction)?;
        for sf in &self.site_fractions {
            check_fraction(sf.fraction)?;
        }
        Ok(())
    }

    pub fn fraction_for(&self, site_index: usize) -> f64 {
        self.site_fractions.iter().rev().find(|sf| sf.site_index == site_index).map_or(self.fraction, |sf| sf.fraction)
    }

    /// Training rows for a site: `floor(samples_per_site * fraction)`, at least 1.
    pub fn train_rows(&self, site_index: usize) -> usize {
        let rows = (self.samples_per_site as f64 * self.fraction_for(site_index)).floor() as usize;
        rows.max(1)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("fraction must lie in (0, 1], got {f}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One real target per row.
    Values(Vec<f64>),
    /// One binary mask per row (image).
    Masks(Vec<Vec<u8>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Masks(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Targets,
    pub site_shift: Vec<f64>,
}

impl ClientDataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Targets, site_shift: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Domain("dataset needs at least one row".into()));
        }
        if features.len() != targets.len() {
            return Err(Error::dim(features.len(), targets.len()));
        }
        let width = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != width) {
            return Err(Error::dim(width, row.len()));
        }
        if let Targets::Masks(masks) = &targets {
            if let Some(m) = masks.iter().find(|m| m.len() != width) {
                return Err(Error::dim(width, m.len()));
            }
        }
        Ok(Self { features, targets, site_shift })
    }

    pub fn rows(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    /// Row-wise concatenation, used for pooled validation.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ClientDataset>) -> Result<ClientDataset> {
        let mut features = Vec::new();
        let mut values = Vec::new();
        let mut masks = Vec::new();
        for p in parts {
            features.extend(p.features.iter().cloned());
            match &p.targets {
                Targets::Values(v) => values.extend_from_slice(v),
                Targets::Masks(m) => masks.extend(m.iter().cloned()),
            }
        }
        let targets = match (values.is_empty(), masks.is_empty()) {
            (false, true) => Targets::Values(values),
            (true, false) => Targets::Masks(masks),
            _ => return Err(Error::Domain("cannot pool datasets of different kinds".into())),
        };
        ClientDataset::new(features, targets, Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

const SHIFT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

fn stream_rng(seed: u64, site_index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((site_index as u64) << 4 | stream);
    rng
}

/// The site's optimum offset `δ_i`, norm exactly `shift_scale` (up to rounding).
pub fn site_shift(cfg: &HeterogeneityConfig, site_index: usize, seed: u64) -> Vec<f64> {
    let dim = cfg.base_optimum.len();
    if cfg.shift_scale == 0.0 {
        return vec![0.0; dim];
    }
    let mut rng = stream_rng(seed, site_index, SHIFT_STREAM);
    loop {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return z.into_iter().map(|v| v * cfg.shift_scale / norm).collect();
        }
    }
}

/// Training data for one site. Deterministic in `(cfg, kind, site_index, seed)`.
pub fn generate_site_data(
    cfg: &HeterogeneityConfig,
    kind: TrainerKind,
    site_index: usize,
    seed: u64,
) -> Result<ClientDataset> {
    generate_site_split(cfg, kind, site_index, seed, Split::Train)
}

/// Either split of a site's data. Validation ignores `fraction` and always
/// holds `samples_per_site` rows.
pub fn generate_site_split(
    cfg: &HeterogeneityConfig,
    kind: TrainerKind,
    site_index: usize,
    seed: u64,
    split: Split,
) -> Result<ClientDataset> {
    cfg.validate()?;
    if kind == TrainerKind::SyntheticSegmentation && cfg.base_optimum.len() != segmentation::FEATURES {
        return Err(Error::Config(format!(
            "synthetic_segmentation needs a base_optimum of length {}, got {}",
            segmentation::FEATURES,
            cfg.base_optimum.len()
        )));
    }
    let shift = site_shift(cfg, site_index, seed);
    let theta: Vec<f64> = cfg.base_optimum.iter().zip(&shift).map(|(w, d)| w + d).collect();

    let (stream, rows) = match split {
        Split::Train => (TRAIN_STREAM, cfg.train_rows(site_index)),
        Split::Validation => (VALIDATION_STREAM, cfg.samples_per_site),
    };
    let mut rng = stream_rng(seed, site_index, stream);

    // Always draw the full sample budget so smaller fractions are prefixes.
    let (features, targets) = match kind {
        TrainerKind::LeastSquares => {
            let mut xs = Vec::with_capacity(cfg.samples_per_site);
            let mut ys = Vec::with_capacity(cfg.samples_per_site);
            for _ in 0..cfg.samples_per_site {
                let x: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
                let clean: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                ys.push(clean + cfg.noise_std * noise);
                xs.push(x);
            }
            xs.truncate(rows);
            ys.truncate(rows);
            (xs, Targets::Values(ys))
        }
        TrainerKind::SyntheticSegmentation => {
            let mut images = Vec::with_capacity(cfg.samples_per_site);
            let mut masks = Vec::with_capacity(cfg.samples_per_site);
            for _ in 0..cfg.samples_per_site {
                let (image, mask) = segmentation::synth_image(&mut rng, &theta, cfg.noise_std);
                debug_assert_eq!(image.len(), IMAGE_PIXELS);
                images.push(image);
                masks.push(mask);
            }
            images.truncate(rows);
            masks.truncate(rows);
            (images, Targets::Masks(masks))
        }
    };
    ClientDataset::new(features, targets, shift)
}
