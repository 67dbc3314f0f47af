//! Bernoulli blind-spot masks and zero-mean combined Poisson+Gaussian noise.
//!
//! Noise is generated on the 0–255 intensity scale and returned in normalized
//! units (divided by 255). Every generator takes an explicit seed or RNG so
//! parallel callers can partition the seed space.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Intensity scale on which noise parameters are expressed.
pub const INTENSITY_SCALE: f64 = 255.0;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bernoulli mask parameters: each pixel is blinded with probability `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub alpha: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        let spec = Self { alpha, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)
    }
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "mask ratio alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// A realized binary mask: 1 keeps a pixel, 0 marks a blind spot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<u8>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![1; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, keep: Vec<u8>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "mask buffer of {} values cannot form {rows}x{cols}",
                keep.len()
            )));
        }
        if keep.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask entries must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[u8] {
        &self.keep
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, keep: bool) {
        self.keep[row * self.cols + col] = keep as u8;
    }

    pub fn blind_count(&self) -> usize {
        self.keep.iter().filter(|&&v| v == 0).count()
    }

    pub fn blind_fraction(&self) -> f64 {
        self.blind_count() as f64 / self.keep.len() as f64
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.rows,
            self.cols,
            self.keep.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask shape is consistent")
    }
}

/// Draws an i.i.d. Bernoulli(1 − alpha) keep-mask from `rng`.
pub fn sample_mask_from<R: Rng + ?Sized>(alpha: f64, rows: usize, cols: usize, rng: &mut R) -> Mask {
    let keep = (0..rows * cols)
        .map(|_| (rng.random::<f64>() >= alpha) as u8)
        .collect();
    Mask { rows, cols, keep }
}

/// Samples the mask determined by `spec.seed`.
pub fn sample_mask(spec: MaskSpec, shape: (usize, usize)) -> Result<Mask> {
    spec.validate()?;
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::Invalid("mask dimensions must be positive".into()));
    }
    let mut rng = stream(spec.seed);
    Ok(sample_mask_from(spec.alpha, shape.0, shape.1, &mut rng))
}

/// A seeded mask stream. Each call to [`MaskSampler::next_mask`] advances the
/// stream and returns a fresh mask together with the seed that reproduces it.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    alpha: f64,
    rng: Stream,
}

impl MaskSampler {
    pub fn new(spec: MaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            alpha: spec.alpha,
            rng: stream(spec.seed),
        })
    }

    pub fn next_mask(&mut self, shape: (usize, usize)) -> (u64, Mask) {
        let seed = self.rng.next_u64();
        let mut rng = stream(seed);
        (seed, sample_mask_from(self.alpha, shape.0, shape.1, &mut rng))
    }
}

/// Hadamard product of a mask and an image; blind spots become exactly zero.
pub fn apply_mask(mask: &Mask, image: &Image) -> Result<Image> {
    if mask.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            expected: mask.shape(),
            actual: image.shape(),
        });
    }
    let data = image
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k == 1 { v } else { 0.0 })
        .collect();
    Image::new(image.rows(), image.cols(), data)
}

/// Combined Poisson + Gaussian injection noise parameters.
///
/// `sigma` is the Gaussian standard deviation on the 0–255 scale;
/// `poisson_scale` is the photon count per unit intensity (0 disables the
/// Poisson term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub poisson_scale: f64,
    pub enabled: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            poisson_scale: 0.0,
            enabled: true,
        }
    }
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            sigma,
            poisson_scale: 0.0,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if !(self.poisson_scale >= 0.0) || !self.poisson_scale.is_finite() {
            return Err(Error::Config(format!(
                "poisson scale must be non-negative, got {}",
                self.poisson_scale
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.enabled && (self.sigma > 0.0 || self.poisson_scale > 0.0)
    }
}

/// Zero-mean Poisson term on intensity `value` (0–255 scale):
/// `Poisson(value·λ)/λ − value`.
pub fn centered_poisson<R: Rng + ?Sized>(value: f64, scale: f64, rng: &mut R) -> f64 {
    let rate = value * scale;
    if rate <= 0.0 || !rate.is_finite() {
        return 0.0;
    }
    let counts: f64 = Poisson::new(rate)
        .expect("positive finite rate")
        .sample(rng);
    counts / scale - value
}

/// Fills a noise field for `reference` (normalized to [0, 1]) from `rng`.
pub fn sample_noise_from<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    reference: &Image,
    rng: &mut R,
) -> Result<Image> {
    spec.validate()?;
    if !spec.enabled {
        return Ok(Image::zeros(reference.rows(), reference.cols()));
    }
    let gaussian = if spec.sigma > 0.0 {
        Some(Normal::new(0.0, spec.sigma).expect("validated sigma"))
    } else {
        None
    };
    let data = reference
        .data()
        .iter()
        .map(|&v| {
            let mut n = 0.0;
            if let Some(g) = &gaussian {
                n += g.sample(rng);
            }
            if spec.poisson_scale > 0.0 {
                n += centered_poisson(v as f64 * INTENSITY_SCALE, spec.poisson_scale, rng);
            }
            (n / INTENSITY_SCALE) as f32
        })
        .collect();
    Image::new(reference.rows(), reference.cols(), data)
}

/// Samples a noise field for `reference` determined by `seed`.
pub fn sample_noise(spec: &NoiseSpec, reference: &Image, seed: u64) -> Result<Image> {
    sample_noise_from(spec, reference, &mut stream(seed))
}

/// Adds noise on the 0–255 scale, clamps to [0, 255] and re-normalizes.
pub fn add_noise(image: &Image, noise: &Image) -> Result<Image> {
    image.zip_map(noise, |x, n| {
        let v = (x as f64 * INTENSITY_SCALE + n as f64 * INTENSITY_SCALE).clamp(0.0, INTENSITY_SCALE);
        (v / INTENSITY_SCALE) as f32
    })
}
