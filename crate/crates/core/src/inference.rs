//! Multi-mask averaged inference.
//!
//! The input is masked with `k` independent Bernoulli masks, each masked copy
//! is denoised in evaluation mode and the outputs are averaged. Slices that do
//! not fit the backbone in one piece are processed as overlapping tiles.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Network, Tensor};
use crate::stochastic::{apply_mask, sample_mask_from, stream, validate_alpha, Mask};

pub const DEFAULT_OVERLAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Independent masked passes, averaged.
    Averaged,
    /// Diagnostic: each pass re-masks the previous output.
    Chained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub k_samples: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Tile side for large inputs; `None` processes the image in one piece
    /// (after edge padding to the backbone divisor).
    pub tile_side: Option<usize>,
    pub overlap: usize,
    pub mode: InferenceMode,
    pub keep_per_mask_outputs: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k_samples: 5,
            alpha: 0.1,
            seed: 0,
            tile_side: Some(128),
            overlap: DEFAULT_OVERLAP,
            mode: InferenceMode::Averaged,
            keep_per_mask_outputs: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_samples == 0 {
            return Err(Error::Config("k_samples must be at least 1".into()));
        }
        validate_alpha(self.alpha)?;
        if let Some(tile) = self.tile_side {
            if tile == 0 || self.overlap >= tile {
                return Err(Error::Config(format!(
                    "tile side {tile} must exceed the overlap {}",
                    self.overlap
                )));
            }
        }
        Ok(())
    }

    /// Mask seeds derived from `seed`, one per pass.
    pub fn mask_seeds(&self) -> Vec<u64> {
        let mut rng = stream(self.seed);
        (0..self.k_samples).map(|_| rng.next_u64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedResult {
    pub image: Image,
    pub per_mask_outputs: Option<Vec<Image>>,
    pub masks_used: Vec<u64>,
}

/// Denoises `input` with masks drawn from `cfg.seed`.
pub fn denoise<N: Network<f32>>(net: &N, input: &Image, cfg: &InferenceConfig) -> Result<DenoisedResult> {
    cfg.validate()?;
    denoise_with_seeds(net, input, &cfg.mask_seeds(), cfg)
}

/// Denoises `input` with one mask per seed in `seeds`; `cfg.k_samples` and
/// `cfg.seed` are ignored.
pub fn denoise_with_seeds<N: Network<f32>>(
    net: &N,
    input: &Image,
    seeds: &[u64],
    cfg: &InferenceConfig,
) -> Result<DenoisedResult> {
    if !net.is_trained() {
        return Err(Error::Untrained);
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one mask is required".into()));
    }
    validate_alpha(cfg.alpha)?;
    let (rows, cols) = input.shape();
    let masks: Vec<Mask> = seeds
        .iter()
        .map(|&s| sample_mask_from(cfg.alpha, rows, cols, &mut stream(s)))
        .collect();
    match cfg.mode {
        InferenceMode::Averaged => {
            let mut sum = vec![0.0f64; input.len()];
            let mut outputs = Vec::new();
            for mask in &masks {
                let out = forward_tiled(net, &apply_mask(mask, input)?, cfg)?.map(|v| v.clamp(0.0, 1.0));
                for (s, &v) in sum.iter_mut().zip(out.data()) {
                    *s += v as f64;
                }
                if cfg.keep_per_mask_outputs {
                    outputs.push(out);
                }
            }
            let n = masks.len() as f64;
            let image = Image::new(rows, cols, sum.into_iter().map(|s| (s / n) as f32).collect())?;
            Ok(DenoisedResult {
                image,
                per_mask_outputs: cfg.keep_per_mask_outputs.then_some(outputs),
                masks_used: seeds.to_vec(),
            })
        }
        InferenceMode::Chained => {
            let mut current = input.clone();
            let mut outputs = Vec::new();
            for mask in &masks {
                current = forward_tiled(net, &apply_mask(mask, &current)?, cfg)?.map(|v| v.clamp(0.0, 1.0));
                if cfg.keep_per_mask_outputs {
                    outputs.push(current.clone());
                }
            }
            Ok(DenoisedResult {
                image: current,
                per_mask_outputs: cfg.keep_per_mask_outputs.then_some(outputs),
                masks_used: seeds.to_vec(),
            })
        }
    }
}

/// Single unmasked forward pass, for comparison with masked averaging.
pub fn denoise_no_mask<N: Network<f32>>(net: &N, input: &Image, cfg: &InferenceConfig) -> Result<Image> {
    if !net.is_trained() {
        return Err(Error::Untrained);
    }
    Ok(forward_tiled(net, input, cfg)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Smallest size ≥ `n` accepted by the network, probing multiples of two.
fn fitting_size<N: Network<f32>>(net: &N, n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        if net.check_input(m, m).is_ok() {
            return m;
        }
        m += 1;
    }
}

fn forward_one<N: Network<f32>>(net: &N, image: &Image) -> Result<Image> {
    let out = net.infer(&Tensor::from_images(std::slice::from_ref(image))?)?;
    Ok(out.to_images().remove(0))
}

/// Tile start offsets covering `len` with tiles of `tile` and the given overlap.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Eval-mode forward with edge padding and overlap-average stitching.
pub fn forward_tiled<N: Network<f32>>(net: &N, image: &Image, cfg: &InferenceConfig) -> Result<Image> {
    let (rows, cols) = image.shape();
    let fits_whole = net.check_input(rows, cols).is_ok();
    let tile = match cfg.tile_side {
        Some(t) if t < rows.max(cols) => t,
        _ => {
            if fits_whole {
                return forward_one(net, image);
            }
            let pr = fitting_size(net, rows);
            let pc = fitting_size(net, cols);
            let out = forward_one(net, &image.pad_to(pr, pc))?;
            return out.crop(0, 0, rows, cols);
        }
    };
    net.check_input(tile, tile)?;
    let padded = image.pad_to(rows.max(tile), cols.max(tile));
    let (pr, pc) = padded.shape();
    let mut sum = vec![0.0f64; pr * pc];
    let mut count = vec![0u32; pr * pc];
    for &r0 in &tile_starts(pr, tile, cfg.overlap) {
        for &c0 in &tile_starts(pc, tile, cfg.overlap) {
            let out = forward_one(net, &padded.crop(r0, c0, tile, tile)?)?;
            for r in 0..tile {
                for c in 0..tile {
                    let idx = (r0 + r) * pc + c0 + c;
                    sum[idx] += out.get(r, c) as f64;
                    count[idx] += 1;
                }
            }
        }
    }
    let stitched = Image::from_fn(pr, pc, |r, c| {
        let idx = r * pc + c;
        (sum[idx] / count[idx] as f64) as f32
    });
    stitched.crop(0, 0, rows, cols)
}
