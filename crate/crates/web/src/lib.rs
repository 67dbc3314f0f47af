//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Demo`] owns one synthetic phantom, its corrupted copy and a small
//! U-Net. The page calls three operations on it: preview a masked, noise
//! injected training input, run progressive training steps, and denoise with
//! masked averaging. Images cross the boundary as row-major `f32` in [0, 1].

use wasm_bindgen::prelude::*;

use blindspot_core::data::phantom;
use blindspot_core::inference::{denoise, InferenceConfig};
use blindspot_core::metrics::{psnr, ssim, SsimParams};
use blindspot_core::nn::{Architecture, DenoiserSpec, DenoiserState};
use blindspot_core::stochastic::{add_noise, apply_mask, sample_mask, sample_noise, stream, MaskSpec, NoiseSpec};
use blindspot_core::trainer::{TrainConfig, Trainer};
use blindspot_core::Image;

fn js_err(e: blindspot_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    clean: Image,
    noisy: Image,
    trainer: Trainer<DenoiserState>,
    rng: blindspot_core::stochastic::Stream,
    steps: u32,
}

#[wasm_bindgen]
impl Demo {
    /// A `side`×`side` phantom corrupted with Gaussian noise of `sigma` (0–255 scale).
    #[wasm_bindgen(constructor)]
    pub fn new(side: usize, sigma: f64, seed: u64) -> Result<Demo, JsError> {
        if side == 0 || side % 8 != 0 {
            return Err(JsError::new("side must be a positive multiple of 8"));
        }
        let clean = phantom(side, &mut stream(seed));
        let noise = sample_noise(&NoiseSpec::gaussian(sigma), &clean, seed ^ 0x5eed).map_err(js_err)?;
        let noisy = add_noise(&clean, &noise).map_err(js_err)?;
        let spec = DenoiserSpec {
            architecture: Architecture::SmallUnet,
            channels: 8,
            depth: 3,
        };
        let net = DenoiserState::build(spec, seed).map_err(js_err)?;
        let trainer = Trainer::new(net, TrainConfig::default()).map_err(js_err)?;
        Ok(Demo {
            clean,
            noisy,
            trainer,
            rng: stream(seed.wrapping_add(1)),
            steps: 0,
        })
    }

    pub fn side(&self) -> usize {
        self.clean.rows()
    }

    pub fn clean(&self) -> Vec<f32> {
        self.clean.data().to_vec()
    }

    pub fn noisy(&self) -> Vec<f32> {
        self.noisy.data().to_vec()
    }

    /// The t = 0 network input `M ⊙ (x + n₁)` for the given mask ratio and
    /// injection level.
    pub fn masked_input(&self, alpha: f64, inject_sigma: f64, seed: u64) -> Result<Vec<f32>, JsError> {
        let mask = sample_mask(MaskSpec::new(alpha, seed).map_err(js_err)?, self.noisy.shape()).map_err(js_err)?;
        let n1 = sample_noise(&NoiseSpec::gaussian(inject_sigma), &self.noisy, seed.wrapping_add(7)).map_err(js_err)?;
        let injected = add_noise(&self.noisy, &n1).map_err(js_err)?;
        Ok(apply_mask(&mask, &injected).map_err(js_err)?.into_data())
    }

    /// Runs `steps` progressive training steps on the noisy image and returns
    /// the mean chain loss.
    pub fn train(&mut self, steps: u32, k: usize, alpha: f64, inject_sigma: f64, lr: f64) -> Result<f64, JsError> {
        let cfg = TrainConfig {
            k_steps: k,
            alpha,
            noise: if inject_sigma > 0.0 { NoiseSpec::gaussian(inject_sigma) } else { NoiseSpec::disabled() },
            ..TrainConfig::default()
        };
        cfg.validate().map_err(js_err)?;
        self.trainer.cfg = cfg;
        let mut total = 0.0;
        for _ in 0..steps {
            let report = self
                .trainer
                .train_step(std::slice::from_ref(&self.noisy), lr, &mut self.rng)
                .map_err(js_err)?;
            total += report.loss;
        }
        self.steps += steps;
        Ok(total / steps.max(1) as f64)
    }

    pub fn steps_trained(&self) -> u32 {
        self.steps
    }

    /// Averages `k` masked forward passes.
    pub fn denoise(&self, k: usize, alpha: f64, seed: u64) -> Result<Vec<f32>, JsError> {
        let cfg = InferenceConfig {
            k_samples: k,
            alpha,
            seed,
            tile_side: None,
            ..InferenceConfig::default()
        };
        Ok(denoise(&self.trainer.net, &self.noisy, &cfg).map_err(js_err)?.image.into_data())
    }

    /// PSNR (dB) of `pixels` against the clean phantom.
    pub fn psnr(&self, pixels: Vec<f32>) -> Result<f64, JsError> {
        let img = self.wrap(pixels)?;
        psnr(&img, &self.clean, 1.0).map_err(js_err)
    }

    pub fn ssim(&self, pixels: Vec<f32>) -> Result<f64, JsError> {
        let img = self.wrap(pixels)?;
        ssim(&img, &self.clean, &SsimParams::standard(1.0)).map_err(js_err)
    }
}

impl Demo {
    fn wrap(&self, pixels: Vec<f32>) -> Result<Image, JsError> {
        Image::new(self.clean.rows(), self.clean.cols(), pixels).map_err(js_err)
    }
}
