//! Progressive blind-spot training.
//!
//! One training step runs a chain of `k` masked denoising passes with a single
//! shared parameter set:
//!
//! ```text
//! x̂⁰ = x
//! for t in 0..k:
//!     z  = Mₜ ⊙ (x̂ᵗ + [t = 0]·n₁)        fresh mask, input noise only at t = 0
//!     ŷ  = f_θ(z)
//!     Lₜ = L1(ŷ, x + n₂)                 fresh target noise every step
//!     x̂ᵗ⁺¹ = ŷ                           detached unless backprop_through_chain
//! θ ← Adam(θ, ∇ Σₜ Lₜ)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::extract_patches;
use crate::data::{NormalizedImage, Provenance};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, AdamConfig, DenoiserSpec, DenoiserState, Network, Tensor};
use crate::stochastic::{
    add_noise, sample_mask_from, sample_noise_from, stream, validate_alpha, Mask, NoiseSpec, Stream,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
}

/// Pixels that contribute to the step loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    /// Only blind-spot pixels (mask = 0).
    Masked,
    /// Every pixel of the patch.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k_steps: usize,
    pub alpha: f64,
    pub noise: NoiseSpec,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_halving_period_epochs: usize,
    pub batch_size: usize,
    pub patches_per_image: usize,
    pub patch_side: usize,
    pub loss: LossKind,
    pub loss_region: LossRegion,
    pub optimizer: AdamConfig,
    /// One optimizer update after every step instead of one per chain.
    pub update_per_step: bool,
    /// Let gradients flow from later steps into earlier predictions.
    pub backprop_through_chain: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_steps: 5,
            alpha: 0.1,
            noise: NoiseSpec::default(),
            epochs: 100,
            lr_initial: 1e-3,
            lr_halving_period_epochs: 20,
            batch_size: 1,
            patches_per_image: 10,
            patch_side: 128,
            loss: LossKind::L1,
            loss_region: LossRegion::Masked,
            optimizer: AdamConfig::default(),
            update_per_step: false,
            backprop_through_chain: false,
            checkpoint_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_steps < 1 {
            return Err(Error::Config("k_steps must be at least 1".into()));
        }
        validate_alpha(self.alpha)?;
        self.noise.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_image == 0 || self.patch_side == 0 {
            return Err(Error::Config(
                "epochs, batch_size, patches_per_image and patch_side must be positive".into(),
            ));
        }
        if !(self.lr_initial >= 0.0) || self.lr_halving_period_epochs == 0 {
            return Err(Error::Config("learning-rate schedule is invalid".into()));
        }
        if self.update_per_step && self.backprop_through_chain {
            return Err(Error::Config(
                "update_per_step and backprop_through_chain cannot be combined".into(),
            ));
        }
        Ok(())
    }

    /// `lr_initial · 2^−⌊epoch / period⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_initial * 0.5f64.powi((epoch / self.lr_halving_period_epochs) as i32)
    }
}

/// What happened at one step of the chain.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub t: usize,
    /// The estimate x̂ᵗ fed into this step (before noise and masking).
    pub x_hat: Vec<Image>,
    pub masks: Vec<Mask>,
    pub mask_seeds: Vec<u64>,
    pub loss_value: f64,
    /// Digest of the parameters used for this step's forward pass.
    pub param_digest: [u8; 32],
}

/// Result of one [`Trainer::train_step`].
#[derive(Debug, Clone)]
pub struct StepReport {
    pub traces: Vec<StepTrace>,
    /// Sum of the per-step losses.
    pub loss: f64,
    pub input_noise_draws: usize,
    pub target_noise_draws: usize,
    /// Final estimate x̂ᵏ.
    pub output: Vec<Image>,
}

fn images_to_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    Tensor::from_images(images)
}

/// Owns the network and optimizer for one training stream.
pub struct Trainer<N> {
    pub net: N,
    pub optimizer: Adam<f32>,
    pub cfg: TrainConfig,
}

impl<N: Network<f32>> Trainer<N> {
    pub fn new(net: N, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net,
            optimizer: Adam::new(cfg.optimizer),
            cfg,
        })
    }

    pub fn into_net(self) -> N {
        self.net
    }

    /// Runs the k-step chain on one batch and applies the optimizer update(s).
    pub fn train_step(&mut self, x: &[Image], lr: f64, stream: &mut Stream) -> Result<StepReport> {
        let report = self.chain(x, lr, stream)?;
        if !self.cfg.update_per_step {
            self.optimizer.step(&mut self.net, lr);
        }
        Ok(report)
    }

    /// Runs the chain and leaves the summed gradients in the network without
    /// updating it. Not available with `update_per_step`.
    pub fn accumulate_gradients(&mut self, x: &[Image], stream: &mut Stream) -> Result<StepReport> {
        if self.cfg.update_per_step {
            return Err(Error::Config("gradient accumulation needs one update per chain".into()));
        }
        self.chain(x, 0.0, stream)
    }

    fn chain(&mut self, x: &[Image], lr: f64, stream: &mut Stream) -> Result<StepReport> {
        let first = x.first().ok_or(Error::EmptyDataset)?;
        for img in x {
            first.ensure_same_shape(img)?;
        }
        let (rows, cols) = first.shape();
        self.net.check_input(rows, cols)?;
        let cfg = self.cfg.clone();
        let noise_on = cfg.noise.enabled;

        let mut x_hat: Vec<Image> = x.to_vec();
        let mut traces = Vec::with_capacity(cfg.k_steps);
        let mut tapes = Vec::new();
        let mut masks_per_step: Vec<Vec<Mask>> = Vec::new();
        let mut step_grads = Vec::new();
        let mut input_draws = 0;
        let mut target_draws = 0;
        let mut total = 0.0;

        for t in 0..cfg.k_steps {
            let digest = self.net.param_fingerprint();
            let mut mask_seeds = Vec::with_capacity(x.len());
            let mut masks = Vec::with_capacity(x.len());
            let mut inputs = Vec::with_capacity(x.len());
            let mut targets = Vec::with_capacity(x.len());
            for (i, base) in x.iter().enumerate() {
                let seed = stream.next_u64();
                let mask = sample_mask_from(cfg.alpha, rows, cols, &mut crate::stochastic::stream(seed));
                let mut input = x_hat[i].clone();
                if t == 0 && noise_on {
                    let n1 = sample_noise_from(&cfg.noise, &input, stream)?;
                    input_draws += 1;
                    input = add_noise(&input, &n1)?;
                }
                inputs.push(crate::stochastic::apply_mask(&mask, &input)?);
                let target = if noise_on {
                    let n2 = sample_noise_from(&cfg.noise, base, stream)?;
                    target_draws += 1;
                    add_noise(base, &n2)?
                } else {
                    base.clone()
                };
                targets.push(target);
                mask_seeds.push(seed);
                masks.push(mask);
            }
            let z = images_to_tensor(&inputs)?;
            let (out, tape) = self.net.forward_train(&z)?;
            let (loss, grad) = l1_loss(&out, &targets, &masks, cfg.loss_region);
            if !loss.is_finite() || !out.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: t,
                    mask_seed: mask_seeds[0],
                });
            }
            total += loss;
            traces.push(StepTrace {
                t,
                x_hat: std::mem::take(&mut x_hat),
                masks: masks.clone(),
                mask_seeds,
                loss_value: loss,
                param_digest: digest,
            });
            if cfg.backprop_through_chain {
                tapes.push(tape);
                step_grads.push(grad);
                masks_per_step.push(masks);
            } else {
                self.net.backward(tape, &grad, false);
                if cfg.update_per_step {
                    self.optimizer.step(&mut self.net, lr);
                }
            }
            x_hat = out.to_images();
        }

        if cfg.backprop_through_chain {
            let mut carry: Option<Tensor<f32>> = None;
            for t in (0..cfg.k_steps).rev() {
                let mut g = step_grads.pop().expect("one gradient per step");
                if let Some(c) = carry.take() {
                    g.add_assign(&c);
                }
                let tape = tapes.pop().expect("one tape per step");
                let masks = masks_per_step.pop().expect("one mask set per step");
                let gin = self.net.backward(tape, &g, t > 0);
                if let Some(mut gin) = gin {
                    for (i, m) in masks.iter().enumerate() {
                        for (v, &keep) in gin.sample_mut(i).iter_mut().zip(m.values()) {
                            if keep == 0 {
                                *v = 0.0;
                            }
                        }
                    }
                    carry = Some(gin);
                }
            }
        }
        Ok(StepReport {
            traces,
            loss: total,
            input_noise_draws: input_draws,
            target_noise_draws: target_draws,
            output: x_hat,
        })
    }
}

/// Mean absolute error over the selected region and its gradient.
fn l1_loss(out: &Tensor<f32>, targets: &[Image], masks: &[Mask], region: LossRegion) -> (f64, Tensor<f32>) {
    let mut grad = Tensor::zeros(out.n, out.c, out.h, out.w);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (target, mask)) in targets.iter().zip(masks).enumerate() {
        let o = out.sample(i);
        let g = grad.sample_mut(i);
        for (j, (&y, &t)) in o.iter().zip(target.data()).enumerate() {
            if region == LossRegion::Masked && mask.values()[j] == 1 {
                continue;
            }
            let d = y as f64 - t as f64;
            sum += d.abs();
            g[j] = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            count += 1;
        }
    }
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f32;
    grad.data.iter_mut().for_each(|v| *v *= scale);
    (sum / count as f64, grad)
}

/// Per-run training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    /// Mean summed chain loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean loss per step index, per epoch.
    pub step_loss: Vec<Vec<f64>>,
    pub learning_rates: Vec<f64>,
}

#[derive(Serialize)]
struct LogRecord {
    epoch: usize,
    step_index: Option<usize>,
    loss: f64,
    lr: f64,
}

impl TrainingLog {
    /// Line-delimited records `(epoch, step_index, loss, lr)`; `step_index`
    /// is null for the chain total.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for (e, (&loss, steps)) in self.epoch_loss.iter().zip(&self.step_loss).enumerate() {
            let lr = self.learning_rates[e];
            for (t, &l) in steps.iter().enumerate() {
                out.push_str(&serde_json::to_string(&LogRecord { epoch: e, step_index: Some(t), loss: l, lr })?);
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogRecord { epoch: e, step_index: None, loss, lr })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Where `run_training` writes checkpoints and its log.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }
}

/// Trains a fresh denoiser on `images` (normalized, full slices or phantoms).
///
/// Every epoch draws `patches_per_image` random patches per image, shuffles
/// them and feeds batches of `batch_size` through [`Trainer::train_step`].
pub fn run_training(
    images: &[Image],
    cfg: &TrainConfig,
    spec: DenoiserSpec,
    seed: u64,
    output: &RunOutput,
) -> Result<(DenoiserState, TrainingLog)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let net = DenoiserState::build(spec, seed)?;
    run_training_with(net, images, cfg, seed, output)
}

/// As [`run_training`], continuing from an existing network.
pub fn run_training_with<N: Network<f32> + Checkpoint>(
    net: N,
    images: &[Image],
    cfg: &TrainConfig,
    seed: u64,
    output: &RunOutput,
) -> Result<(N, TrainingLog)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    for img in images {
        if img.rows() < cfg.patch_side || img.cols() < cfg.patch_side {
            return Err(Error::Config(format!(
                "patch side {} exceeds a {}x{} training image",
                cfg.patch_side,
                img.rows(),
                img.cols()
            )));
        }
    }
    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut rng = stream(seed);
    let mut log = TrainingLog {
        seed,
        ..TrainingLog::default()
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut patches = Vec::with_capacity(images.len() * cfg.patches_per_image);
        for img in images {
            let wrapped = NormalizedImage {
                pixels: img.clone(),
                provenance: Provenance::RealLdct,
                patient_id: String::new(),
                slice_index: 0,
            };
            let batch = extract_patches(&wrapped, cfg.patches_per_image, cfg.patch_side, rng.next_u64())?;
            patches.extend(batch.patches);
        }
        patches.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut step_totals = vec![0.0; cfg.k_steps];
        let mut batches = 0usize;
        for chunk in patches.chunks(cfg.batch_size) {
            let report = trainer.train_step(chunk, lr, &mut rng)?;
            epoch_total += report.loss;
            for (acc, tr) in step_totals.iter_mut().zip(&report.traces) {
                *acc += tr.loss_value;
            }
            batches += 1;
        }
        let mean = epoch_total / batches as f64;
        log.epoch_loss.push(mean);
        log.step_loss.push(step_totals.iter().map(|s| s / batches as f64).collect());
        log.learning_rates.push(lr);
        log::info!("epoch {epoch}: loss {mean:.5} lr {lr:.3e}");
        if let Some(dir) = &output.dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                trainer.net.save_checkpoint(&dir.join(format!("checkpoint-epoch{:03}.json", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = &output.dir {
        trainer.net.save_checkpoint(&dir.join("checkpoint-final.json"))?;
        let path = dir.join("training_log.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(log.to_json_lines()?.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((trainer.into_net(), log))
}

/// Networks that can be written to disk.
pub trait Checkpoint {
    fn save_checkpoint(&mut self, path: &Path) -> Result<()>;
}

impl Checkpoint for DenoiserState {
    fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.save(path)
    }
}

/// Monte Carlo check of the noisy-target loss decomposition
/// `E‖f(x+n₁)−(x+n₂)‖² = E‖f(x+n₁)−(y+n₂)‖² + E‖x−y‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub n_trials: usize,
    /// Mean of ‖f(x+n₁)−(x+n₂)‖² (per pixel).
    pub self_supervised: f64,
    /// Mean of ‖f(x+n₁)−(y+n₂)‖².
    pub supervised: f64,
    /// Mean of ‖x−y‖².
    pub noise_gap: f64,
    /// Mean of `self_supervised − supervised − noise_gap` per trial.
    pub residual: f64,
    pub standard_error: f64,
    /// Residual further than 4 standard errors from zero.
    pub violated: bool,
}

/// Estimates both sides of the decomposition for a fixed denoiser `f` over
/// paired noisy `x` and clean `y` samples, cycling through the pairs for
/// `n_trials` trials. Injected noise is not clamped.
///
/// The cross term only vanishes in expectation over the signal noise too, so
/// pass one distinct `x` per trial when possible.
pub fn verify_loss_identity(
    f: &dyn Fn(&Image) -> Image,
    x_samples: &[Image],
    y_samples: &[Image],
    noise: &NoiseSpec,
    n_trials: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if n_trials < 100 {
        return Err(Error::Config(format!(
            "loss identity check needs at least 100 trials, got {n_trials}"
        )));
    }
    if x_samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if x_samples.len() != y_samples.len() {
        return Err(Error::Invalid(format!(
            "{} noisy samples but {} clean samples",
            x_samples.len(),
            y_samples.len()
        )));
    }
    noise.validate()?;
    let mut rng = stream(seed);
    let sq = |a: &Image, b: &Image| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    };
    let (mut s_self, mut s_sup, mut s_gap) = (0.0, 0.0, 0.0);
    let mut residuals = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let (x, y) = (&x_samples[trial % x_samples.len()], &y_samples[trial % y_samples.len()]);
        x.ensure_same_shape(y)?;
        let n1 = sample_noise_from(noise, x, &mut rng)?;
        let n2 = sample_noise_from(noise, x, &mut rng)?;
        let pred = f(&x.zip_map(&n1, |a, b| a + b)?);
        let noisy_target = x.zip_map(&n2, |a, b| a + b)?;
        let clean_target = y.zip_map(&n2, |a, b| a + b)?;
        let a = sq(&pred, &noisy_target);
        let b = sq(&pred, &clean_target);
        let c = sq(x, y);
        s_self += a;
        s_sup += b;
        s_gap += c;
        residuals.push(a - b - c);
    }
    let n = n_trials as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(IdentityReport {
        n_trials,
        self_supervised: s_self / n,
        supervised: s_sup / n,
        noise_gap: s_gap / n,
        residual: mean,
        standard_error: se,
        violated: mean.abs() > 4.0 * se,
    })
}
