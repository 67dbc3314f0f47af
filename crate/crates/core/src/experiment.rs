//! Benchmark generation, sweeps, the ablation table and image grids.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BenchmarkConfig, ExperimentConfig};
use crate::data::{load_dataset, make_synthetic_dataset, save_npy, write_manifest, ManifestRecord, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::{denoise, InferenceConfig};
use crate::metrics::{aggregate, evaluate, psnr, MetricReport, Summary};
use crate::nn::{DenoiserState, Network};
use crate::stochastic::NoiseSpec;
use crate::trainer::{run_training, RunOutput, TrainingLog};

/// A pixel-aligned evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    pub id: String,
    pub patient_id: String,
    pub slice_index: usize,
    pub noisy: Image,
    pub clean: Image,
}

/// Training inputs (noisy only) and paired test images.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<Image>,
    pub test: Vec<TestPair>,
}

impl Benchmark {
    /// Draws `train_images + test_images` phantoms from one seed; the last
    /// `test_images` form the test split. Each phantom is its own patient.
    pub fn synthetic(cfg: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let pairs = make_synthetic_dataset(
            cfg.train_images + cfg.test_images,
            cfg.side,
            seed,
            &NoiseSpec::gaussian(cfg.corruption_sigma),
        )?;
        let mut train = Vec::with_capacity(cfg.train_images);
        let mut test = Vec::with_capacity(cfg.test_images);
        for (i, p) in pairs.into_iter().enumerate() {
            if i < cfg.train_images {
                train.push(p.noisy.pixels);
            } else {
                test.push(TestPair {
                    id: format!("{}-{:04}", p.noisy.patient_id, p.noisy.slice_index),
                    patient_id: p.noisy.patient_id,
                    slice_index: p.noisy.slice_index,
                    noisy: p.noisy.pixels,
                    clean: p.clean.pixels,
                });
            }
        }
        Ok(Self { train, test })
    }

    /// Writes `.npy` images and a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::new();
        for (i, img) in self.train.iter().enumerate() {
            let name = format!("train-{i:04}.npy");
            save_npy(dir.join(&name), img)?;
            records.push(ManifestRecord {
                patient_id: format!("train-{i:04}"),
                slice_index: i,
                path: name,
                reference: None,
                split: Split::Train,
            });
        }
        for (i, pair) in self.test.iter().enumerate() {
            let name = format!("test-{i:04}-noisy.npy");
            let reference = format!("test-{i:04}-clean.npy");
            save_npy(dir.join(&name), &pair.noisy)?;
            save_npy(dir.join(&reference), &pair.clean)?;
            records.push(ManifestRecord {
                patient_id: pair.patient_id.clone(),
                slice_index: pair.slice_index,
                path: name,
                reference: Some(reference),
                split: Split::Test,
            });
        }
        write_manifest(dir.join(MANIFEST_FILE), &records)
    }

    /// Reads a dataset directory; test records without a reference are skipped.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in load_dataset(dir)? {
            match entry.record.split {
                Split::Train => train.push(entry.input),
                Split::Test => {
                    let Some(clean) = entry.reference else {
                        log::warn!("test record '{}' has no reference; skipped", entry.record.path);
                        continue;
                    };
                    test.push(TestPair {
                        id: format!("{}-{:04}", entry.record.patient_id, entry.record.slice_index),
                        patient_id: entry.record.patient_id,
                        slice_index: entry.record.slice_index,
                        noisy: entry.input,
                        clean,
                    });
                }
            }
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { train, test })
    }
}

/// Denoised-versus-clean metrics for one model, plus per-mask diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub denoised: MetricReport,
    pub noisy: MetricReport,
    /// PSNR of each single masked pass, per test image.
    pub single_pass_psnr: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn gain_db(&self) -> f64 {
        self.denoised.overall.psnr_db.mean - self.noisy.overall.psnr_db.mean
    }

    /// Fraction of images where the average beats the median single pass.
    pub fn averaging_win_rate(&self) -> f64 {
        let wins = self
            .denoised
            .per_image
            .iter()
            .zip(&self.single_pass_psnr)
            .filter(|(m, singles)| m.psnr_db >= median(singles))
            .count();
        wins as f64 / self.single_pass_psnr.len().max(1) as f64
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Denoises every test image with masked averaging and scores it.
pub fn evaluate_model<N: Network<f32>>(net: &N, test: &[TestPair], cfg: &InferenceConfig) -> Result<Evaluation> {
    let cfg = InferenceConfig {
        keep_per_mask_outputs: true,
        ..cfg.clone()
    };
    let mut denoised = Vec::with_capacity(test.len());
    let mut noisy = Vec::with_capacity(test.len());
    let mut singles = Vec::with_capacity(test.len());
    let mut patients = HashMap::new();
    for (i, pair) in test.iter().enumerate() {
        let per_image = InferenceConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let result = denoise(net, &pair.noisy, &per_image)?;
        denoised.push(evaluate(&pair.id, &result.image, &pair.clean)?);
        noisy.push(evaluate(&pair.id, &pair.noisy, &pair.clean)?);
        singles.push(
            result
                .per_mask_outputs
                .unwrap_or_default()
                .iter()
                .map(|o| psnr(o, &pair.clean, 1.0))
                .collect::<Result<Vec<_>>>()?,
        );
        patients.insert(pair.id.clone(), pair.patient_id.clone());
    }
    Ok(Evaluation {
        denoised: aggregate(denoised, &patients)?,
        noisy: aggregate(noisy, &patients)?,
        single_pass_psnr: singles,
    })
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json maps are ordered, so field order in the source does not matter.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KSteps,
    Sigma,
    Alpha,
    AblationCombo,
}

/// Which of progressive masking and noise injection are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Progressive chain without noise injection.
    ProgressiveOnly,
    /// Noise injection with a single step.
    NoiseOnly,
    Both,
    /// Neither: single-step blind-spot training.
    DegenerateBaseline,
}

impl Ablation {
    pub const TABLE: [Ablation; 3] = [Ablation::ProgressiveOnly, Ablation::NoiseOnly, Ablation::Both];

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let k = cfg.trainer.k_steps.max(2);
        match self {
            Self::ProgressiveOnly => {
                cfg.trainer.k_steps = k;
                cfg.trainer.noise.enabled = false;
            }
            Self::NoiseOnly => {
                cfg.trainer.k_steps = 1;
                cfg.trainer.noise.enabled = true;
            }
            Self::Both => {
                cfg.trainer.k_steps = k;
                cfg.trainer.noise.enabled = true;
            }
            Self::DegenerateBaseline => {
                cfg.trainer.k_steps = 1;
                cfg.trainer.noise.enabled = false;
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::ProgressiveOnly => "w progressive",
            Self::NoiseOnly => "w noise",
            Self::Both => "w both",
            Self::DegenerateBaseline => "degenerate baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Combo(Ablation),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Number(v) => write!(f, "{v}"),
            Self::Combo(a) => f.write_str(a.label()),
        }
    }
}

impl SweepValue {
    fn slug(&self) -> String {
        self.to_string().replace(' ', "_")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    /// Everything held constant across values.
    pub fixed: ExperimentConfig,
    /// Number of seeds averaged per value (`fixed.seed`, `fixed.seed + 1`, ...).
    pub seeds: usize,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, values: Vec<SweepValue>, fixed: ExperimentConfig) -> Self {
        Self { axis, values, fixed, seeds: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        let numeric = self.axis != SweepAxis::AblationCombo;
        let mut prev = f64::NEG_INFINITY;
        for v in &self.values {
            match (numeric, v) {
                (true, SweepValue::Number(x)) => {
                    if !(*x > prev) {
                        return Err(Error::Config("numeric sweep values must be strictly increasing".into()));
                    }
                    prev = *x;
                }
                (false, SweepValue::Combo(_)) => {}
                _ => return Err(Error::Config(format!("value '{v}' does not fit the {:?} axis", self.axis))),
            }
        }
        for v in &self.values {
            self.config_for(*v)?.validate()?;
        }
        Ok(())
    }

    /// The full configuration trained for one sweep value.
    pub fn config_for(&self, value: SweepValue) -> Result<ExperimentConfig> {
        let mut cfg = self.fixed.clone();
        match (self.axis, value) {
            (SweepAxis::KSteps, SweepValue::Number(k)) => {
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Config(format!("k must be a positive integer, got {k}")));
                }
                cfg.trainer.k_steps = k as usize;
            }
            (SweepAxis::Sigma, SweepValue::Number(s)) => {
                cfg.trainer.noise.sigma = s;
                cfg.trainer.noise.enabled = s > 0.0;
            }
            (SweepAxis::Alpha, SweepValue::Number(a)) => cfg.trainer.alpha = a,
            (SweepAxis::AblationCombo, SweepValue::Combo(c)) => c.apply(&mut cfg),
            (axis, v) => return Err(Error::Config(format!("value '{v}' does not fit the {axis:?} axis"))),
        }
        Ok(cfg)
    }
}

/// One training run of a sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub evaluation: Evaluation,
    pub log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: SweepValue,
    pub config_hash: String,
    pub runs: Vec<SeedRun>,
}

impl SweepEntry {
    /// Mean test PSNR across seeds.
    pub fn psnr(&self) -> f64 {
        self.runs.iter().map(|r| r.evaluation.denoised.overall.psnr_db.mean).sum::<f64>() / self.runs.len() as f64
    }

    fn mean_of(&self, f: impl Fn(&Summary) -> f64) -> f64 {
        self.runs.iter().map(|r| f(&r.evaluation.denoised.overall)).sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn entry(&self, value: SweepValue) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.value == value)
    }

    /// One row per value with mean PSNR, SSIM and RMSE.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>10} {:>8} {:>8}", format!("{:?}", self.axis), "PSNR", "SSIM", "RMSE");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<22} {:>10.3} {:>8.4} {:>8.3}",
                e.value.to_string(),
                e.psnr(),
                e.mean_of(|s| s.ssim.mean),
                e.mean_of(|s| s.rmse.mean)
            );
        }
        out
    }

    /// `value,seed,psnr,psnr_std,ssim,rmse` rows for plotting trends.
    pub fn to_trend_csv(&self) -> String {
        let mut out = String::from("value,seed,psnr_db,psnr_std,ssim,rmse\n");
        for e in &self.entries {
            for r in &e.runs {
                let s = &r.evaluation.denoised.overall;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    e.value, r.seed, s.psnr_db.mean, s.psnr_db.std, s.ssim.mean, s.rmse.mean
                );
            }
        }
        out
    }
}

const DONE_FILE: &str = "result.json";

/// Trains and evaluates one model per sweep value and seed.
///
/// Each finished run leaves `<out>/<value>/seed-<n>/result.json`; a rerun with
/// the same configuration reuses it, so an interrupted sweep resumes where it
/// stopped.
pub fn run_sweep(spec: &SweepSpec, dataset: &Path, out_dir: &Path) -> Result<SweepResult> {
    spec.validate()?;
    let bench = Benchmark::load(dataset)?;
    run_sweep_on(spec, &bench, out_dir)
}

pub fn run_sweep_on(spec: &SweepSpec, bench: &Benchmark, out_dir: &Path) -> Result<SweepResult> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let cfg = spec.config_for(value)?;
        let hash = config_hash(&cfg)?;
        let mut runs = Vec::with_capacity(spec.seeds);
        for s in 0..spec.seeds {
            let seed = spec.fixed.seed + s as u64;
            let dir = out_dir.join(value.slug()).join(format!("seed-{seed}"));
            runs.push(train_and_evaluate(&cfg, &hash, seed, bench, &dir)?);
        }
        entries.push(SweepEntry {
            value,
            config_hash: hash,
            runs,
        });
    }
    let result = SweepResult {
        axis: spec.axis,
        seed: spec.fixed.seed,
        config_hash: config_hash(spec)?,
        entries,
    };
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("table.txt", result.to_table())?;
    write("trend.csv", result.to_trend_csv())?;
    write("sweep.json", serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

#[derive(Serialize, Deserialize)]
struct Marker {
    config_hash: String,
    run: SeedRun,
}

fn train_and_evaluate(cfg: &ExperimentConfig, hash: &str, seed: u64, bench: &Benchmark, dir: &Path) -> Result<SeedRun> {
    let marker_path = dir.join(DONE_FILE);
    if let Ok(text) = fs::read_to_string(&marker_path) {
        if let Ok(marker) = serde_json::from_str::<Marker>(&text) {
            if marker.config_hash == hash && marker.run.seed == seed {
                log::info!("reusing finished run in {}", dir.display());
                return Ok(marker.run);
            }
        }
    }
    let (net, _) = train_model(cfg, seed, bench, &RunOutput::to_dir(dir))?;
    let evaluation = evaluate_model(&net, &bench.test, &cfg.inference_config())?;
    let run = SeedRun {
        seed,
        evaluation,
        log: dir.join("training_log.jsonl"),
    };
    let marker = Marker {
        config_hash: hash.to_string(),
        run,
    };
    fs::write(&marker_path, serde_json::to_string(&marker)?).map_err(|e| Error::io(&marker_path, e))?;
    Ok(marker.run)
}

/// Trains on the benchmark's training images with `cfg` and `seed`.
pub fn train_model(
    cfg: &ExperimentConfig,
    seed: u64,
    bench: &Benchmark,
    output: &RunOutput,
) -> Result<(DenoiserState, TrainingLog)> {
    run_training(&bench.train, &cfg.trainer, cfg.model, seed, output)
}

/// The three-row ablation (progressive only, noise only, both), optionally
/// followed by the degenerate baseline.
pub fn run_ablation_table(
    fixed: &ExperimentConfig,
    dataset: &Path,
    out_dir: &Path,
    with_baseline: bool,
) -> Result<SweepResult> {
    let bench = Benchmark::load(dataset)?;
    run_ablation_on(fixed, &bench, out_dir, with_baseline)
}

pub fn run_ablation_on(
    fixed: &ExperimentConfig,
    bench: &Benchmark,
    out_dir: &Path,
    with_baseline: bool,
) -> Result<SweepResult> {
    let mut values: Vec<SweepValue> = Ablation::TABLE.iter().map(|&a| SweepValue::Combo(a)).collect();
    if with_baseline {
        values.push(SweepValue::Combo(Ablation::DegenerateBaseline));
    }
    let result = run_sweep_on(&SweepSpec::new(SweepAxis::AblationCombo, values, fixed.clone()), bench, out_dir)?;
    let both = result.entry(SweepValue::Combo(Ablation::Both)).map(SweepEntry::psnr);
    let best_other = [Ablation::ProgressiveOnly, Ablation::NoiseOnly]
        .iter()
        .filter_map(|&a| result.entry(SweepValue::Combo(a)).map(SweepEntry::psnr))
        .fold(f64::NEG_INFINITY, f64::max);
    if let Some(both) = both {
        if both <= best_other {
            log::warn!("ablation: 'w both' ({both:.3} dB) is not the best variant ({best_other:.3} dB)");
        }
    }
    Ok(result)
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const LABEL_H: usize = GLYPH_H + 4;
const GAP: usize = 4;

fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        _ => [0; GLYPH_H],
    }
}

fn draw_text(buf: &mut [u8], width: usize, x0: usize, y0: usize, max_w: usize, text: &str) {
    let fit = (max_w / (GLYPH_W + 1)).max(1);
    for (i, ch) in text.chars().take(fit).enumerate() {
        let rows = glyph(ch);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - dx)) != 0 {
                    buf[(y0 + dy) * width + x0 + i * (GLYPH_W + 1) + dx] = 255;
                }
            }
        }
    }
}

/// Panel labels: the caption plus PSNR against `reference` when given.
pub fn panel_labels(inputs: &[(String, Image)], reference: Option<&Image>) -> Result<Vec<String>> {
    inputs
        .iter()
        .map(|(label, img)| match reference {
            Some(r) => {
                let p = psnr(img, r, 1.0)?;
                Ok(if p.is_finite() { format!("{label} {p:.2}dB") } else { label.clone() })
            }
            None => Ok(label.clone()),
        })
        .collect()
}

/// Lays panels out on a ⌈√n⌉-column grid with a caption bar above each.
pub fn render_grid(inputs: &[(String, Image)], reference: Option<&Image>) -> Result<(usize, usize, Vec<u8>)> {
    let first = &inputs.first().ok_or(Error::Invalid("image grid needs at least one panel".into()))?.1;
    for (_, img) in inputs {
        first.ensure_same_shape(img)?;
    }
    if let Some(r) = reference {
        first.ensure_same_shape(r)?;
    }
    let labels = panel_labels(inputs, reference)?;
    let (h, w) = first.shape();
    let n = inputs.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell_w = w + GAP;
    let cell_h = h + LABEL_H + GAP;
    let width = cols * cell_w + GAP;
    let height = rows * cell_h + GAP;
    let mut buf = vec![32u8; width * height];
    for (i, ((_, img), label)) in inputs.iter().zip(&labels).enumerate() {
        let x0 = GAP + (i % cols) * cell_w;
        let y0 = GAP + (i / cols) * cell_h;
        for y in 0..LABEL_H {
            buf[(y0 + y) * width + x0..(y0 + y) * width + x0 + w].fill(0);
        }
        draw_text(&mut buf, width, x0 + 2, y0 + 2, w.saturating_sub(2), label);
        for r in 0..h {
            for c in 0..w {
                buf[(y0 + LABEL_H + r) * width + x0 + c] = (img.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok((width, height, buf))
}

/// Writes a labelled comparison grid as an 8-bit grayscale PNG.
pub fn emit_image_grid(inputs: &[(String, Image)], reference: Option<&Image>, out: &Path) -> Result<()> {
    let (width, height, buf) = render_grid(inputs, reference)?;
    let img = ::image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer matches the grid dimensions");
    img.save(out)?;
    Ok(())
}
