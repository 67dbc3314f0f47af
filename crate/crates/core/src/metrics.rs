//! PSNR, SSIM and RMSE with per-image, per-patient and overall aggregation.
//!
//! Metrics are computed on the normalized [0, 1] window with `MAX = 1`; RMSE is
//! reported on the 0–255 display scale by default.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Default RMSE display scale.
pub const DISPLAY_SCALE: f64 = 255.0;

fn mse(candidate: &Image, reference: &Image) -> Result<f64> {
    candidate.ensure_same_shape(reference)?;
    let sum: f64 = candidate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / candidate.len() as f64)
}

/// Peak signal-to-noise ratio in decibels. Identical images give `+inf`.
pub fn psnr(candidate: &Image, reference: &Image, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Config(format!("PSNR max value must be positive, got {max_value}")));
    }
    let mse = mse(candidate, reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Root mean squared error multiplied by `scale`.
pub fn rmse(candidate: &Image, reference: &Image, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("RMSE scale must be positive, got {scale}")));
    }
    Ok(mse(candidate, reference)?.sqrt() * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SsimWeighting {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimWindow {
    pub side: usize,
    pub weighting: SsimWeighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
}

impl SsimParams {
    /// Gaussian 11×11 window (σ = 1.5), `c1 = (0.01·MAX)²`, `c2 = (0.03·MAX)²`.
    pub fn standard(max_value: f64) -> Self {
        Self {
            c1: (0.01 * max_value).powi(2),
            c2: (0.03 * max_value).powi(2),
            window: SsimWindow {
                side: 11,
                weighting: SsimWeighting::Gaussian { sigma: 1.5 },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM constants c1 and c2 must be positive".into()));
        }
        if self.window.side == 0 {
            return Err(Error::Config("SSIM window side must be positive".into()));
        }
        if let SsimWeighting::Gaussian { sigma } = self.window.weighting {
            if !(sigma > 0.0) {
                return Err(Error::Config("SSIM Gaussian sigma must be positive".into()));
            }
        }
        Ok(())
    }

    /// Normalized 1D window weights; the 2D window is their outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let side = self.window.side;
        let raw: Vec<f64> = match self.window.weighting {
            SsimWeighting::Uniform => vec![1.0; side],
            SsimWeighting::Gaussian { sigma } => {
                let center = (side as f64 - 1.0) / 2.0;
                (0..side)
                    .map(|i| {
                        let d = i as f64 - center;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::standard(1.0)
    }
}

/// Valid-mode separable filtering with a normalized 1D kernel.
fn filter_valid(src: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let out_rows = rows - k + 1;
    let out_cols = cols - k + 1;
    let mut horizontal = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for c in 0..out_cols {
            horizontal[r * out_cols + c] = kernel
                .iter()
                .zip(&row[c..c + k])
                .map(|(w, v)| w * v)
                .sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..out_rows {
        for c in 0..out_cols {
            out[r * out_cols + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * horizontal[(r + i) * out_cols + c])
                .sum();
        }
    }
    out
}

/// Mean of the local SSIM map over all window positions fully inside the image.
pub fn ssim(candidate: &Image, reference: &Image, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    candidate.ensure_same_shape(reference)?;
    let (rows, cols) = candidate.shape();
    let side = params.window.side;
    if side > rows || side > cols {
        return Err(Error::Invalid(format!(
            "SSIM window {side} is larger than the {rows}x{cols} image"
        )));
    }
    let m: Vec<f64> = candidate.data().iter().map(|&v| v as f64).collect();
    let l: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
    let ll: Vec<f64> = l.iter().map(|v| v * v).collect();
    let ml: Vec<f64> = m.iter().zip(&l).map(|(a, b)| a * b).collect();

    let kernel = params.kernel_1d();
    let mu_m = filter_valid(&m, rows, cols, &kernel);
    let mu_l = filter_valid(&l, rows, cols, &kernel);
    let e_mm = filter_valid(&mm, rows, cols, &kernel);
    let e_ll = filter_valid(&ll, rows, cols, &kernel);
    let e_ml = filter_valid(&ml, rows, cols, &kernel);

    let (c1, c2) = (params.c1, params.c2);
    let total: f64 = (0..mu_m.len())
        .map(|i| {
            let (a, b) = (mu_m[i], mu_l[i]);
            let var_m = e_mm[i] - a * a;
            let var_l = e_ll[i] - b * b;
            let cov = e_ml[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (var_m + var_l + c2))
        })
        .sum();
    Ok(total / mu_m.len() as f64)
}

/// Metrics of one candidate image against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
}

/// Evaluates a candidate on the normalized window (`MAX = 1`, RMSE on 0–255).
pub fn evaluate(image_id: impl Into<String>, candidate: &Image, reference: &Image) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        image_id: image_id.into(),
        psnr_db: psnr(candidate, reference, 1.0)?,
        ssim: ssim(candidate, reference, &SsimParams::standard(1.0))?,
        rmse: rmse(candidate, reference, DISPLAY_SCALE)?,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub psnr_db: Stat,
    pub ssim: Stat,
    pub rmse: Stat,
}

impl Summary {
    fn of(items: &[&ImageMetrics]) -> Self {
        let finite_psnr: Vec<f64> = items
            .iter()
            .map(|m| m.psnr_db)
            .filter(|v| v.is_finite())
            .collect();
        if finite_psnr.len() < items.len() {
            log::warn!(
                "{} image(s) with identical candidate and reference excluded from PSNR statistics",
                items.len() - finite_psnr.len()
            );
        }
        let ssim: Vec<f64> = items.iter().map(|m| m.ssim).collect();
        let rmse: Vec<f64> = items.iter().map(|m| m.rmse).collect();
        Self {
            count: items.len(),
            psnr_db: Stat::of(&finite_psnr),
            ssim: Stat::of(&ssim),
            rmse: Stat::of(&rmse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub per_patient: Vec<PatientSummary>,
    pub overall: Summary,
}

/// Groups per-image metrics by patient (ordered by patient id) and overall.
pub fn aggregate(per_image: Vec<ImageMetrics>, patient_map: &HashMap<String, String>) -> Result<MetricReport> {
    let mut groups: BTreeMap<&str, Vec<&ImageMetrics>> = BTreeMap::new();
    for m in &per_image {
        let patient = patient_map
            .get(&m.image_id)
            .ok_or_else(|| Error::Invalid(format!("image '{}' has no patient mapping", m.image_id)))?;
        groups.entry(patient.as_str()).or_default().push(m);
    }
    let per_patient = groups
        .into_iter()
        .map(|(patient, items)| PatientSummary {
            patient_id: patient.to_string(),
            summary: Summary::of(&items),
        })
        .collect();
    let all: Vec<&ImageMetrics> = per_image.iter().collect();
    let overall = Summary::of(&all);
    Ok(MetricReport {
        per_image,
        per_patient,
        overall,
    })
}

impl MetricReport {
    /// Human-readable per-patient and overall table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>16} {:>16} {:>16}",
            "patient", "n", "PSNR (dB)", "SSIM", "RMSE"
        );
        let row = |out: &mut String, name: &str, s: &Summary| {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>8.3} ± {:<5.3} {:>8.4} ± {:<5.4} {:>8.3} ± {:<5.3}",
                name, s.count, s.psnr_db.mean, s.psnr_db.std, s.ssim.mean, s.ssim.std, s.rmse.mean, s.rmse.std
            );
        };
        for p in &self.per_patient {
            row(&mut out, &p.patient_id, &p.summary);
        }
        row(&mut out, "overall", &self.overall);
        out
    }

    /// One JSON record per image, then per patient, then the overall summary.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.per_image {
            let mut v = serde_json::to_value(m)?;
            v["record"] = "image".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        for p in &self.per_patient {
            let mut v = serde_json::to_value(p)?;
            v["record"] = "patient".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let mut v = serde_json::to_value(&self.overall)?;
        v["record"] = "overall".into();
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
        Ok(out)
    }
}
