//! CT ingestion, HU windowing, patch extraction and synthetic phantom datasets.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dicom_dictionary_std::tags;
use dicom_object::{open_file, DefaultDicomObject};
use ndarray::Array2;
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::stochastic::{add_noise, sample_noise_from, stream, NoiseSpec};

/// Lowest and highest Hounsfield values kept by the normalization window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { lo: -1024.0, hi: 3072.0 }
    }
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "HU window lower bound {} must be below upper bound {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Clamp to the window, then map affinely to [0, 1].
    pub fn normalize(&self, hu: f64) -> f64 {
        (hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.lo + value * (self.hi - self.lo)
    }
}

/// One CT slice in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtSlice {
    pub pixels: Image,
    pub patient_id: String,
    pub slice_index: usize,
    /// Pixel spacing (row, column) in millimetres.
    pub spacing: (f64, f64),
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealLdct,
    RealNdct,
    SyntheticClean,
    SyntheticNoisy,
}

/// A slice normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub pixels: Image,
    pub provenance: Provenance,
    pub patient_id: String,
    pub slice_index: usize,
}

impl NormalizedImage {
    pub fn new(pixels: Image, provenance: Provenance, patient_id: impl Into<String>, slice_index: usize) -> Result<Self> {
        let (lo, hi) = pixels.min_max();
        if !pixels.is_empty() && !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::Invalid(format!(
                "normalized image values must lie in [0, 1], found [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            pixels,
            provenance,
            patient_id: patient_id.into(),
            slice_index,
        })
    }
}

pub fn window_normalize(slice: &CtSlice, window: HuWindow, provenance: Provenance) -> Result<NormalizedImage> {
    window.validate()?;
    let pixels = slice.pixels.map(|hu| window.normalize(hu as f64) as f32);
    NormalizedImage::new(pixels, provenance, slice.patient_id.clone(), slice.slice_index)
}

/// Restores HU values from a normalized image.
pub fn denormalize(image: &Image, window: HuWindow) -> Image {
    image.map(|v| window.denormalize(v as f64) as f32)
}

fn dicom_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dicom {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_f64(obj: &DefaultDicomObject, tag: dicom_object::Tag) -> Option<f64> {
    obj.element_opt(tag).ok().flatten().and_then(|e| e.to_float64().ok())
}

struct RawSlice {
    path: PathBuf,
    patient_id: String,
    position: Option<f64>,
    instance: Option<i64>,
    pixels: Image,
    spacing: (f64, f64),
}

fn read_slice(path: &Path) -> Result<RawSlice> {
    let obj = open_file(path).map_err(|e| dicom_err(path, e.to_string()))?;
    let slope = read_f64(&obj, tags::RESCALE_SLOPE)
        .ok_or_else(|| dicom_err(path, "missing rescale slope (0028,1053)"))?;
    let intercept = read_f64(&obj, tags::RESCALE_INTERCEPT)
        .ok_or_else(|| dicom_err(path, "missing rescale intercept (0028,1052)"))?;
    let get_int = |tag, name: &str| -> Result<i64> {
        obj.element(tag)
            .map_err(|_| dicom_err(path, format!("missing {name}")))?
            .to_int::<i64>()
            .map_err(|e| dicom_err(path, format!("bad {name}: {e}")))
    };
    let rows = get_int(tags::ROWS, "rows")? as usize;
    let cols = get_int(tags::COLUMNS, "columns")? as usize;
    let bits = get_int(tags::BITS_ALLOCATED, "bits allocated")?;
    let signed = get_int(tags::PIXEL_REPRESENTATION, "pixel representation")? == 1;
    let bytes = obj
        .element(tags::PIXEL_DATA)
        .map_err(|_| dicom_err(path, "missing pixel data"))?
        .to_bytes()
        .map_err(|e| dicom_err(path, format!("unreadable pixel data: {e}")))?;
    if bits != 16 {
        return Err(dicom_err(path, format!("unsupported bits allocated {bits} (expected 16)")));
    }
    if bytes.len() < rows * cols * 2 {
        return Err(dicom_err(path, "pixel data shorter than rows x columns"));
    }
    let data = bytes
        .chunks_exact(2)
        .take(rows * cols)
        .map(|b| {
            let stored = if signed {
                i16::from_le_bytes([b[0], b[1]]) as f64
            } else {
                u16::from_le_bytes([b[0], b[1]]) as f64
            };
            (stored * slope + intercept) as f32
        })
        .collect();
    let spacing = obj
        .element_opt(tags::PIXEL_SPACING)
        .ok()
        .flatten()
        .and_then(|e| e.to_multi_float64().ok())
        .filter(|v| v.len() == 2)
        .map(|v| (v[0], v[1]))
        .unwrap_or((1.0, 1.0));
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(dicom_err(path, "pixel spacing must be positive"));
    }
    let position = obj
        .element_opt(tags::IMAGE_POSITION_PATIENT)
        .ok()
        .flatten()
        .and_then(|e| e.to_multi_float64().ok())
        .and_then(|v| v.get(2).copied());
    let instance = obj
        .element_opt(tags::INSTANCE_NUMBER)
        .ok()
        .flatten()
        .and_then(|e| e.to_int::<i64>().ok());
    let patient_id = obj
        .element_opt(tags::PATIENT_ID)
        .ok()
        .flatten()
        .and_then(|e| e.to_str().ok().map(|s| s.trim().to_string()))
        .unwrap_or_default();
    Ok(RawSlice {
        path: path.to_path_buf(),
        patient_id,
        position,
        instance,
        pixels: Image::new(rows, cols, data)?,
        spacing,
    })
}

/// Reads every single-frame CT file in `directory` and converts it to HU.
///
/// Slices are ordered by patient position along z, then instance number, and
/// by file name when neither is present.
pub fn load_dicom_series(directory: impl AsRef<Path>) -> Result<Vec<CtSlice>> {
    let directory = directory.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(directory)
        .map_err(|e| Error::io(directory, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut raw = Vec::with_capacity(paths.len());
    for path in &paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with('.') || name.ends_with(".json") || name.ends_with(".jsonl") {
            continue;
        }
        raw.push(read_slice(path)?);
    }
    if raw.is_empty() {
        return Err(Error::NoSlices(directory.to_path_buf()));
    }
    let shape = raw[0].pixels.shape();
    if let Some(bad) = raw.iter().find(|s| s.pixels.shape() != shape) {
        return Err(dicom_err(
            &bad.path,
            format!("dimensions {:?} differ from series dimensions {:?}", bad.pixels.shape(), shape),
        ));
    }
    if raw.iter().all(|s| s.position.is_some()) {
        raw.sort_by(|a, b| a.position.partial_cmp(&b.position).expect("finite positions"));
    } else if raw.iter().all(|s| s.instance.is_some()) {
        raw.sort_by_key(|s| s.instance);
    } else {
        log::warn!(
            "{}: slice position metadata incomplete, ordering by file name",
            directory.display()
        );
    }
    let fallback_patient = directory
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("unknown")
        .to_string();
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, s)| CtSlice {
            pixels: s.pixels,
            patient_id: if s.patient_id.is_empty() { fallback_patient.clone() } else { s.patient_id },
            slice_index: i,
            spacing: s.spacing,
            source: Some(s.path),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub patient_id: String,
    pub slice_index: usize,
    pub row: usize,
    pub col: usize,
}

/// Square training patches with their source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub side: usize,
    pub patches: Vec<Image>,
    pub sources: Vec<PatchOrigin>,
}

impl PatchBatch {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            patches: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn extend(&mut self, other: PatchBatch) -> Result<()> {
        if !other.is_empty() && other.side != self.side {
            return Err(Error::Invalid(format!(
                "cannot merge patches of side {} into a batch of side {}",
                other.side, self.side
            )));
        }
        self.patches.extend(other.patches);
        self.sources.extend(other.sources);
        Ok(())
    }
}

/// Samples `count` patches at uniformly random valid corners.
pub fn extract_patches(image: &NormalizedImage, count: usize, side: usize, rng_seed: u64) -> Result<PatchBatch> {
    let (rows, cols) = image.pixels.shape();
    if count == 0 || side == 0 {
        return Err(Error::Config("patch count and side must be positive".into()));
    }
    if side > rows || side > cols {
        return Err(Error::Invalid(format!(
            "patch side {side} exceeds the {rows}x{cols} image"
        )));
    }
    let mut rng = stream(rng_seed);
    let mut batch = PatchBatch::new(side);
    for _ in 0..count {
        let row = rng.random_range(0..=rows - side);
        let col = rng.random_range(0..=cols - side);
        batch.patches.push(image.pixels.crop(row, col, side, side)?);
        batch.sources.push(PatchOrigin {
            patient_id: image.patient_id.clone(),
            slice_index: image.slice_index,
            row,
            col,
        });
    }
    Ok(batch)
}

/// Subject-level train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn new(train: impl IntoIterator<Item = String>, test: impl IntoIterator<Item = String>) -> Result<Self> {
        let split = Self {
            train_patients: train.into_iter().collect(),
            test_patients: test.into_iter().collect(),
        };
        if let Some(p) = split.train_patients.intersection(&split.test_patients).next() {
            return Err(Error::Config(format!("patient '{p}' appears in both train and test splits")));
        }
        Ok(split)
    }

    /// Randomly assigns `n_test` of `patients` to the test split.
    pub fn random(patients: &[String], n_test: usize, seed: u64) -> Result<Self> {
        let unique: BTreeSet<&String> = patients.iter().collect();
        if n_test > unique.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n_test} of {} patients",
                unique.len()
            )));
        }
        let mut ids: Vec<String> = unique.into_iter().cloned().collect();
        ids.shuffle(&mut stream(seed));
        let test = ids.split_off(ids.len() - n_test);
        Self::new(ids, test)
    }

    pub fn split_of(&self, patient: &str) -> Option<Split> {
        if self.train_patients.contains(patient) {
            Some(Split::Train)
        } else if self.test_patients.contains(patient) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Pixel-aligned clean and corrupted phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub clean: NormalizedImage,
    pub noisy: NormalizedImage,
}

/// Draws a piecewise-constant phantom: a body ellipse on an air background
/// with internal ellipses and rectangles of distinct intensities.
pub fn phantom<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Image {
    let s = side as f64;
    let mut img = Image::filled(side, side, rng.random_range(0.02..0.08) as f32);
    let body = rng.random_range(0.15..0.35) as f32;
    let (by, bx) = (s / 2.0 + rng.random_range(-0.05..0.05) * s, s / 2.0 + rng.random_range(-0.05..0.05) * s);
    let (ba, bb) = (rng.random_range(0.38..0.48) * s, rng.random_range(0.32..0.45) * s);
    fill_ellipse(&mut img, by, bx, ba, bb, 0.0, body);
    let shapes = rng.random_range(4..=8);
    for _ in 0..shapes {
        let value = rng.random_range(0.2..0.9) as f32;
        let cy = by + rng.random_range(-0.6..0.6) * ba;
        let cx = bx + rng.random_range(-0.6..0.6) * bb;
        if rng.random_bool(0.6) {
            let a = rng.random_range(0.04..0.25) * s;
            let b = rng.random_range(0.04..0.25) * s;
            let theta = rng.random_range(0.0..PI);
            fill_ellipse(&mut img, cy, cx, a, b, theta, value);
        } else {
            let h = rng.random_range(0.05..0.3) * s;
            let w = rng.random_range(0.05..0.3) * s;
            fill_rect(&mut img, cy - h / 2.0, cx - w / 2.0, h, w, value);
        }
    }
    img
}

fn fill_ellipse(img: &mut Image, cy: f64, cx: f64, a: f64, b: f64, theta: f64, value: f32) {
    let (sin, cos) = theta.sin_cos();
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                img.set(r, c, value);
            }
        }
    }
}

fn fill_rect(img: &mut Image, top: f64, left: f64, h: f64, w: f64, value: f32) {
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if y >= top && y < top + h && x >= left && x < left + w {
                img.set(r, c, value);
            }
        }
    }
}

/// Generates `n_images` phantoms and their corrupted versions.
pub fn make_synthetic_dataset(n_images: usize, side: usize, rng_seed: u64, corruption: &NoiseSpec) -> Result<Vec<SyntheticPair>> {
    if n_images == 0 || side == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    corruption.validate()?;
    let mut shapes = stream(rng_seed);
    let mut noise = stream(rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n_images)
        .map(|i| {
            let clean = phantom(side, &mut shapes);
            let field = sample_noise_from(corruption, &clean, &mut noise)?;
            let noisy = add_noise(&clean, &field)?;
            let id = format!("synthetic-{i:04}");
            Ok(SyntheticPair {
                clean: NormalizedImage::new(clean, Provenance::SyntheticClean, id.clone(), i)?,
                noisy: NormalizedImage::new(noisy, Provenance::SyntheticNoisy, id, i)?,
            })
        })
        .collect()
}

/// One slice of an on-disk dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub slice_index: usize,
    /// Network input (low-dose or corrupted), relative to the manifest directory.
    pub path: String,
    /// Optional clean reference (normal-dose or phantom).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Saves a normalized image as a 2D `f32` `.npy` array.
pub fn save_npy(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let arr = Array2::from_shape_vec(image.shape(), image.data().to_vec())
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    arr.write_npy(std::io::BufWriter::new(file))
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn load_npy(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let arr = Array2::<f32>::read_npy(BufReader::new(file))
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let (rows, cols) = arr.dim();
    Image::new(rows, cols, arr.iter().copied().collect())
}

/// A loaded manifest entry.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub record: ManifestRecord,
    pub input: Image,
    pub reference: Option<Image>,
}

/// Loads every record of `<dir>/manifest.jsonl` with its images.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let dir = dir.as_ref();
    let records = read_manifest(dir.join(MANIFEST_FILE))?;
    records
        .into_iter()
        .map(|record| {
            let input = load_npy(dir.join(&record.path))?;
            let reference = match &record.reference {
                Some(r) => Some(load_npy(dir.join(r))?),
                None => None,
            };
            Ok(DatasetEntry { record, input, reference })
        })
        .collect()
}
