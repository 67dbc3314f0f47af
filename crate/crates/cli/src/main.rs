//! `blindspot`: ingest CT data, train, denoise, score and run ablations.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use blindspot_core::config::{ExperimentConfig, DATA_ROOT_ENV};
use blindspot_core::data::{
    denormalize, load_dicom_series, load_npy, read_manifest, save_npy, window_normalize, write_manifest,
    ManifestRecord, Provenance, Split, MANIFEST_FILE,
};
use blindspot_core::experiment::{
    emit_image_grid, run_ablation_table, run_sweep, Ablation, Benchmark, SweepAxis, SweepSpec, SweepValue,
};
use blindspot_core::inference::{denoise, InferenceMode};
use blindspot_core::metrics::{aggregate, evaluate};
use blindspot_core::nn::DenoiserState;
use blindspot_core::trainer::{run_training, RunOutput};
use blindspot_core::Image;

#[derive(Parser)]
#[command(name = "blindspot", version, about = "Progressive blind-spot denoising for low-dose CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set trainer.k_steps=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a DICOM series or generate the synthetic benchmark into a dataset directory.
    Ingest(IngestArgs),
    /// Train a denoiser on a dataset's training split.
    Train(TrainArgs),
    /// Denoise a DICOM series, `.npy` array or PNG with masked averaging.
    Denoise(DenoiseArgs),
    /// Score candidate images against references, per image, per patient and overall.
    Metrics(MetricsArgs),
    /// Train one model per value of a hyperparameter axis.
    Sweep(SweepArgs),
    /// Train the progressive / noise / both ablation.
    Ablate(AblateArgs),
    /// Write a labelled comparison grid PNG.
    Grid(GridArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Output dataset directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// DICOM series directory (low-dose input).
    #[arg(long, conflicts_with = "synthetic")]
    dicom: Option<PathBuf>,
    /// Optional normal-dose series paired slice by slice with `--dicom`.
    #[arg(long, requires = "dicom")]
    reference_dicom: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Generate the synthetic phantom benchmark instead.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; defaults to `data.root` or the environment.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// DICOM series directory, `.npy` array (normalized) or PNG.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output `.npy` (single image) or directory (DICOM series).
    #[arg(long)]
    out: PathBuf,
    /// Also write HU-restored arrays next to the normalized output.
    #[arg(long)]
    hu: bool,
    /// Diagnostic chained re-masking instead of independent passes.
    #[arg(long)]
    chained: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory of candidate `.npy` images.
    #[arg(long)]
    candidate_dir: PathBuf,
    /// Directory of reference `.npy` images with the same file names.
    #[arg(long)]
    reference_dir: PathBuf,
    /// JSON object mapping image id (file stem) to patient id; defaults to one patient per image.
    #[arg(long)]
    patient_map: Option<PathBuf>,
    /// Write line-delimited JSON records here.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    KSteps,
    Sigma,
    Alpha,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values in increasing order.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Add the single-step, noise-free baseline row.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GridArgs {
    /// Panel as `LABEL=path.npy` (repeat; laid out row-major).
    #[arg(long = "panel", value_name = "LABEL=PATH", required = true)]
    panels: Vec<String>,
    /// Reference image for per-panel PSNR captions.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Metrics(a) => metrics(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Grid(a) => grid(a),
    }
}

fn dataset_dir(explicit: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    explicit
        .or_else(|| cfg.data.root.clone())
        .with_context(|| format!("no dataset given: pass --dataset, set data.root or {DATA_ROOT_ENV}"))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let cfg = a.config.load()?;
    if a.synthetic {
        let bench = Benchmark::synthetic(&cfg.data.benchmark, cfg.seed)?;
        bench.save(&a.out)?;
        println!(
            "wrote {} training and {} test phantoms to {}",
            bench.train.len(),
            bench.test.len(),
            a.out.display()
        );
        return Ok(());
    }
    let Some(dicom) = a.dicom else {
        bail!("ingest needs --dicom <dir> or --synthetic");
    };
    let window = cfg.data.window;
    let slices = load_dicom_series(&dicom)?;
    let references = match &a.reference_dicom {
        Some(dir) => {
            let r = load_dicom_series(dir)?;
            if r.len() != slices.len() {
                bail!("{} low-dose slices but {} reference slices", slices.len(), r.len());
            }
            Some(r)
        }
        None => None,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = a.out.join(MANIFEST_FILE);
    let mut records = if manifest.exists() { read_manifest(&manifest)? } else { Vec::new() };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    for (i, slice) in slices.iter().enumerate() {
        let norm = window_normalize(slice, window, Provenance::RealLdct)?;
        let stem = format!("{}-{:04}", slice.patient_id, slice.slice_index);
        let path = format!("{stem}-ldct.npy");
        save_npy(a.out.join(&path), &norm.pixels)?;
        let reference = match &references {
            Some(refs) => {
                let r = window_normalize(&refs[i], window, Provenance::RealNdct)?;
                let p = format!("{stem}-ndct.npy");
                save_npy(a.out.join(&p), &r.pixels)?;
                Some(p)
            }
            None => None,
        };
        records.push(ManifestRecord {
            patient_id: slice.patient_id.clone(),
            slice_index: slice.slice_index,
            path,
            reference,
            split,
        });
    }
    write_manifest(&manifest, &records)?;
    fs::write(a.out.join("window.json"), serde_json::to_string(&window)?)?;
    println!("ingested {} slices into {}", slices.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = dataset_dir(a.dataset, &cfg)?;
    let bench = Benchmark::load(&dir)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml_string()?)?;
    let (_, log) = run_training(&bench.train, &cfg.trainer, cfg.model, seed, &RunOutput::to_dir(&a.out))?;
    println!(
        "trained {} epochs; final loss {:.5}; checkpoint {}",
        log.epoch_loss.len(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN),
        a.out.join("checkpoint-final.json").display()
    );
    Ok(())
}

fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => Ok(load_npy(path)?),
        Some("png") => {
            let g = image::open(path)?.to_luma16();
            let (w, h) = g.dimensions();
            Ok(Image::new(h as usize, w as usize, g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())?)
        }
        _ => bail!("unsupported image file {}", path.display()),
    }
}

fn denoise_cmd(a: DenoiseArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let net = DenoiserState::load(&a.checkpoint)?;
    let mut inf = cfg.inference_config();
    if let Some(k) = a.k {
        inf.k_samples = k;
    }
    if let Some(alpha) = a.alpha {
        inf.alpha = alpha;
    }
    if let Some(seed) = a.seed {
        inf.seed = seed;
    }
    if a.chained {
        inf.mode = InferenceMode::Chained;
    }
    let window = cfg.data.window;
    if a.input.is_dir() {
        fs::create_dir_all(&a.out)?;
        let slices = load_dicom_series(&a.input)?;
        for slice in &slices {
            let norm = window_normalize(slice, window, Provenance::RealLdct)?;
            let out = denoise(&net, &norm.pixels, &inf)?;
            let stem = format!("{}-{:04}", slice.patient_id, slice.slice_index);
            save_npy(a.out.join(format!("{stem}.npy")), &out.image)?;
            if a.hu {
                save_npy(a.out.join(format!("{stem}-hu.npy")), &denormalize(&out.image, window))?;
            }
        }
        println!("denoised {} slices into {}", slices.len(), a.out.display());
    } else {
        let input = read_image(&a.input)?;
        let out = denoise(&net, &input, &inf)?;
        save_npy(&a.out, &out.image)?;
        if a.hu {
            save_npy(a.out.with_extension("hu.npy"), &denormalize(&out.image, window))?;
        }
        println!("wrote {} (mask seeds {:?})", a.out.display(), out.masks_used);
    }
    Ok(())
}

fn npy_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "npy") {
            stems.push(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    stems.sort();
    Ok(stems)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let stems = npy_stems(&a.candidate_dir)?;
    if stems.is_empty() {
        bail!("no .npy candidates in {}", a.candidate_dir.display());
    }
    let patient_map: HashMap<String, String> = match &a.patient_map {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => stems.iter().map(|s| (s.clone(), s.clone())).collect(),
    };
    let mut per_image = Vec::with_capacity(stems.len());
    for stem in &stems {
        let cand = load_npy(a.candidate_dir.join(format!("{stem}.npy")))?;
        let reference = load_npy(a.reference_dir.join(format!("{stem}.npy")))
            .with_context(|| format!("reference for '{stem}'"))?;
        per_image.push(evaluate(stem, &cand, &reference)?);
    }
    let report = aggregate(per_image, &patient_map)?;
    print!("{}", report.to_table());
    if let Some(out) = a.json_out {
        fs::write(&out, report.to_json_lines()?)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = dataset_dir(a.dataset, &cfg)?;
    let axis = match a.axis {
        AxisArg::KSteps => SweepAxis::KSteps,
        AxisArg::Sigma => SweepAxis::Sigma,
        AxisArg::Alpha => SweepAxis::Alpha,
    };
    let mut spec = SweepSpec::new(axis, a.values.into_iter().map(SweepValue::Number).collect(), cfg);
    spec.seeds = a.seeds;
    let result = run_sweep(&spec, &dir, &a.out)?;
    print!("{}", result.to_table());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = dataset_dir(a.dataset, &cfg)?;
    let result = run_ablation_table(&cfg, &dir, &a.out, a.baseline)?;
    print!("{}", result.to_table());
    let both = result.entry(SweepValue::Combo(Ablation::Both)).map(|e| e.psnr());
    if let Some(both) = both {
        let others = [Ablation::ProgressiveOnly, Ablation::NoiseOnly]
            .iter()
            .filter_map(|&v| result.entry(SweepValue::Combo(v)).map(|e| e.psnr()))
            .fold(f64::NEG_INFINITY, f64::max);
        println!("'w both' best: {}", both > others);
    }
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let mut panels = Vec::with_capacity(a.panels.len());
    for p in &a.panels {
        let (label, path) = p.split_once('=').with_context(|| format!("panel '{p}' is not LABEL=PATH"))?;
        panels.push((label.to_string(), read_image(Path::new(path))?));
    }
    let reference = a.reference.as_deref().map(read_image).transpose()?;
    emit_image_grid(&panels, reference.as_ref(), &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
