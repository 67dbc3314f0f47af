use std::collections::HashMap;

use blindspot_core::data::{extract_patches, make_synthetic_dataset, DatasetSplit, HuWindow, NormalizedImage, Provenance};
use blindspot_core::metrics::{aggregate, psnr, rmse, ssim, ImageMetrics, SsimParams};
use blindspot_core::stochastic::{add_noise, apply_mask, sample_mask_from, sample_noise, stream, NoiseSpec};
use blindspot_core::Image;
use proptest::prelude::*;

fn image_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f32..=1.0, rows * cols).prop_map(move |d| Image::new(rows, cols, d).unwrap())
}

/// Values on a 1/256 grid so shifting by a grid constant is exact in f32.
fn dyadic_image(rows: usize, cols: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0u16..=128, rows * cols)
        .prop_map(move |d| Image::new(rows, cols, d.into_iter().map(|v| v as f32 / 256.0).collect()).unwrap())
}

fn naive_mse(a: &Image, b: &Image) -> f64 {
    let mut acc = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let d = a.get(r, c) as f64 - b.get(r, c) as f64;
            acc += d * d;
        }
    }
    acc / a.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_normalization_round_trips_and_is_monotone(
        lo in -2000.0f64..0.0,
        width in 10.0f64..5000.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let w = HuWindow::new(lo, lo + width).unwrap();
        let (h1, h2) = (lo + a * width, lo + b * width);
        prop_assert!((w.denormalize(w.normalize(h1)) - h1).abs() < 1e-6);
        if h1 <= h2 {
            prop_assert!(w.normalize(h1) <= w.normalize(h2));
        }
        prop_assert_eq!(w.normalize(lo - 1.0), 0.0);
        prop_assert_eq!(w.normalize(lo + width + 1.0), 1.0);
    }

    #[test]
    fn psnr_and_rmse_match_naive_loops(a in image_strategy(9, 13), b in image_strategy(9, 13)) {
        let mse = naive_mse(&a, &b);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        let r = rmse(&a, &b, 255.0).unwrap();
        prop_assert!((r - mse.sqrt() * 255.0).abs() < 1e-9);
        // coupling: psnr = 10 log10(MAX² scale² / rmse²)
        prop_assert!((p - 10.0 * (255.0f64.powi(2) / (r * r)).log10()).abs() < 1e-9);
        let r1 = rmse(&a, &b, 1.0).unwrap();
        prop_assert!((r1 * r1 - mse).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_translation_invariant(a in dyadic_image(8, 8), b in dyadic_image(8, 8), shift in 0u16..=64) {
        prop_assume!(a != b);
        let c = shift as f32 / 256.0;
        let pa = a.map(|v| v + c);
        let pb = b.map(|v| v + c);
        prop_assert_eq!(psnr(&pa, &pb, 1.0).unwrap(), psnr(&a, &b, 1.0).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image_strategy(16, 16), b in image_strategy(16, 16)) {
        let params = SsimParams::standard(1.0);
        let ab = ssim(&a, &b, &params).unwrap();
        let ba = ssim(&b, &a, &params).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn masks_are_binary_and_idempotent(alpha in 0.01f64..0.99, seed in any::<u64>(), x in image_strategy(12, 10)) {
        let mask = sample_mask_from(alpha, 12, 10, &mut stream(seed));
        prop_assert!(mask.values().iter().all(|&v| v <= 1));
        let once = apply_mask(&mask, &x).unwrap();
        prop_assert_eq!(&apply_mask(&mask, &once).unwrap(), &once);
        for r in 0..12 {
            for c in 0..10 {
                let expected = if mask.is_kept(r, c) { x.get(r, c) } else { 0.0 };
                prop_assert_eq!(once.get(r, c), expected);
            }
        }
    }

    #[test]
    fn add_noise_stays_in_unit_range(x in image_strategy(6, 6), sigma in 0.0f64..100.0, seed in any::<u64>()) {
        let noise = sample_noise(&NoiseSpec::gaussian(sigma), &x, seed).unwrap();
        let y = add_noise(&x, &noise).unwrap();
        let (lo, hi) = y.min_max();
        prop_assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn patches_stay_inside_the_image(
        rows in 8usize..40,
        cols in 8usize..40,
        side in 1usize..8,
        count in 1usize..20,
        seed in any::<u64>(),
    ) {
        let pixels = Image::from_fn(rows, cols, |r, c| ((r * cols + c) % 97) as f32 / 97.0);
        let img = NormalizedImage::new(pixels.clone(), Provenance::SyntheticClean, "p", 0).unwrap();
        let batch = extract_patches(&img, count, side, seed).unwrap();
        prop_assert_eq!(batch.len(), count);
        for (patch, origin) in batch.patches.iter().zip(&batch.sources) {
            prop_assert!(origin.row + side <= rows && origin.col + side <= cols);
            prop_assert_eq!(patch.shape(), (side, side));
            prop_assert_eq!(patch.get(side - 1, 0), pixels.get(origin.row + side - 1, origin.col));
        }
    }

    #[test]
    fn random_splits_are_disjoint_and_complete(n in 1usize..30, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let patients: Vec<String> = (0..n).map(|i| format!("P{i:02}")).collect();
        let n_test = ((n as f64) * frac) as usize;
        let split = DatasetSplit::random(&patients, n_test, seed).unwrap();
        prop_assert_eq!(split.test_patients.len(), n_test);
        prop_assert_eq!(split.train_patients.len() + split.test_patients.len(), n);
        prop_assert!(split.train_patients.is_disjoint(&split.test_patients));
    }
}

#[test]
fn mask_pixels_are_uncorrelated() {
    let mut rng = stream(99);
    let n = 10_000;
    let pairs = [((0, 0), (0, 1)), ((3, 3), (4, 4)), ((7, 2), (0, 5))];
    let mut sums = [[0.0f64; 5]; 3];
    for _ in 0..n {
        let m = sample_mask_from(0.1, 8, 8, &mut rng);
        for (k, &((r1, c1), (r2, c2))) in pairs.iter().enumerate() {
            let a = m.is_kept(r1, c1) as u8 as f64;
            let b = m.is_kept(r2, c2) as u8 as f64;
            let s = &mut sums[k];
            s[0] += a;
            s[1] += b;
            s[2] += a * b;
            s[3] += a * a;
            s[4] += b * b;
        }
    }
    let n = n as f64;
    for s in sums {
        let cov = s[2] / n - (s[0] / n) * (s[1] / n);
        let va = s[3] / n - (s[0] / n).powi(2);
        let vb = s[4] / n - (s[1] / n).powi(2);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }
}

#[test]
fn combined_noise_is_zero_mean() {
    let reference = Image::filled(256, 256, 0.4);
    for spec in [
        NoiseSpec::gaussian(10.0),
        NoiseSpec { sigma: 5.0, poisson_scale: 0.5, enabled: true },
        NoiseSpec { sigma: 0.0, poisson_scale: 2.0, enabled: true },
    ] {
        let field = sample_noise(&spec, &reference, 5).unwrap();
        let n = field.len() as f64;
        let mean = field.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        // total std on the 0–255 scale: sqrt(sigma² + v/λ)
        let v = 0.4 * 255.0;
        let poisson_var = if spec.poisson_scale > 0.0 { v / spec.poisson_scale } else { 0.0 };
        let total = (spec.sigma.powi(2) + poisson_var).sqrt() / 255.0;
        assert!(mean.abs() < 4.0 * total / n.sqrt(), "mean {mean} for {spec:?}");
    }
}

#[test]
fn synthetic_corruption_has_requested_std() {
    // constant 0.5 is far from both clamps at sigma 25, so clamping is negligible
    let flat = Image::filled(1024, 1024, 0.5);
    let noise = sample_noise(&NoiseSpec::gaussian(25.0), &flat, 17).unwrap();
    let noisy = add_noise(&flat, &noise).unwrap();
    let n = noisy.len() as f64;
    assert!(n >= 1e6);
    let mean = noisy.mean();
    let std = (noisy.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((23.0 / 255.0..=27.0 / 255.0).contains(&std), "std {}", std * 255.0);

    let pairs = make_synthetic_dataset(3, 32, 4, &NoiseSpec::gaussian(25.0)).unwrap();
    for p in &pairs {
        assert_eq!(p.clean.provenance, Provenance::SyntheticClean);
        assert_ne!(p.clean.pixels, p.noisy.pixels);
    }
    let again = make_synthetic_dataset(3, 32, 4, &NoiseSpec::gaussian(25.0)).unwrap();
    assert_eq!(pairs, again);
}

#[test]
fn aggregate_matches_spreadsheet_oracle() {
    let mut per_image = Vec::new();
    let mut map = HashMap::new();
    for p in 0..9 {
        for i in 0..10 {
            let id = format!("p{p}-{i}");
            let x = (p * 10 + i) as f64;
            per_image.push(ImageMetrics {
                image_id: id.clone(),
                psnr_db: 30.0 + 0.1 * x + (i % 3) as f64,
                ssim: 0.8 + 0.001 * x,
                rmse: 10.0 + 0.05 * x * (p % 2) as f64,
            });
            map.insert(id, format!("L{:03}", 100 - p));
        }
    }
    let report = aggregate(per_image.clone(), &map).unwrap();
    assert_eq!(report.per_patient.len(), 9);
    let ids: Vec<&str> = report.per_patient.iter().map(|p| p.patient_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    // oracle: two-pass column means and population std
    let col = |f: &dyn Fn(&ImageMetrics) -> f64, items: &[&ImageMetrics]| {
        let n = items.len() as f64;
        let mut total = 0.0;
        for m in items {
            total += f(m);
        }
        let mean = total / n;
        let mut sq = 0.0;
        for m in items {
            sq += (f(m) - mean) * (f(m) - mean);
        }
        (mean, (sq / n).sqrt())
    };
    for summary in &report.per_patient {
        let items: Vec<&ImageMetrics> = per_image
            .iter()
            .filter(|m| map[&m.image_id] == summary.patient_id)
            .collect();
        let (m, s) = col(&|m| m.psnr_db, &items);
        assert!((summary.summary.psnr_db.mean - m).abs() < 1e-12);
        assert!((summary.summary.psnr_db.std - s).abs() < 1e-12);
        let (m, s) = col(&|m| m.rmse, &items);
        assert!((summary.summary.rmse.mean - m).abs() < 1e-12);
        assert!((summary.summary.rmse.std - s).abs() < 1e-12);
    }
    let all: Vec<&ImageMetrics> = per_image.iter().collect();
    let (m, s) = col(&|m| m.ssim, &all);
    assert!((report.overall.ssim.mean - m).abs() < 1e-12);
    assert!((report.overall.ssim.std - s).abs() < 1e-12);
    assert_eq!(report.overall.count, 90);
}
