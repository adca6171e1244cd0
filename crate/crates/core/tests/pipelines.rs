use std::fs;
use std::path::Path;

use npyz::WriterBuilder;
use percsim_core::apps::SrGenerator;
use percsim_core::io::{load_manifest, ManifestKind};
use percsim_core::metric::{calibrate, cpips_distance, CalibrationConfig, MetricWeights, PixelTaps};
use percsim_core::quality::{synthetic_triplets, two_afc_score, Observer, TwoAfcTriplet};
use percsim_core::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pixel_score(triplets: &[TwoAfcTriplet], taps: &PixelTaps, w: &MetricWeights) -> f64 {
    two_afc_score(triplets, |x, y| Ok(cpips_distance(x, y, taps, w)?.total)).unwrap()
}

#[test]
fn calibrated_pixel_taps_learn_an_mse_observer() {
    let taps = PixelTaps::anchored(3);
    let train = synthetic_triplets(200, 16, Observer::Mse, 30).unwrap();
    let held_out = synthetic_triplets(200, 16, Observer::Mse, 31).unwrap();
    let cfg = CalibrationConfig { steps: 400, lr: 1e-2, hidden: 16, seed: 2 };
    let cal = calibrate(&taps, &train, &cfg).unwrap();
    let before = pixel_score(&held_out, &taps, &MetricWeights::ones(&taps));
    let after = pixel_score(&held_out, &taps, &cal.weights);
    assert!(cal.losses.last().unwrap() < cal.losses.first().unwrap());
    assert!(after > 90.0, "held-out 2AFC {after:.1}% after calibration ({before:.1}% before)");
}

fn write_npy_scalar(path: &Path, v: f64) {
    let mut file = fs::File::create(path).unwrap();
    let mut w = npyz::WriteOptions::<f64>::new().default_dtype().shape(&[]).writer(&mut file).begin_nd().unwrap();
    w.push(&v).unwrap();
    w.finish().unwrap();
}

#[test]
fn native_layout_matches_csv_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for sub in ["ref", "p0", "p1", "judge"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    let triplets = synthetic_triplets(3, 16, Observer::Ssim, 9).unwrap();
    let judgments = [0.25, 1.0, 0.0];
    let mut csv = String::from("reference,p0,p1,h\n");
    for (i, (t, h)) in triplets.iter().zip(judgments).enumerate() {
        let name = format!("s{i}.png");
        t.reference.save_png(root.join("ref").join(&name)).unwrap();
        t.p0.save_png(root.join("p0").join(&name)).unwrap();
        t.p1.save_png(root.join("p1").join(&name)).unwrap();
        if i == 2 {
            fs::write(root.join("judge").join(format!("s{i}.txt")), format!("{h}\n")).unwrap();
        } else {
            write_npy_scalar(&root.join("judge").join(format!("s{i}.npy")), h);
        }
        csv.push_str(&format!("ref/{name},p0/{name},p1/{name},{h}\n"));
    }
    fs::write(root.join("manifest.csv"), csv).unwrap();

    let native = load_manifest(root, ManifestKind::TwoafcNative).unwrap().into_triplets().unwrap();
    let listed = load_manifest(root.join("manifest.csv"), ManifestKind::TwoafcCsv).unwrap().into_triplets().unwrap();
    assert_eq!(native.len(), 3);
    for (a, b) in native.iter().zip(&listed) {
        assert_eq!(a.h, b.h);
        let (a, b) = (a.load().unwrap(), b.load().unwrap());
        assert_eq!(a.reference.data(), b.reference.data());
        assert_eq!(a.p0.data(), b.p0.data());
        assert_eq!(a.p1.data(), b.p1.data());
    }
    assert_eq!(native.iter().map(|r| r.h).collect::<Vec<_>>(), judgments);
}

#[test]
fn super_resolution_tiles_agree_in_the_interior() {
    let generator = SrGenerator::init(8, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lr = ImageTensor::from_fn(3, 40, 40, |_, _, _| rng.gen());
    let whole = generator.upscale(&lr).unwrap();
    let (top, left, size, margin) = (8, 12, 24, 8);
    let tile = generator.upscale(&lr.crop_at(top, left, size, size).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for c in 0..3 {
        for y in 4 * margin..4 * (size - margin) {
            for x in 4 * margin..4 * (size - margin) {
                worst = worst.max((tile.get(c, y, x) - whole.get(c, 4 * top + y, 4 * left + x)).abs());
            }
        }
    }
    assert!(worst <= 1e-5, "interior mismatch {worst:e}");
}
