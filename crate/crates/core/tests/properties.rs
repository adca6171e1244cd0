use percsim_autograd::Tensor;
use percsim_core::apps::gram_matrix;
use percsim_core::codec::{compress, decompress, Codec, EncoderSpec};
use percsim_core::io::{Cell, ResultsTable, TableFormat};
use percsim_core::metric::{cpips_distance, MetricWeights, PixelTaps};
use percsim_core::quality::{bd_delta, psnr, score_distances, BdMode, RdCurve, RdPoint};
use percsim_core::{Checkpoint, ImageTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.gen())
}

fn toy_codec(seed: u64) -> Codec {
    Codec::init(EncoderSpec::toy(), seed).unwrap()
}

fn judgments() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    proptest::collection::vec((0.0..10.0f64, 0.0..10.0f64, 0.0..=1.0f64), 1..60)
}

fn curve(label: &str, base: f64, slope: f64, gain: f64) -> RdCurve {
    let points = [0.1, 0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|&r| RdPoint { bpp: r, psnr: base + slope * (r / 0.1f64).ln() + gain })
        .collect();
    RdCurve::new(label, points).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_afc_score_is_a_percentage_and_rank_invariant(j in judgments(), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        let s = score_distances(&j).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        let transformed: Vec<_> = j.iter().map(|&(d0, d1, h)| (a * d0.powi(3) + b, a * d1.powi(3) + b, h)).collect();
        prop_assert_eq!(score_distances(&transformed).unwrap(), s);
        let logged: Vec<_> = j.iter().map(|&(d0, d1, h)| ((1.0 + d0).ln(), (1.0 + d1).ln(), h)).collect();
        prop_assert_eq!(score_distances(&logged).unwrap(), s);
    }

    #[test]
    fn bd_deltas_are_antisymmetric(base in 25.0..35.0f64, s1 in 1.0..4.0f64, s2 in 1.0..4.0f64, gain in -1.0..1.0f64) {
        let a = curve("a", base, s1, 0.0);
        let b = curve("b", base, s2, gain);
        let p_ab = bd_delta(&a, &b, BdMode::Psnr).unwrap();
        let p_ba = bd_delta(&b, &a, BdMode::Psnr).unwrap();
        prop_assert!((p_ab + p_ba).abs() < 1e-9);
        let r_ab = bd_delta(&a, &b, BdMode::Rate).unwrap();
        let r_ba = bd_delta(&b, &a, BdMode::Rate).unwrap();
        prop_assert!(((1.0 + r_ab / 100.0) * (1.0 + r_ba / 100.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gram_ignores_spatial_order(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::randn(&[c, h, w], &mut rng);
        let sites = h * w;
        let mut order: Vec<usize> = (0..sites).collect();
        for i in (1..sites).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = Tensor::from_fn(&[c, h, w], |i| f.data()[(i / sites) * sites + order[i % sites]]);
        let (g0, g1) = (gram_matrix(&f).unwrap(), gram_matrix(&permuted).unwrap());
        prop_assert_eq!(g0.shape(), g1.shape());
        for (x, y) in g0.data().iter().zip(g1.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn pixel_distance_is_symmetric_and_scales_quadratically(seed in any::<u64>(), alpha in 0.1..10.0f64) {
        let taps = PixelTaps::new(3);
        let (x, y) = (image(seed, 3, 8, 8), image(seed ^ 1, 3, 8, 8));
        let w = MetricWeights::ones(&taps);
        let d = cpips_distance(&x, &y, &taps, &w).unwrap();
        prop_assert_eq!(d.total, cpips_distance(&y, &x, &taps, &w).unwrap().total);
        let scaled = cpips_distance(&x, &y, &taps, &w.scaled(alpha)).unwrap().total;
        prop_assert!((scaled - alpha * alpha * d.total).abs() <= 1e-9 * scaled.abs().max(1e-12));
        let parts: f64 = d.layers.iter().map(|(_, v)| v).sum();
        prop_assert!((parts - d.total).abs() <= 1e-9);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let x = ImageTensor::filled(1, 16, 16, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..x.pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .map(|s| {
                let mut y = x.clone();
                for (v, n) in y.data_mut().iter_mut().zip(&noise) {
                    *v += s * n;
                }
                psnr(&x, &y, 1.0).unwrap()
            })
            .collect();
        prop_assert!(values.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn tables_survive_every_format(
        rows in proptest::collection::vec(("[A-Za-z][A-Za-z0-9 ]{0,8}[A-Za-z0-9]", proptest::collection::vec(proptest::option::of(-1e6..1e6f64), 3)), 1..6),
    ) {
        let mut table = ResultsTable::new("scores", vec!["a".into(), "b".into(), "c".into()]);
        for (label, cells) in &rows {
            table.push_row(label.clone(), cells.iter().map(|c| c.map(Cell::number).unwrap_or_else(Cell::missing)).collect()).unwrap();
        }
        table.mark_best();
        for format in [TableFormat::Json, TableFormat::Csv, TableFormat::Text] {
            let back = ResultsTable::parse(&table.emit(format).unwrap(), format).unwrap();
            prop_assert_eq!(&back, &table);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn compression_is_deterministic_and_lossless(seed in any::<u64>(), h in 8usize..40, w in 8usize..40, q in 1u8..=8) {
        let codec = toy_codec(seed % 4);
        let x = image(seed, 3, h, w);
        let a = compress(&codec, &x, q).unwrap();
        let b = compress(&codec, &x, q).unwrap();
        prop_assert_eq!(&a.bytes, &b.bytes);
        let (rec, code, header) = decompress(&codec, &a.bytes).unwrap();
        prop_assert_eq!(code, a.code);
        prop_assert_eq!((header.width as usize, header.height as usize, header.quality), (w, h, q));
        prop_assert_eq!(rec.data(), a.reconstruction.data());
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let codec = toy_codec(3);
    let bytes = codec.to_checkpoint(serde_json::json!({ "quality": 5 })).to_bytes().unwrap();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);
}
