//! Pixel-domain reference metrics.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor, peak: f64) -> Result<f64> {
    let mse = x.mse(x_hat)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on luminance, 11x11 Gaussian window
/// (sigma 1.5), data range 1, valid window positions only.
pub fn ssim(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    x.ensure_same_dims(x_hat)?;
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            x.height(),
            x.width()
        )));
    }
    let (a, b) = (x.luminance(), x_hat.luminance());
    let (h, w) = (x.height(), x.width());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(a.data(), h, w, &k);
    let mu_b = filter_valid(b.data(), h, w, &k);
    let aa = filter_valid(&prod(a.data(), a.data()), h, w, &k);
    let bb = filter_valid(&prod(b.data(), b.data()), h, w, &k);
    let ab = filter_valid(&prod(a.data(), b.data()), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture() -> ImageTensor {
        ImageTensor::from_fn(1, 32, 32, |_, y, x| 0.5 + 0.4 * ((x as f64 * 0.9).sin() * (y as f64 * 0.7).cos()))
    }

    #[test]
    fn psnr_cases() {
        let x = texture();
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
        let a = ImageTensor::filled(3, 4, 4, 0.0);
        let b = ImageTensor::filled(3, 4, 4, 0.5);
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ImageTensor::from_fn(3, 9, 7, |_, _, _| rng.gen());
        let q = ImageTensor::from_fn(3, 9, 7, |_, _, _| rng.gen());
        let mse: f64 = p.data().iter().zip(q.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / 189.0;
        assert!((psnr(&p, &q, 1.0).unwrap() - (-10.0 * mse.log10())).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let x = texture();
        let mut last = f64::INFINITY;
        for sd in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let noisy = ImageTensor::from_fn(1, 32, 32, |_, y, xx| x.get(0, y, xx) + sd * (rng.gen::<f64>() - 0.5) * 12f64.sqrt());
            let p = psnr(&x, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_cases() {
        let x = texture();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() < 0.5);
        let (m1, m2) = (0.3, 0.55);
        let c1 = 1e-4;
        let expect = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let got = ssim(&ImageTensor::filled(1, 16, 16, m1), &ImageTensor::filled(1, 16, 16, m2)).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!(ssim(&ImageTensor::filled(1, 8, 8, 0.0), &ImageTensor::filled(1, 8, 8, 0.0)).is_err());
    }
}
