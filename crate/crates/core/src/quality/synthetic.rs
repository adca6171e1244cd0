//! Synthetic distortions and rule-based observers for 2AFC suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::ssim;
use super::twoafc::TwoAfcTriplet;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::train::synthetic_image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    /// Additive Gaussian noise with this standard deviation.
    Noise { sigma: f64 },
    /// Box blur of this radius.
    Blur { radius: usize },
    /// Uniform quantization to this many levels.
    Quantize { levels: u32 },
    /// Circular shift by this many pixels along both axes.
    Shift { pixels: usize },
    /// Contrast scaling about mid-gray.
    Contrast { factor: f64 },
}

impl Distortion {
    /// A random distortion of random strength.
    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.gen_range(0..5) {
            0 => Distortion::Noise { sigma: rng.gen_range(0.01..0.2) },
            1 => Distortion::Blur { radius: rng.gen_range(1..=3) },
            2 => Distortion::Quantize { levels: rng.gen_range(3..=16) },
            3 => Distortion::Shift { pixels: rng.gen_range(1..=2) },
            _ => Distortion::Contrast { factor: rng.gen_range(0.4..0.9) },
        }
    }

    pub fn apply(&self, img: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
        let (c, h, w) = img.dims();
        match *self {
            Distortion::Noise { sigma } => {
                let n = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
                ImageTensor::from_fn(c, h, w, |ch, y, x| img.get(ch, y, x) + n.sample(rng)).clamp01()
            }
            Distortion::Blur { radius } => {
                let r = radius as isize;
                ImageTensor::from_fn(c, h, w, |ch, y, x| {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                sum += img.get(ch, yy as usize, xx as usize);
                                count += 1.0;
                            }
                        }
                    }
                    sum / count
                })
            }
            Distortion::Quantize { levels } => {
                let l = f64::from(levels.max(2) - 1);
                img.map(|v| (v * l).round() / l)
            }
            Distortion::Shift { pixels } => {
                ImageTensor::from_fn(c, h, w, |ch, y, x| img.get(ch, (y + pixels) % h, (x + pixels) % w))
            }
            Distortion::Contrast { factor } => img.map(|v| (0.5 + factor * (v - 0.5)).clamp(0.0, 1.0)),
        }
    }
}

/// A rule standing in for human observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observer {
    /// Prefers the distortion with lower pixel MSE.
    Mse,
    /// Prefers the distortion with higher SSIM.
    Ssim,
}

impl Observer {
    /// Fraction preferring `p1`: 1, 0, or 0.5 on a tie.
    pub fn judge(&self, reference: &ImageTensor, p0: &ImageTensor, p1: &ImageTensor) -> Result<f64> {
        let (s0, s1) = match self {
            Observer::Mse => (-reference.mse(p0)?, -reference.mse(p1)?),
            Observer::Ssim => (ssim(reference, p0)?, ssim(reference, p1)?),
        };
        Ok(if s1 > s0 {
            1.0
        } else if s0 > s1 {
            0.0
        } else {
            0.5
        })
    }
}

/// `count` triplets over synthetic pattern images of side `size`, each pair
/// of distortions drawn independently.
pub fn synthetic_triplets(count: usize, size: usize, observer: Observer, seed: u64) -> Result<Vec<TwoAfcTriplet>> {
    if size < 11 {
        return Err(Error::Config(format!("synthetic triplets need images of at least 11 pixels, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let reference = synthetic_image(i % 10, size, &mut rng);
            let p0 = Distortion::random(&mut rng).apply(&reference, &mut rng);
            let p1 = Distortion::random(&mut rng).apply(&reference, &mut rng);
            let h = observer.judge(&reference, &p0, &p1)?;
            TwoAfcTriplet::new(reference, p0, p1, h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distortions_keep_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = synthetic_image(3, 16, &mut rng);
        for _ in 0..50 {
            let d = Distortion::random(&mut rng);
            let out = d.apply(&img, &mut rng);
            assert_eq!(out.dims(), img.dims());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{d:?}");
        }
        assert_eq!(Distortion::Quantize { levels: 256 }.apply(&img.map(|v| (v * 255.0).round() / 255.0), &mut rng).data().len(), 768);
    }

    #[test]
    fn observers_follow_their_rule() {
        let t = synthetic_triplets(40, 16, Observer::Mse, 1).unwrap();
        for x in &t {
            let (m0, m1) = (x.reference.mse(&x.p0).unwrap(), x.reference.mse(&x.p1).unwrap());
            assert_eq!(x.h, if m1 < m0 { 1.0 } else if m0 < m1 { 0.0 } else { 0.5 });
        }
        assert_eq!(synthetic_triplets(5, 16, Observer::Ssim, 2).unwrap(), synthetic_triplets(5, 16, Observer::Ssim, 2).unwrap());
    }
}
