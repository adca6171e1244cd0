//! Rate-distortion curves measured from actual bitstreams.

use serde::{Deserialize, Serialize};

use super::metrics::psnr;
use crate::codec::bitstream::{compress_with, decompress_with, EntropyTables};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Points sorted by strictly increasing positive rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.psnr.is_finite() || !p.bpp.is_finite()) {
            return Err(Error::Domain("RD points need finite positive rates and finite PSNR".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::Domain("RD points need distinct rates".into()));
        }
        Ok(Self { label: label.into(), points })
    }

    pub fn rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp).collect()
    }

    pub fn psnrs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.psnr).collect()
    }

    /// Both coordinates rise together along the curve.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].bpp > w[0].bpp && w[1].psnr > w[0].psnr)
    }
}

/// Something that turns an image into a byte count and a reconstruction.
pub trait RdCodec {
    fn round_trip(&self, image: &ImageTensor) -> Result<(usize, ImageTensor)>;
}

/// Uncompressed storage at a fixed bit depth per sample.
pub struct RawStorage {
    pub bit_depth: u32,
}

impl RdCodec for RawStorage {
    fn round_trip(&self, image: &ImageTensor) -> Result<(usize, ImageTensor)> {
        if !(1..=32).contains(&self.bit_depth) {
            return Err(Error::Config(format!("bit depth {} is unsupported", self.bit_depth)));
        }
        let bits = image.data().len() as u64 * u64::from(self.bit_depth);
        let levels = ((1u64 << self.bit_depth) - 1) as f64;
        let rec = image.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels);
        Ok((bits.div_ceil(8) as usize, rec))
    }
}

/// A learned codec producing real `CPIP` streams.
pub struct LearnedCodec<'a> {
    pub codec: &'a Codec,
    pub quality: u8,
    tables: EntropyTables,
}

impl<'a> LearnedCodec<'a> {
    pub fn new(codec: &'a Codec, quality: u8) -> Result<Self> {
        Ok(Self { codec, quality, tables: EntropyTables::new(codec)? })
    }
}

impl RdCodec for LearnedCodec<'_> {
    fn round_trip(&self, image: &ImageTensor) -> Result<(usize, ImageTensor)> {
        let c = compress_with(self.codec, &self.tables, image, self.quality)?;
        let (rec, _, _) = decompress_with(self.codec, &self.tables, &c.bytes)?;
        Ok((c.bytes.len(), rec))
    }
}

/// Mean bpp (from stream lengths) and mean PSNR of each codec over a named image set.
pub fn collect_rd_curve(
    label: &str,
    codecs: &[&dyn RdCodec],
    images: &[(String, ImageTensor)],
) -> Result<RdCurve> {
    if images.is_empty() || codecs.is_empty() {
        return Err(Error::Precondition("need at least one codec and one image".into()));
    }
    let mut points = Vec::with_capacity(codecs.len());
    for codec in codecs {
        let (mut bpp, mut q) = (0.0, 0.0);
        for (name, img) in images {
            let (bytes, rec) = codec
                .round_trip(img)
                .map_err(|e| Error::Partial { item: name.clone(), source: Box::new(e) })?;
            bpp += 8.0 * bytes as f64 / (img.height() * img.width()) as f64;
            q += psnr(img, &rec, 1.0)?;
        }
        let n = images.len() as f64;
        points.push(RdPoint { bpp: bpp / n, psnr: q / n });
    }
    RdCurve::new(label, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_storage_bookkeeping() {
        let img = ImageTensor::from_fn(1, 6, 10, |_, y, x| ((y * 10 + x) % 9) as f64 / 8.0);
        let stubs: Vec<RawStorage> = [8, 16, 24, 32].iter().map(|&b| RawStorage { bit_depth: b }).collect();
        let refs: Vec<&dyn RdCodec> = stubs.iter().map(|s| s as &dyn RdCodec).collect();
        let curve = collect_rd_curve("raw", &refs, &[("a".into(), img)]).unwrap();
        assert_eq!(curve.rates(), vec![8.0, 16.0, 24.0, 32.0]);
    }

    #[test]
    fn single_image_average_is_the_point() {
        let img = ImageTensor::from_fn(1, 4, 4, |_, y, x| (y + x) as f64 / 6.0);
        let (bytes, rec) = RawStorage { bit_depth: 4 }.round_trip(&img).unwrap();
        let c = collect_rd_curve("x", &[&RawStorage { bit_depth: 4 }], &[("a".into(), img.clone())]).unwrap();
        assert_eq!(c.points[0].bpp, 8.0 * bytes as f64 / 16.0);
        assert_eq!(c.points[0].psnr, psnr(&img, &rec, 1.0).unwrap());
    }

    struct Failing;
    impl RdCodec for Failing {
        fn round_trip(&self, _: &ImageTensor) -> Result<(usize, ImageTensor)> {
            Err(Error::Domain("boom".into()))
        }
    }

    #[test]
    fn failure_names_image() {
        let err = collect_rd_curve("f", &[&Failing], &[("kodim01".into(), ImageTensor::zeros(1, 2, 2))]).unwrap_err();
        assert!(matches!(err, Error::Partial { ref item, .. } if item == "kodim01"));
    }

    #[test]
    fn curve_validation() {
        assert!(RdCurve::new("a", vec![RdPoint { bpp: 0.0, psnr: 30.0 }]).is_err());
        let dup = vec![RdPoint { bpp: 1.0, psnr: 30.0 }, RdPoint { bpp: 1.0, psnr: 31.0 }];
        assert!(RdCurve::new("a", dup).is_err());
    }
}
