//! Floating-point images in channel-major layout, PNG I/O and resampling.

use std::path::Path;

use percsim_autograd::Tensor;

use crate::error::{Error, Result};

/// A `C x H x W` image with `C` in {1, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Reflect padding applied before analysis; cropped away after synthesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!("images need 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "images need 1 or 3 channels");
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Build from `f(channel, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(channels == 1 || channels == 3, "images need 1 or 3 channels");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_dims(&self, other: &ImageTensor) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn clamp01(&self) -> ImageTensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Stack equally sized images into an `[N, C, H, W]` batch.
    pub fn stack(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            first.ensure_same_dims(im)?;
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(&[images.len(), first.channels, first.height, first.width], data))
    }

    /// Image `index` of an `[N, C, H, W]` batch.
    pub fn from_batch(t: &Tensor, index: usize) -> Result<ImageTensor> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::Dimension(format!("cannot take image {index} from {s:?}")));
        }
        let n = s[1] * s[2] * s[3];
        ImageTensor::new(s[1], s[2], s[3], t.data()[index * n..(index + 1) * n].to_vec())
    }

    /// Rec. 601 luma for RGB; identity for grayscale.
    pub fn luminance(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let plane = self.pixels();
        let data = (0..plane)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[plane + i] + 0.114 * self.data[2 * plane + i])
            .collect();
        Self { channels: 1, height: self.height, width: self.width, data }
    }

    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Self { channels: 3, height: self.height, width: self.width, data }
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Reflect-pad bottom and right edges up to multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> (ImageTensor, Padding) {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        let padding = Padding { height: self.height, width: self.width, padded_height: ph, padded_width: pw };
        if ph == self.height && pw == self.width {
            return (self.clone(), padding);
        }
        let out = ImageTensor::from_fn(self.channels, ph, pw, |c, y, x| {
            self.get(c, reflect_index(y, self.height), reflect_index(x, self.width))
        });
        (out, padding)
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Result<ImageTensor> {
        self.crop_at(0, 0, height, width)
    }

    pub fn crop_at(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(self.channels, height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Replicate each pixel into a `factor x factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> ImageTensor {
        ImageTensor::from_fn(self.channels, self.height * factor, self.width * factor, |c, y, x| {
            self.get(c, y / factor, x / factor)
        })
    }

    /// Antialiased bicubic downsampling by an integer factor (Keys kernel,
    /// a = -0.5, support stretched by the factor). Output is clamped to [0, 1].
    pub fn downsample_bicubic(&self, factor: usize) -> Result<ImageTensor> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let rows = resample_weights(self.height, oh, factor);
        let cols = resample_weights(self.width, ow, factor);
        let mut tmp = vec![0.0; self.channels * self.height * ow];
        for c in 0..self.channels {
            for y in 0..self.height {
                for (ox, taps) in cols.iter().enumerate() {
                    tmp[(c * self.height + y) * ow + ox] = taps.iter().map(|&(ix, w)| w * self.get(c, y, ix)).sum();
                }
            }
        }
        Ok(ImageTensor::from_fn(self.channels, oh, ow, |c, oy, ox| {
            rows[oy]
                .iter()
                .map(|&(iy, w)| w * tmp[(c * self.height + iy) * ow + ox])
                .sum::<f64>()
                .clamp(0.0, 1.0)
        }))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (channels, raw) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let data = (0..channels * plane)
            .map(|i| {
                let (c, p) = (i / plane, i % plane);
                f64::from(raw[p * channels + c]) / 255.0
            })
            .collect();
        ImageTensor::new(channels, h, w, data)
    }

    /// Quantize to 8 bits and write as PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let plane = self.pixels();
        let mut raw = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                raw[p * self.channels + c] = (self.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 1 {
            image::GrayImage::from_raw(w, h, raw).map(|im| im.save(path))
        } else {
            image::RgbImage::from_raw(w, h, raw).map(|im| im.save(path))
        };
        match result {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image(format!("{}: {e}", path.display()))),
            None => Err(Error::Image("buffer size mismatch".into())),
        }
    }
}

/// Mirror an out-of-range index back into `[0, n)` (edge sample not repeated).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per output sample: (input index, weight) pairs, normalized, edge-clamped.
fn resample_weights(in_len: usize, out_len: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = factor as f64;
    let support = 2.0 * scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|i| {
                    let w = cubic((i as f64 + 0.5 - center) / scale);
                    (i.clamp(0, in_len as isize - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}
