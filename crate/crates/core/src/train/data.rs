//! Labelled image sets held in memory.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        let ds = match cfg {
            DatasetConfig::Synthetic { images, size, classes, seed } => synthetic(*images, *size, *classes, *seed),
            DatasetConfig::ImageDir { path, size } => load_dir(path, *size)?,
        };
        if ds.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if ds.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(ds)
    }

    /// Deterministic stratified split: within each class, the `j`-th of `n`
    /// images goes to validation when `(j * k) % n < k`, `k` being the class's
    /// rounded validation share.
    pub fn split(&self, validation_fraction: f64) -> (Dataset, Dataset) {
        let mut train = Dataset { num_classes: self.num_classes, ..Default::default() };
        let mut val = train.clone();
        let classes = self.num_classes.max(1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in self.labels.iter().enumerate() {
            members[l.min(classes - 1)].push(i);
        }
        let mut to_val = vec![false; self.len()];
        for idx in &members {
            let n = idx.len();
            let k = (n as f64 * validation_fraction).round() as usize;
            for (j, &i) in idx.iter().enumerate() {
                to_val[i] = k > 0 && (j * k) % n < k;
            }
        }
        for i in 0..self.len() {
            let target = if to_val[i] { &mut val } else { &mut train };
            target.images.push(self.images[i].clone());
            target.labels.push(self.labels[i]);
        }
        (train, val)
    }

    /// Shuffled index batches for one epoch.
    pub fn batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// In-order index batches.
    pub fn sequential(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// `count` images of `size x size`, cycling through `classes` labels.
pub fn synthetic(count: usize, size: usize, classes: usize, seed: u64) -> Dataset {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
        images.push(synthetic_image(label, size, &mut rng));
        labels.push(label);
    }
    Dataset { images, labels, num_classes: classes }
}

/// One procedurally drawn image for `label` (classes repeat modulo 10).
pub fn synthetic_image(label: usize, size: usize, rng: &mut impl Rng) -> ImageTensor {
    let bg: [f64; 3] = [rng.gen_range(0.0..0.45), rng.gen_range(0.0..0.45), rng.gen_range(0.0..0.45)];
    let fg: [f64; 3] = [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)];
    let s = size as f64;
    let cx = s * rng.gen_range(0.35..0.65);
    let cy = s * rng.gen_range(0.35..0.65);
    let r = s * rng.gen_range(0.2..0.32);
    let period = rng.gen_range(10.0..16.0);
    let phase = rng.gen_range(0.0..period);
    let noise = 0.03;
    let mut img = ImageTensor::zeros(3, size, size);
    // soft edges keep the patterns within reach of an 8x-downsampling toy codec
    let edge = |signed: f64| 1.0 / (1.0 + (-signed / 0.75).exp());
    let wave = |t: f64| ((t + phase) / period * 2.0 * PI).sin();
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let stripe = |t: f64| 0.5 + 0.5 * wave(t);
            let t = match label % 10 {
                0 => edge(r - d),
                1 => edge(r - dx.abs().max(dy.abs())),
                2 => stripe(fy),
                3 => stripe(fx),
                4 => stripe((fx + fy) / 2f64.sqrt()),
                5 => 0.5 + 0.5 * wave(fx) * wave(fy),
                6 => edge(r * 0.3 - (d - r).abs()),
                7 => edge(r * 0.3 - dx.abs().min(dy.abs())),
                8 => fx / s,
                _ => stripe((fx - fy) / 2f64.sqrt()),
            };
            for c in 0..3 {
                let v = bg[c] + (fg[c] - bg[c]) * t + rng.gen_range(-noise..noise);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn load_dir(root: &Path, size: usize) -> Result<Dataset> {
    let mut classes: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    let mut ds = Dataset { num_classes: classes.len(), ..Default::default() };
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = ImageTensor::load_png(&f)?.to_rgb();
            if img.height() < size || img.width() < size {
                return Err(Error::Config(format!("{} is smaller than {size}x{size}", f.display())));
            }
            let top = (img.height() - size) / 2;
            let left = (img.width() - size) / 2;
            ds.images.push(img.crop_at(top, left, size, size)?);
            ds.labels.push(label);
        }
    }
    Ok(ds)
}
