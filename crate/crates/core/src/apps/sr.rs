//! 4x super-resolution trained against the encoder's features.

use percsim_autograd::{clip_grad_norm, Adam, Graph, ParamBinding, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metric::FeatureExtractor;
use crate::quality::{psnr, ssim};

pub const SCALE: usize = 4;
const LEAK: f64 = 0.2;
const GRAD_CLIP: f64 = 1.0;

/// Mean squared difference of `[B, C, H, W]` activations at `tap`.
pub fn sr_perceptual_var<'g>(
    g: &'g Graph,
    extractor: &dyn FeatureExtractor,
    sr: Var<'g>,
    hr: Var<'g>,
    tap: &str,
) -> Result<Var<'g>> {
    let names = [tap.to_string()];
    let a = extractor.tap_vars(g, sr, &names)?[0];
    let b = extractor.tap_vars(g, hr, &names)?[0];
    Ok((a - b).square().mean())
}

/// Mean squared difference of raw (unweighted, unnormalized) tap activations.
pub fn sr_perceptual_loss(sr: &ImageTensor, hr: &ImageTensor, extractor: &dyn FeatureExtractor, tap: &str) -> Result<f64> {
    sr.ensure_same_dims(hr)?;
    extractor.check_input(sr)?;
    let g = Graph::inference();
    Ok(sr_perceptual_var(&g, extractor, g.constant(sr.to_tensor()), g.constant(hr.to_tensor()), tap)?.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    pub scale: usize,
    pub perceptual_tap: String,
    pub adversarial_weight: f64,
    pub generator_width: usize,
    pub generator_blocks: usize,
    pub discriminator_width: usize,
    pub epochs: usize,
    /// Leading epochs trained on pixel MSE alone.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Side of the square high-resolution training crops.
    pub patch: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            scale: SCALE,
            perceptual_tap: crate::codec::spec::BOTTLENECK_TAP.into(),
            adversarial_weight: 1e-3,
            generator_width: 16,
            generator_blocks: 2,
            discriminator_width: 8,
            epochs: 10,
            warmup_epochs: 0,
            lr: 1e-3,
            batch: 4,
            patch: 32,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SrConfig {
    pub fn validate(&self, extractor: &dyn FeatureExtractor) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scale != SCALE {
            return fail(format!("scale must be {SCALE}, got {}", self.scale));
        }
        if !(self.adversarial_weight >= 0.0) {
            return fail("adversarial weight must be nonnegative".into());
        }
        if !extractor.tap_names().contains(&self.perceptual_tap) {
            return fail(format!("`{}` is not a tap of this encoder", self.perceptual_tap));
        }
        if self.generator_width == 0 || self.discriminator_width == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return fail("widths, batch and learning rate must be positive".into());
        }
        if self.patch % SCALE != 0 || self.patch < extractor.min_input().max(SCALE) {
            return fail(format!("patch {} must be a multiple of {SCALE} and at least the encoder's input", self.patch));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

fn conv_init(params: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize, gain: f64, rng: &mut impl Rng) {
    let bound = gain * (6.0 / (ci * k * k) as f64).sqrt();
    params.insert(format!("{name}.weight"), Tensor::uniform(&[co, ci, k, k], -bound, bound, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
}

fn conv<'g>(p: &ParamBinding<'g, '_>, x: Var<'g>, name: &str, stride: usize) -> Var<'g> {
    let w = p.get(&format!("{name}.weight"));
    let pad = w.shape()[2] / 2;
    x.conv2d(w, Some(p.get(&format!("{name}.bias"))), stride, pad)
}

/// Nearest-neighbor 4x upsampling as a fixed 1x1 conv plus pixel shuffle.
fn nearest_up<'g>(g: &'g Graph, x: Var<'g>) -> Var<'g> {
    let c = x.shape()[1];
    let rr = SCALE * SCALE;
    let w = Tensor::from_fn(&[c * rr, c, 1, 1], |i| if (i / c) / rr == i % c { 1.0 } else { 0.0 });
    x.conv2d(g.constant(w), None, 1, 0).pixel_shuffle(SCALE)
}

/// Residual blocks, two 2x pixel-shuffle stages and a nearest-neighbor skip.
#[derive(Clone, Debug)]
pub struct SrGenerator {
    pub params: ParamStore,
    pub width: usize,
    pub blocks: usize,
}

impl SrGenerator {
    pub fn init(width: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        conv_init(&mut params, "gen.head", width, 3, 3, 1.0, &mut rng);
        for b in 0..blocks {
            conv_init(&mut params, &format!("gen.res{b}.conv1"), width, width, 3, 1.0, &mut rng);
            conv_init(&mut params, &format!("gen.res{b}.conv2"), width, width, 3, 0.1, &mut rng);
        }
        conv_init(&mut params, "gen.up1", 4 * width, width, 3, 1.0, &mut rng);
        conv_init(&mut params, "gen.up2", 4 * width, width, 3, 1.0, &mut rng);
        conv_init(&mut params, "gen.tail", 3, width, 3, 0.1, &mut rng);
        Self { params, width, blocks }
    }

    /// `[B, 3, H, W]` to `[B, 3, 4H, 4W]`, unclamped.
    pub fn forward<'g>(&self, p: &ParamBinding<'g, '_>, lr: Var<'g>) -> Var<'g> {
        let mut h = conv(p, lr, "gen.head", 1).relu();
        for b in 0..self.blocks {
            let r = conv(p, h, &format!("gen.res{b}.conv1"), 1).relu();
            h = h + conv(p, r, &format!("gen.res{b}.conv2"), 1);
        }
        let h = conv(p, h, "gen.up1", 1).pixel_shuffle(2).relu();
        let h = conv(p, h, "gen.up2", 1).pixel_shuffle(2).relu();
        nearest_up(p.graph(), lr) + conv(p, h, "gen.tail", 1)
    }

    pub fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        if lr.channels() != 3 {
            return Err(Error::Dimension(format!("generator expects RGB, got {} channels", lr.channels())));
        }
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let out = self.forward(&p, g.constant(lr.to_tensor())).value();
        Ok(ImageTensor::from_batch(&out, 0)?.clamp01())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = json!({ "kind": "sr_generator", "scale": SCALE, "width": self.width, "blocks": self.blocks, "train": extra });
        Checkpoint::new(self.params.clone(), meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.metadata;
        if m["kind"] != "sr_generator" {
            return Err(Error::Config("checkpoint does not hold a super-resolution generator".into()));
        }
        let field = |k: &str| {
            m[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Config(format!("generator metadata lacks `{k}`")))
        };
        let (width, blocks) = (field("width")?, field("blocks")?);
        let expect = Self::init(width, blocks, 0);
        for (name, t) in expect.params.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Config(format!("generator parameter `{name}` is missing or misshapen"))),
            }
        }
        Ok(Self { params: ck.params.clone(), width, blocks })
    }
}

/// Four stride-2 conv blocks with leaky ReLU, global pooling and a linear logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut ci = 3;
        for k in 0..4 {
            let co = width << k;
            conv_init(&mut params, &format!("disc.b{k}"), co, ci, 3, 1.0, &mut rng);
            ci = co;
        }
        let b = 1.0 / (ci as f64).sqrt();
        params.insert("disc.fc.weight", Tensor::uniform(&[ci, 1], -b, b, &mut rng));
        params.insert("disc.fc.bias", Tensor::zeros(&[1, 1]));
        Self { params }
    }

    /// `[B, 1]` logits that the input is a real high-resolution image.
    pub fn logits<'g>(p: &ParamBinding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for k in 0..4 {
            h = conv(p, h, &format!("disc.b{k}"), 2).leaky_relu(LEAK);
        }
        let s = h.shape();
        let pooled = h.mean_axes_keepdim(&[2, 3]).reshape(&[s[0], s[1]]);
        pooled.matmul(p.get("disc.fc.weight")) + p.get("disc.fc.bias")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub pixel: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SrOutcome {
    pub generator: SrGenerator,
    pub log: Vec<SrEpoch>,
    /// Perceptual loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Held-out PSNR of nearest-neighbor upsampling.
    pub baseline_psnr: Option<f64>,
}

/// Held-out quality of the generator and of nearest-neighbor upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrEvaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

fn crop4(img: &ImageTensor) -> Result<ImageTensor> {
    img.crop(img.height() / SCALE * SCALE, img.width() / SCALE * SCALE)
}

pub fn evaluate_sr(generator: &SrGenerator, images: &[ImageTensor]) -> Result<SrEvaluation> {
    if images.is_empty() {
        return Err(Error::Precondition("no held-out images".into()));
    }
    let mut acc = [0.0; 4];
    for img in images {
        let hr = crop4(img)?;
        let lr = hr.downsample_bicubic(SCALE)?;
        let sr = generator.upscale(&lr)?;
        let nn = lr.upsample_nearest(SCALE);
        acc[0] += psnr(&hr, &sr, 1.0)?;
        acc[1] += ssim(&hr, &sr)?;
        acc[2] += psnr(&hr, &nn, 1.0)?;
        acc[3] += ssim(&hr, &nn)?;
    }
    let n = images.len() as f64;
    Ok(SrEvaluation { psnr: acc[0] / n, ssim: acc[1] / n, baseline_psnr: acc[2] / n, baseline_ssim: acc[3] / n })
}

/// Deterministic split: index `i` is held out when `(i * n_val) % n < n_val`.
pub fn split_holdout(images: &[ImageTensor], fraction: f64) -> (Vec<ImageTensor>, Vec<ImageTensor>) {
    let n = images.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, img) in images.iter().enumerate() {
        if n_val > 0 && (i * n_val) % n < n_val {
            val.push(img.clone());
        } else {
            train.push(img.clone());
        }
    }
    (train, val)
}

/// Train a generator on random crops of `images`, with low-resolution inputs
/// from bicubic 4x downsampling.
pub fn train_sr(images: &[ImageTensor], extractor: &dyn FeatureExtractor, cfg: &SrConfig) -> Result<SrOutcome> {
    cfg.validate(extractor)?;
    let (train, val) = split_holdout(images, cfg.validation_fraction);
    if train.is_empty() {
        return Err(Error::Config("super-resolution training needs at least one training image".into()));
    }
    if let Some(small) = train.iter().find(|i| i.height() < cfg.patch || i.width() < cfg.patch || i.channels() != 3) {
        return Err(Error::Config(format!(
            "training images must be RGB and at least {p}x{p}, found {}x{}x{}",
            small.channels(),
            small.height(),
            small.width(),
            p = cfg.patch
        )));
    }
    let mut generator = SrGenerator::init(cfg.generator_width, cfg.generator_blocks, cfg.seed);
    let mut disc = Discriminator::init(cfg.discriminator_width, cfg.seed ^ 0xD15C);
    let (mut opt_g, mut opt_d) = (Adam::new(cfg.lr), Adam::new(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let baseline_psnr = if val.is_empty() { None } else { Some(evaluate_sr(&generator, &val)?.baseline_psnr) };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let adversarial = cfg.adversarial_weight > 0.0;

    for epoch in 1..=cfg.epochs {
        let warmup = epoch <= cfg.warmup_epochs;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let mut hr_crops = Vec::with_capacity(chunk.len());
            let mut lr_crops = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &train[i];
                let top = rng.gen_range(0..=img.height() - cfg.patch);
                let left = rng.gen_range(0..=img.width() - cfg.patch);
                let hr = img.crop_at(top, left, cfg.patch, cfg.patch)?;
                lr_crops.push(hr.downsample_bicubic(SCALE)?);
                hr_crops.push(hr);
            }
            let hr = ImageTensor::stack(&hr_crops.iter().collect::<Vec<_>>())?;
            let lr = ImageTensor::stack(&lr_crops.iter().collect::<Vec<_>>())?;

            let g = Graph::new();
            let sr_value;
            let (perc, pixel, adv, total);
            {
                let pg = ParamBinding::all_trainable(&g, &generator.params);
                let pd = ParamBinding::frozen(&g, &disc.params);
                let sr = generator.forward(&pg, g.constant(lr));
                let hr_var = g.constant(hr.clone());
                let perc_v = sr_perceptual_var(&g, extractor, sr, hr_var, &cfg.perceptual_tap)?;
                let pixel_v = (sr - hr_var).square().mean();
                let adv_v = if adversarial && !warmup {
                    Discriminator::logits(&pd, sr).neg().softplus().mean()
                } else {
                    g.scalar(0.0)
                };
                let loss = if warmup { pixel_v } else { perc_v + adv_v.scale(cfg.adversarial_weight) };
                (perc, pixel, adv, total) = (perc_v.item(), pixel_v.item(), adv_v.item(), loss.item());
                if !total.is_finite() {
                    return Err(Error::TrainingAborted { epoch, part: "sr".into() });
                }
                let mut grads = pg.gradients(&g.backward(loss));
                clip_grad_norm(&mut grads, GRAD_CLIP);
                sr_value = sr.value().as_ref().clone();
                drop(pg);
                opt_g.step(&mut generator.params, &grads);
            }
            if adversarial && !warmup {
                let g = Graph::new();
                let pd = ParamBinding::all_trainable(&g, &disc.params);
                let real = Discriminator::logits(&pd, g.constant(hr)).neg().softplus().mean();
                let fake = Discriminator::logits(&pd, g.constant(sr_value)).softplus().mean();
                let mut grads = pd.gradients(&g.backward(real + fake));
                clip_grad_norm(&mut grads, GRAD_CLIP);
                drop(pd);
                opt_d.step(&mut disc.params, &grads);
            }
            step_losses.push(perc);
            for (s, v) in sums.iter_mut().zip([total, perc, adv, pixel]) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps as f64;
        let (psnr_v, ssim_v) = if val.is_empty() {
            (None, None)
        } else {
            let e = evaluate_sr(&generator, &val)?;
            (Some(e.psnr), Some(e.ssim))
        };
        let record = SrEpoch {
            epoch,
            loss: sums[0] / n,
            perceptual: sums[1] / n,
            adversarial: sums[2] / n,
            pixel: sums[3] / n,
            psnr: psnr_v,
            ssim: ssim_v,
        };
        log::info!("sr epoch {epoch}: loss {:.5} psnr {:?}", record.loss, record.psnr);
        log.push(record);
    }
    Ok(SrOutcome { generator, log, step_losses, baseline_psnr })
}
