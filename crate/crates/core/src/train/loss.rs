//! The joint rate, distortion and classification objective.

use percsim_autograd::{ParamBinding, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Phase;
use super::head::{classification_loss, ClassifierHead};
use crate::codec::entropy::{self, LatentCode};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Peak value used to scale the distortion term.
const PEAK: f64 = 255.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Bits per pixel.
    pub rate: f64,
    /// Mean squared error on the [0, 1] scale.
    pub distortion: f64,
    /// Cross-entropy.
    pub cls: f64,
}

impl LossParts {
    /// `rate + lambda * 255^2 * distortion + beta * cls`.
    pub fn total(&self, lambda: f64, beta: f64) -> f64 {
        self.rate + lambda * PEAK * PEAK * self.distortion + beta * self.cls
    }

    /// Name the first non-finite part.
    pub fn check(&self, epoch: usize) -> Result<()> {
        for (name, v) in [("rate", self.rate), ("distortion", self.distortion), ("cls", self.cls)] {
            if !v.is_finite() {
                return Err(Error::TrainingAborted { epoch, part: name.into() });
            }
        }
        Ok(())
    }
}

/// Evaluate the joint objective for one image from precomputed pieces.
///
/// Errors name the offending part (reported as epoch 0) when any is non-finite.
pub fn joint_loss(
    x: &ImageTensor,
    x_hat: &ImageTensor,
    code: &LatentCode,
    logits: &[f64],
    label: usize,
    lambda: f64,
    beta: f64,
) -> Result<(f64, LossParts)> {
    x.ensure_same_dims(x_hat)?;
    let bits = entropy::estimate_bits(code);
    let rate = bits / (x.height() * x.width()) as f64;
    let distortion = x.mse(x_hat)?;
    let cls = if logits.iter().any(|v| v.is_nan()) { f64::NAN } else { classification_loss(logits, label)? };
    let parts = LossParts { rate, distortion, cls };
    parts.check(0)?;
    Ok((parts.total(lambda, beta), parts))
}

/// Graph nodes of one training forward pass.
pub struct BatchLoss<'g> {
    pub total: Var<'g>,
    pub rate: Option<Var<'g>>,
    pub distortion: Option<Var<'g>>,
    pub cls: Option<Var<'g>>,
    pub logits: Option<Var<'g>>,
}

impl BatchLoss<'_> {
    pub fn parts(&self) -> LossParts {
        let v = |x: &Option<Var<'_>>| x.map_or(0.0, |v| v.item());
        LossParts { rate: v(&self.rate), distortion: v(&self.distortion), cls: v(&self.cls) }
    }
}

/// Weights of the objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveWeights {
    pub phase: Phase,
    pub lambda: f64,
    pub beta: f64,
}

/// Forward a `[B, C, H, W]` batch with noise quantization.
pub fn batch_loss<'g>(
    codec: &Codec,
    head: Option<&ClassifierHead>,
    p: &ParamBinding<'g, '_>,
    x: &Tensor,
    labels: &[usize],
    weights: ObjectiveWeights,
    rng: &mut impl Rng,
) -> BatchLoss<'g> {
    let g = p.graph();
    let xv = g.constant(x.clone());
    let s = x.shape();
    let analysis = codec.analysis(p, xv, None);
    let y = analysis.y;
    let logits = head.map(|h| h.logits(p, y));
    let cls = logits.map(|l| l.cross_entropy(labels));
    if weights.phase == Phase::PretrainCls {
        let ce = cls.expect("classifier pre-training needs a head");
        return BatchLoss { total: ce, rate: None, distortion: None, cls, logits };
    }
    let z = codec.hyper_analysis(p, y);
    let z_tilde = z + g.constant(entropy::noise_like(&z.shape(), rng));
    let y_tilde = y + g.constant(entropy::noise_like(&y.shape(), rng));
    let sigma = codec.hyper_synthesis(p, z_tilde);
    let bits = entropy::bits(entropy::gaussian_likelihood(y_tilde, sigma))
        + entropy::bits(entropy::factorized_likelihood(p, z_tilde));
    let rate = bits.scale(1.0 / (s[0] * s[2] * s[3]) as f64);
    let x_hat = codec.synthesis(p, y_tilde);
    let distortion = (x_hat - xv).square().mean();
    let mut total = rate + distortion.scale(weights.lambda * PEAK * PEAK);
    if let Some(ce) = cls {
        if weights.beta > 0.0 {
            total = total + ce.scale(weights.beta);
        }
    }
    BatchLoss { total, rate: Some(rate), distortion: Some(distortion), cls, logits }
}
