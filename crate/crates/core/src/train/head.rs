//! Classification head on the latent and its metrics.

use percsim_autograd::{log_sum_exp, ParamBinding, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Global average pooling over `y` followed by one linear layer
/// (`cls.weight [M, K]`, `cls.bias [K]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    pub latent_channels: usize,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(latent_channels: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        Ok(Self { latent_channels, num_classes })
    }

    /// Recover the head from stored weights, if any.
    pub fn from_params(params: &ParamStore) -> Option<Self> {
        let w = params.get("cls.weight")?;
        Some(Self { latent_channels: w.shape()[0], num_classes: w.shape()[1] })
    }

    pub fn init(&self, params: &mut ParamStore, rng: &mut impl Rng) {
        let bound = 1.0 / (self.latent_channels as f64).sqrt();
        params.insert("cls.weight", Tensor::uniform(&[self.latent_channels, self.num_classes], -bound, bound, rng));
        params.insert("cls.bias", Tensor::zeros(&[self.num_classes]));
    }

    /// `[B, M, h, w]` latent to `[B, K]` logits.
    pub fn logits<'g>(&self, p: &ParamBinding<'g, '_>, y: Var<'g>) -> Var<'g> {
        let b = y.shape()[0];
        let pooled = y.mean_axes_keepdim(&[2, 3]).reshape(&[b, self.latent_channels]);
        pooled.matmul(p.get("cls.weight")) + p.get("cls.bias")
    }
}

/// Softmax cross-entropy of one logit row.
pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index(format!("label {label} for {} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logits".into()));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Percentage of rows whose label is among the `k` largest logits; among
/// equal logits the lower class index ranks first.
pub fn accuracy_topk(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (b, n) = match logits.shape() {
        [b, n] => (*b, *n),
        s => return Err(Error::Dimension(format!("logits {s:?} are not [B, K]"))),
    };
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Index(format!("k = {k} with {n} classes")));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, &t) in labels.iter().enumerate() {
        if t >= n {
            return Err(Error::Index(format!("label {t} for {n} classes")));
        }
        let row = &logits.data()[i * n..(i + 1) * n];
        let rank = (0..n).filter(|&j| row[j] > row[t] || (row[j] == row[t] && j < t)).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / b as f64)
}
