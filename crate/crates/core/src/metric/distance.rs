//! Weighted distances between normalized feature stacks.

use percsim_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::extractor::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Guard added to the channel norm before dividing.
pub const NORM_EPS: f64 = 1e-10;
const PARAM_PREFIX: &str = "metric.w.";

/// Nonnegative per-channel weights for each tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub taps: Vec<(String, Vec<f64>)>,
}

impl MetricWeights {
    /// All-ones weights for every tap of `extractor`.
    pub fn ones(extractor: &dyn FeatureExtractor) -> Self {
        Self { taps: extractor.taps().into_iter().map(|(n, c)| (n, vec![1.0; c])).collect() }
    }

    pub fn get(&self, tap: &str) -> Option<&[f64]> {
        self.taps.iter().find(|(n, _)| n == tap).map(|(_, w)| w.as_slice())
    }

    /// Same taps and widths as the extractor, and no negative entries.
    pub fn validate(&self, extractor: &dyn FeatureExtractor) -> Result<()> {
        let expect = extractor.taps();
        let have: Vec<(String, usize)> = self.taps.iter().map(|(n, w)| (n.clone(), w.len())).collect();
        if have != expect {
            return Err(Error::Config(format!("metric weights cover {have:?}, encoder taps are {expect:?}")));
        }
        if self.taps.iter().flat_map(|(_, w)| w).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("metric weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { taps: self.taps.iter().map(|(n, w)| (n.clone(), w.iter().map(|v| v * alpha).collect())).collect() }
    }

    /// Concatenation of all tap vectors.
    pub fn flat(&self) -> Vec<f64> {
        self.taps.iter().flat_map(|(_, w)| w.iter().copied()).collect()
    }

    /// Split a flat vector back into taps shaped like `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut pos = 0;
        let taps = self
            .taps
            .iter()
            .map(|(n, w)| {
                let v = flat[pos..pos + w.len()].to_vec();
                pos += w.len();
                (n.clone(), v)
            })
            .collect();
        Self { taps }
    }

    pub fn store_into(&self, params: &mut ParamStore) {
        for (n, w) in &self.taps {
            params.insert(format!("{PARAM_PREFIX}{n}"), Tensor::new(&[w.len()], w.clone()));
        }
    }

    /// Weights for `extractor`'s taps from a parameter store.
    pub fn from_params(params: &ParamStore, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let taps = extractor
            .tap_names()
            .into_iter()
            .map(|n| {
                let t = params
                    .get(&format!("{PARAM_PREFIX}{n}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint has no metric weights for `{n}`")))?;
                Ok((n, t.data().to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let w = Self { taps };
        w.validate(extractor)?;
        Ok(w)
    }
}

/// Divide each site's channel vector by its norm plus [`NORM_EPS`].
pub fn normalize_channelwise(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("features {s:?} are not [C, H, W]")));
    }
    if !f.all_finite() {
        return Err(Error::Numeric("features".into()));
    }
    let g = Graph::inference();
    let out = g.constant(f.reshape(&[1, s[0], s[1], s[2]])).channel_normalize(NORM_EPS);
    Ok(out.value().reshape(s))
}

/// Total distance and its per-tap parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub total: f64,
    pub layers: Vec<(String, f64)>,
}

/// `(1 / (H W)) sum_hw |w ⊙ (f̂ - f̂0)|^2` for one tap of `[1, C, H, W]` features.
pub fn layer_distance<'g>(g: &'g Graph, f: Var<'g>, f0: Var<'g>, w: &[f64]) -> Var<'g> {
    let s = f.shape();
    let w = g.constant(Tensor::new(&[1, s[1], 1, 1], w.to_vec()));
    let diff = f.channel_normalize(NORM_EPS) - f0.channel_normalize(NORM_EPS);
    (diff * w).square().sum().scale(1.0 / (s[2] * s[3]) as f64)
}

/// Per-tap distance nodes for two `[1, C, H, W]` inputs.
pub fn cpips_layers<'g>(
    g: &'g Graph,
    extractor: &dyn FeatureExtractor,
    x: Var<'g>,
    x0: Var<'g>,
    w: &MetricWeights,
) -> Result<Vec<Var<'g>>> {
    let names: Vec<String> = w.taps.iter().map(|(n, _)| n.clone()).collect();
    let fa = extractor.tap_vars(g, x, &names)?;
    let fb = extractor.tap_vars(g, x0, &names)?;
    Ok(w.taps.iter().zip(fa.into_iter().zip(fb)).map(|((_, wl), (a, b))| layer_distance(g, a, b, wl)).collect())
}

/// CPIPS distance between two images.
pub fn cpips_distance(
    x: &ImageTensor,
    x0: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    w: &MetricWeights,
) -> Result<DistanceReport> {
    x.ensure_same_dims(x0)?;
    extractor.check_input(x)?;
    w.validate(extractor)?;
    let g = Graph::inference();
    let parts = cpips_layers(&g, extractor, g.constant(x.to_tensor()), g.constant(x0.to_tensor()), w)?;
    let layers: Vec<(String, f64)> = w.taps.iter().zip(&parts).map(|((n, _), v)| (n.clone(), v.item())).collect();
    let total = layers.iter().map(|(_, v)| v).sum();
    Ok(DistanceReport { total, layers })
}

/// Per-tap, per-channel mean squared difference of normalized features,
/// `D_lc = mean_hw (f̂_c - f̂0_c)^2`. The distance is `sum_lc w_lc^2 D_lc`.
pub fn distance_profile(
    x: &ImageTensor,
    x0: &ImageTensor,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<f64>> {
    x.ensure_same_dims(x0)?;
    let (a, b) = (extractor.extract(x)?, extractor.extract(x0)?);
    let mut out = Vec::new();
    for ((_, fa), (_, fb)) in a.layers.iter().zip(&b.layers) {
        let (na, nb) = (normalize_channelwise(fa)?, normalize_channelwise(fb)?);
        let s = fa.shape();
        let plane = s[1] * s[2];
        for c in 0..s[0] {
            let sl = c * plane..(c + 1) * plane;
            let d: f64 = na.data()[sl.clone()].iter().zip(&nb.data()[sl]).map(|(p, q)| (p - q) * (p - q)).sum();
            out.push(d / plane as f64);
        }
    }
    Ok(out)
}

/// Distance from a precomputed profile.
pub fn profile_distance(w_flat: &[f64], profile: &[f64]) -> f64 {
    w_flat.iter().zip(profile).map(|(w, d)| w * w * d).sum()
}
