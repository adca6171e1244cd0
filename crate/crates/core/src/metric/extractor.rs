//! Sources of tapped feature maps.

use percsim_autograd::{Graph, ParamBinding, Tensor, Var};

use crate::codec::{Codec, FeatureStack};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// A frozen network exposing named intermediate activations.
pub trait FeatureExtractor {
    /// `(tap name, channels)` in network order.
    fn taps(&self) -> Vec<(String, usize)>;

    /// Smallest accepted input side.
    fn min_input(&self) -> usize {
        1
    }

    /// Activations `[B, C_l, H_l, W_l]` of `names` for a `[B, C, H, W]` input.
    fn tap_vars<'g>(&self, g: &'g Graph, x: Var<'g>, names: &[String]) -> Result<Vec<Var<'g>>>;

    fn tap_names(&self) -> Vec<String> {
        self.taps().into_iter().map(|(n, _)| n).collect()
    }

    /// Every tap of one image.
    fn extract(&self, image: &ImageTensor) -> Result<FeatureStack> {
        self.check_input(image)?;
        let g = Graph::inference();
        let names = self.tap_names();
        let vars = self.tap_vars(&g, g.constant(image.to_tensor()), &names)?;
        let layers = names
            .into_iter()
            .zip(vars)
            .map(|(n, v)| {
                let t = v.value();
                (n, t.reshape(&t.shape()[1..]))
            })
            .collect();
        Ok(FeatureStack { layers })
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let block = self.min_input();
        if image.height() < block || image.width() < block {
            return Err(Error::InputTooSmall { height: image.height(), width: image.width(), block });
        }
        Ok(())
    }
}

impl FeatureExtractor for Codec {
    fn taps(&self) -> Vec<(String, usize)> {
        self.spec.taps.iter().cloned().zip(self.spec.tap_channels()).collect()
    }

    fn min_input(&self) -> usize {
        self.spec.downsampling()
    }

    fn tap_vars<'g>(&self, g: &'g Graph, x: Var<'g>, names: &[String]) -> Result<Vec<Var<'g>>> {
        let layers = names.iter().map(|n| self.require_tap(n)).collect::<Result<Vec<_>>>()?;
        let deepest = layers.iter().copied().max().unwrap_or(0);
        let p = ParamBinding::frozen(g, &self.params);
        let out = self.analysis(&p, x, Some(deepest));
        names
            .iter()
            .map(|n| {
                out.taps
                    .iter()
                    .find(|(t, _)| t == n)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Config(format!("`{n}` is not a configured tap")))
            })
            .collect()
    }
}

/// Raw pixels as a single tap named `pixels`, plus a 2x average-pooled copy
/// named `pooled`. With `anchor`, each tap carries an extra constant channel,
/// so channel normalization keeps pixel magnitude.
#[derive(Clone, Copy, Debug)]
pub struct PixelTaps {
    pub channels: usize,
    pub anchor: bool,
}

impl PixelTaps {
    pub fn new(channels: usize) -> Self {
        Self { channels, anchor: false }
    }

    pub fn anchored(channels: usize) -> Self {
        Self { channels, anchor: true }
    }

    fn width(&self) -> usize {
        self.channels + usize::from(self.anchor)
    }
}

impl FeatureExtractor for PixelTaps {
    fn taps(&self) -> Vec<(String, usize)> {
        vec![("pixels".into(), self.width()), ("pooled".into(), self.width())]
    }

    fn min_input(&self) -> usize {
        2
    }

    fn tap_vars<'g>(&self, g: &'g Graph, x: Var<'g>, names: &[String]) -> Result<Vec<Var<'g>>> {
        let (c, o) = (self.channels, self.width());
        // Identity (or 2x2 mean) on the pixel channels; the anchor row is zero with bias 1.
        let project = |k: usize, stride: usize| {
            let w = Tensor::from_fn(&[o, c, k, k], |i| {
                let (oc, ic) = (i / (k * k * c), (i / (k * k)) % c);
                if oc == ic { 1.0 / (k * k) as f64 } else { 0.0 }
            });
            let bias = self.anchor.then(|| g.constant(Tensor::from_fn(&[o], |i| if i == c { 1.0 } else { 0.0 })));
            x.conv2d(g.constant(w), bias, stride, 0)
        };
        names
            .iter()
            .map(|n| match n.as_str() {
                "pixels" if !self.anchor => Ok(x),
                "pixels" => Ok(project(1, 1)),
                "pooled" => Ok(project(2, 2)),
                other => Err(Error::Config(format!("unknown tap `{other}`"))),
            })
            .collect()
    }
}
