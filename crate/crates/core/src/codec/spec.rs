//! Encoder architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the tap that exposes the pre-quantization latent `y`.
pub const BOTTLENECK_TAP: &str = "bottleneck";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// VGG-like encoder with PReLU/GDN stages, pre-trained for classification.
    Cpips,
    /// Four 5x5 stride-2 convolutions with GDN in between.
    Hyperprior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Prelu,
    Gdn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, out_channels: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        Self { name: name.into(), out_channels, kernel, stride, activation }
    }
}

/// One layer of the synthesis transform, mirrored from the analysis side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthesisLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Applied after the (transposed) convolution; GDN here means IGDN.
    pub activation: Activation,
}

/// Full description of a codec's transforms.
///
/// The last analysis layer produces the `latent_channels`-wide latent `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub taps: Vec<String>,
}

impl EncoderSpec {
    /// VGG-style encoder: each stage is a 3x3 conv + PReLU (strided) followed
    /// by a 3x3 conv + GDN, then a 1x1 bottleneck to `latent` channels.
    ///
    /// `first_stride` applies to stage 1; later stages always stride by 2.
    pub fn cpips_stages(stage_channels: &[usize], first_stride: usize, latent: usize, hyper: usize) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for (i, &c) in stage_channels.iter().enumerate() {
            let s = i + 1;
            let stride = if i == 0 { first_stride } else { 2 };
            layers.push(LayerSpec::new(format!("conv{s}_1"), c, 3, stride, Activation::Prelu));
            layers.push(LayerSpec::new(format!("conv{s}_2"), c, 3, 1, Activation::Gdn));
            taps.push(format!("conv{s}_2"));
        }
        layers.push(LayerSpec::new(BOTTLENECK_TAP, latent, 1, 1, Activation::Identity));
        taps.push(BOTTLENECK_TAP.to_string());
        Self { variant: Variant::Cpips, in_channels: 3, layers, latent_channels: latent, hyper_channels: hyper, taps }
    }

    /// Full-width CPIPS encoder (64/128/256/512/512) scaled by `width`.
    pub fn cpips(width: f64, latent: usize, hyper: usize) -> Self {
        let chans: Vec<usize> =
            [64.0, 128.0, 256.0, 512.0, 512.0].iter().map(|c| ((c * width).round() as usize).max(1)).collect();
        Self::cpips_stages(&chans, 1, latent, hyper)
    }

    /// Desk-scale three-stage CPIPS encoder; every stage halves resolution.
    pub fn toy() -> Self {
        Self::cpips_stages(&[8, 16, 32], 2, 32, 16)
    }

    /// Four 5x5 stride-2 convolutions with GDN between them.
    pub fn hyperprior(hyper: usize, latent: usize) -> Self {
        let layers = vec![
            LayerSpec::new("conv1", hyper, 5, 2, Activation::Gdn),
            LayerSpec::new("conv2", hyper, 5, 2, Activation::Gdn),
            LayerSpec::new("conv3", hyper, 5, 2, Activation::Gdn),
            LayerSpec::new("conv4", latent, 5, 2, Activation::Identity),
        ];
        let taps = ["conv1", "conv2", "conv3", BOTTLENECK_TAP].iter().map(|s| s.to_string()).collect();
        Self { variant: Variant::Hyperprior, in_channels: 3, layers, latent_channels: latent, hyper_channels: hyper, taps }
    }

    /// Product of analysis strides.
    pub fn downsampling(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Inputs are padded to this multiple so both the main and hyper paths divide evenly.
    pub fn pad_multiple(&self) -> usize {
        self.downsampling() * HYPER_DOWNSAMPLING
    }

    /// Index of the layer whose output is the tap `name`.
    pub fn tap_layer(&self, name: &str) -> Option<usize> {
        if name == BOTTLENECK_TAP {
            return Some(self.layers.len() - 1);
        }
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer_in_channels(&self, index: usize) -> usize {
        if index == 0 {
            self.in_channels
        } else {
            self.layers[index - 1].out_channels
        }
    }

    /// Channel count of each configured tap, in tap order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|t| self.tap_layer(t).map_or(0, |i| self.layers[i].out_channels))
            .collect()
    }

    /// Mirror the analysis layers into the synthesis transform.
    pub fn synthesis_layers(&self) -> Vec<SynthesisLayer> {
        (0..self.layers.len())
            .rev()
            .map(|i| {
                let l = &self.layers[i];
                SynthesisLayer {
                    in_channels: l.out_channels,
                    out_channels: self.layer_in_channels(i),
                    kernel: l.kernel,
                    stride: l.stride,
                    activation: if i == 0 { Activation::Identity } else { self.layers[i - 1].activation },
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return bad("encoder has no layers".into());
        }
        if self.latent_channels == 0 || self.hyper_channels == 0 {
            return bad("latent and hyper channel counts must be positive".into());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("unsupported input channel count {}", self.in_channels));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(self.latent_channels) {
            return bad("last analysis layer must produce the latent channels".into());
        }
        for l in &self.layers {
            if l.out_channels == 0 || l.kernel % 2 == 0 || !(l.stride == 1 || l.stride == 2) {
                return bad(format!("layer {} needs odd kernel, stride 1 or 2, nonzero width", l.name));
            }
        }
        let mut names: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate layer names".into());
        }
        for t in &self.taps {
            if self.tap_layer(t).is_none() {
                return bad(format!("tap `{t}` does not name a layer"));
            }
        }
        let mut order: Vec<usize> = self.taps.iter().filter_map(|t| self.tap_layer(t)).collect();
        let sorted = {
            let mut s = order.clone();
            s.sort_unstable();
            s
        };
        if order != sorted {
            return bad("taps must follow layer order".into());
        }
        order.dedup();
        if order.len() != self.taps.len() {
            return bad("duplicate taps".into());
        }
        Ok(())
    }
}

/// Two stride-2 stages in the hyper analysis transform.
pub const HYPER_DOWNSAMPLING: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_downsample_by_sixteen() {
        let c = EncoderSpec::cpips(1.0, 320, 192);
        c.validate().unwrap();
        assert_eq!(c.downsampling(), 16);
        assert_eq!(c.pad_multiple(), 64);
        assert_eq!(c.tap_channels(), vec![64, 128, 256, 512, 512, 320]);
        let h = EncoderSpec::hyperprior(192, 320);
        h.validate().unwrap();
        assert_eq!(h.downsampling(), 16);
        assert_eq!(h.tap_layer("bottleneck"), Some(3));
        EncoderSpec::toy().validate().unwrap();
        assert_eq!(EncoderSpec::toy().downsampling(), 8);
    }

    #[test]
    fn synthesis_mirrors_analysis() {
        let h = EncoderSpec::hyperprior(8, 12);
        let s = h.synthesis_layers();
        assert_eq!(s.len(), 4);
        assert_eq!((s[0].in_channels, s[0].out_channels, s[0].activation), (12, 8, Activation::Gdn));
        assert_eq!((s[3].in_channels, s[3].out_channels, s[3].activation), (8, 3, Activation::Identity));
    }

    #[test]
    fn rejects_unknown_taps() {
        let mut h = EncoderSpec::hyperprior(8, 12);
        h.taps.push("conv9".into());
        assert!(h.validate().is_err());
    }
}
