//! The codec's transforms: analysis `g_a`, synthesis `g_s`, hyper analysis
//! `h_a` and hyper synthesis `h_s`, evaluated on a [`ParamBinding`].

use percsim_autograd::{Graph, ParamBinding, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::entropy;
use super::gdn;
use super::spec::{Activation, EncoderSpec, BOTTLENECK_TAP};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Padding};

/// Lower bound of the conditional Gaussian scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Layer geometry of the hyper transforms: (kernel, stride).
const HYPER_ANALYSIS: [(usize, usize); 3] = [(3, 1), (5, 2), (5, 2)];
const HYPER_SYNTHESIS: [(usize, usize); 3] = [(5, 2), (5, 2), (3, 1)];

/// Per-layer activations tapped from the analysis transform.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// `(tap name, [C_l, H_l, W_l])` in tap order.
    pub layers: Vec<(String, Tensor)>,
}

impl FeatureStack {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Spatial sizes never grow along the tap order and all entries are finite.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = usize::MAX;
        for (name, t) in &self.layers {
            if t.ndim() != 3 {
                return Err(Error::Dimension(format!("tap {name} is not [C, H, W]")));
            }
            let area = t.shape()[1] * t.shape()[2];
            if area > prev {
                return Err(Error::Dimension(format!("tap {name} grows spatially")));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("tap {name}")));
            }
            prev = area;
        }
        Ok(())
    }
}

/// Graph-level analysis output.
pub struct AnalysisVars<'g> {
    pub y: Var<'g>,
    pub taps: Vec<(String, Var<'g>)>,
}

/// Result of [`Codec::analyze`].
#[derive(Clone, Debug)]
pub struct Analysis {
    /// `[M, H/s, W/s]` pre-quantization latent.
    pub y: Tensor,
    pub features: FeatureStack,
    pub padding: Padding,
}

/// A codec: its architecture plus named weights.
///
/// Weights are immutable during inference; the struct is `Send + Sync` and can
/// be shared across threads.
#[derive(Clone, Debug)]
pub struct Codec {
    pub spec: EncoderSpec,
    pub params: ParamStore,
}

fn conv_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn layer_key(kind: &str, name: impl std::fmt::Display) -> String {
    format!("{kind}.{name}")
}

impl Codec {
    /// Fresh weights drawn from a seeded generator.
    pub fn init(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        for (i, l) in spec.layers.iter().enumerate() {
            let cin = spec.layer_in_channels(i);
            let key = layer_key("g_a", &l.name);
            let fan_in = cin * l.kernel * l.kernel;
            params.insert(format!("{key}.weight"), conv_init(&mut rng, &[l.out_channels, cin, l.kernel, l.kernel], fan_in));
            params.insert(format!("{key}.bias"), conv_init(&mut rng, &[l.out_channels], fan_in));
            add_activation(&mut params, &key, l.activation, l.out_channels);
        }
        for (j, l) in spec.synthesis_layers().iter().enumerate() {
            let key = layer_key("g_s", j);
            // transposed weights are [Ci, Co, k, k]; plain convs are [Co, Ci, k, k]
            let (shape, fan_in) = if l.stride == 2 {
                ([l.in_channels, l.out_channels, l.kernel, l.kernel], l.out_channels * l.kernel * l.kernel)
            } else {
                ([l.out_channels, l.in_channels, l.kernel, l.kernel], l.in_channels * l.kernel * l.kernel)
            };
            params.insert(format!("{key}.weight"), conv_init(&mut rng, &shape, fan_in));
            params.insert(format!("{key}.bias"), conv_init(&mut rng, &[l.out_channels], fan_in));
            add_activation(&mut params, &key, l.activation, l.out_channels);
        }
        let (m, n) = (spec.latent_channels, spec.hyper_channels);
        for (j, &(k, _)) in HYPER_ANALYSIS.iter().enumerate() {
            let cin = if j == 0 { m } else { n };
            params.insert(format!("h_a.{j}.weight"), conv_init(&mut rng, &[n, cin, k, k], cin * k * k));
            params.insert(format!("h_a.{j}.bias"), conv_init(&mut rng, &[n], cin * k * k));
        }
        for (j, &(k, stride)) in HYPER_SYNTHESIS.iter().enumerate() {
            let cout = if j == 2 { m } else { n };
            let shape = if stride == 2 { [n, cout, k, k] } else { [cout, n, k, k] };
            let fan_in = if stride == 2 { cout * k * k } else { n * k * k };
            params.insert(format!("h_s.{j}.weight"), conv_init(&mut rng, &shape, fan_in));
            params.insert(format!("h_s.{j}.bias"), conv_init(&mut rng, &[cout], fan_in));
        }
        entropy::init_factorized(&mut params, n, &mut rng);
        Ok(Self { spec, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: EncoderSpec = serde_json::from_value(
            ckpt.metadata.get("encoder").cloned().ok_or_else(|| Error::Config("checkpoint lacks an encoder spec".into()))?,
        )?;
        spec.validate()?;
        let codec = Self { spec, params: ckpt.params.clone() };
        codec.check_params()?;
        Ok(codec)
    }

    /// Package weights and spec, merging extra metadata fields.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = json!({ "encoder": self.spec });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::new(self.params.clone(), meta)
    }

    /// Every parameter the architecture needs is present with the right rank.
    pub fn check_params(&self) -> Result<()> {
        let fresh = Codec::init(self.spec.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match self.params.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    /// CRC32 over codec weights (names and f32 bytes); excludes classifier and metric heads.
    pub fn model_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("cls.") || name.starts_with("metric.") {
                continue;
            }
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(&(v as f32).to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Run `g_a`, collecting the configured taps. Stops after the deepest
    /// layer in `until` when given.
    pub fn analysis<'g>(&self, p: &ParamBinding<'g, '_>, x: Var<'g>, until: Option<usize>) -> AnalysisVars<'g> {
        let last = until.unwrap_or(self.spec.layers.len() - 1);
        let tap_layers: Vec<(usize, &String)> =
            self.spec.taps.iter().filter_map(|t| self.spec.tap_layer(t).map(|i| (i, t))).collect();
        let mut h = x;
        let mut taps = Vec::new();
        for (i, l) in self.spec.layers.iter().enumerate().take(last + 1) {
            let key = layer_key("g_a", &l.name);
            h = h.conv2d(p.get(&format!("{key}.weight")), Some(p.get(&format!("{key}.bias"))), l.stride, l.kernel / 2);
            h = activate(p, &key, h, l.activation, false);
            for (ti, name) in &tap_layers {
                if *ti == i {
                    taps.push(((*name).clone(), h));
                }
            }
        }
        AnalysisVars { y: h, taps }
    }

    /// Run `g_s` on a (noisy or quantized) latent; output is not clamped.
    pub fn synthesis<'g>(&self, p: &ParamBinding<'g, '_>, y_hat: Var<'g>) -> Var<'g> {
        let mut h = y_hat;
        for (j, l) in self.spec.synthesis_layers().iter().enumerate() {
            let key = layer_key("g_s", j);
            let w = p.get(&format!("{key}.weight"));
            let b = Some(p.get(&format!("{key}.bias")));
            h = if l.stride == 2 {
                h.conv_transpose2d(w, b, 2, l.kernel / 2, 1)
            } else {
                h.conv2d(w, b, 1, l.kernel / 2)
            };
            h = activate(p, &key, h, l.activation, true);
        }
        h
    }

    /// `z = h_a(|y|)`.
    pub fn hyper_analysis<'g>(&self, p: &ParamBinding<'g, '_>, y: Var<'g>) -> Var<'g> {
        let mut h = y.abs();
        for (j, &(k, stride)) in HYPER_ANALYSIS.iter().enumerate() {
            h = h.conv2d(p.get(&format!("h_a.{j}.weight")), Some(p.get(&format!("h_a.{j}.bias"))), stride, k / 2);
            if j + 1 < HYPER_ANALYSIS.len() {
                h = h.relu();
            }
        }
        h
    }

    /// `sigma = SIGMA_MIN + softplus(h_s(z_hat))`.
    pub fn hyper_synthesis<'g>(&self, p: &ParamBinding<'g, '_>, z_hat: Var<'g>) -> Var<'g> {
        let mut h = z_hat;
        for (j, &(k, stride)) in HYPER_SYNTHESIS.iter().enumerate() {
            let w = p.get(&format!("h_s.{j}.weight"));
            let b = Some(p.get(&format!("h_s.{j}.bias")));
            h = if stride == 2 { h.conv_transpose2d(w, b, 2, k / 2, 1) } else { h.conv2d(w, b, 1, k / 2) };
            if j + 1 < HYPER_SYNTHESIS.len() {
                h = h.relu();
            }
        }
        h.softplus().add_scalar(SIGMA_MIN)
    }

    /// Pad an image for analysis, rejecting inputs smaller than one block.
    pub fn prepare(&self, x: &ImageTensor) -> Result<(ImageTensor, Padding)> {
        let block = self.spec.downsampling();
        if x.height() < block || x.width() < block {
            return Err(Error::InputTooSmall { height: x.height(), width: x.width(), block });
        }
        if x.channels() != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "codec expects {} channels, image has {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        Ok(x.reflect_pad_to_multiple(self.spec.pad_multiple()))
    }

    /// Latent and tap features of one image (deterministic, no gradients).
    pub fn analyze(&self, x: &ImageTensor) -> Result<Analysis> {
        let (padded, padding) = self.prepare(x)?;
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let out = self.analysis(&p, g.constant(padded.to_tensor()), None);
        let squeeze = |v: Var<'_>| {
            let t = v.value();
            t.reshape(&t.shape()[1..])
        };
        let features = FeatureStack { layers: out.taps.iter().map(|(n, v)| (n.clone(), squeeze(*v))).collect() };
        features.check_invariants()?;
        Ok(Analysis { y: squeeze(out.y), features, padding })
    }

    /// Expected `[M, h, w]` latent shape for a padded image.
    pub fn latent_shape(&self, padding: &Padding) -> [usize; 3] {
        let s = self.spec.downsampling();
        [self.spec.latent_channels, padding.padded_height / s, padding.padded_width / s]
    }

    pub fn hyper_shape(&self, padding: &Padding) -> [usize; 3] {
        let s = self.spec.pad_multiple();
        [self.spec.hyper_channels, padding.padded_height / s, padding.padded_width / s]
    }

    /// Decode a quantized latent to an image clamped to [0, 1], cropped to
    /// the original size when `padding` is given.
    pub fn synthesize(&self, y_hat: &Tensor, padding: Option<&Padding>) -> Result<ImageTensor> {
        let s = y_hat.shape();
        if s.len() != 3 || s[0] != self.spec.latent_channels {
            return Err(Error::Dimension(format!(
                "latent {s:?} does not have {} channels",
                self.spec.latent_channels
            )));
        }
        if let Some(pad) = padding {
            if s[1..] != self.latent_shape(pad)[1..] {
                return Err(Error::Dimension(format!("latent {s:?} does not match padding {pad:?}")));
            }
        }
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let x = self.synthesis(&p, g.constant(y_hat.reshape(&[1, s[0], s[1], s[2]])));
        let img = ImageTensor::from_batch(&x.value(), 0)?.clamp01();
        match padding {
            Some(pad) => img.crop(pad.height, pad.width),
            None => Ok(img),
        }
    }

    /// `z = h_a(|y|)`, `z_hat = round(z)`, `sigma = h_s(z_hat)`.
    pub fn hyper_forward(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = y.shape();
        if s.len() != 3 || s[0] != self.spec.latent_channels {
            return Err(Error::Dimension(format!("latent {s:?}")));
        }
        if s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Dimension(format!("latent spatial size {s:?} must be a positive multiple of 4")));
        }
        if !y.all_finite() {
            return Err(Error::Numeric("latent".into()));
        }
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let z = self.hyper_analysis(&p, g.constant(y.reshape(&[1, s[0], s[1], s[2]])));
        let z_val = z.value();
        let z_hat = entropy::quantize(&z_val, entropy::QuantMode::Round, None::<&mut ChaCha8Rng>)?;
        let sigma = self.hyper_synthesis(&p, g.constant(z_hat)).value();
        Ok((z_val.reshape(&z_val.shape()[1..]), sigma.reshape(&sigma.shape()[1..])))
    }

    /// Scale tensor for a quantized hyper latent `[N, h, w]`.
    pub fn sigma_from_z(&self, z_hat: &Tensor) -> Tensor {
        let s = z_hat.shape();
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &self.params);
        let sigma = self.hyper_synthesis(&p, g.constant(z_hat.reshape(&[1, s[0], s[1], s[2]]))).value();
        sigma.reshape(&sigma.shape()[1..])
    }

    /// Index of a tap's layer, as an error if missing.
    pub fn require_tap(&self, name: &str) -> Result<usize> {
        self.spec.tap_layer(name).ok_or_else(|| Error::Config(format!("unknown tap `{name}`")))
    }

    /// Whether `name` is the latent tap.
    pub fn is_bottleneck(name: &str) -> bool {
        name == BOTTLENECK_TAP
    }
}

fn add_activation(params: &mut ParamStore, key: &str, act: Activation, channels: usize) {
    match act {
        Activation::Identity => {}
        Activation::Prelu => params.insert(format!("{key}.prelu"), Tensor::full(&[channels], 0.25)),
        Activation::Gdn => {
            let (beta, gamma) = gdn::init_raw(channels);
            params.insert(format!("{key}.gdn.beta"), beta);
            params.insert(format!("{key}.gdn.gamma"), gamma);
        }
    }
}

fn activate<'g>(p: &ParamBinding<'g, '_>, key: &str, h: Var<'g>, act: Activation, inverse: bool) -> Var<'g> {
    match act {
        Activation::Identity => h,
        Activation::Prelu => h.prelu(p.get(&format!("{key}.prelu"))),
        Activation::Gdn => gdn::apply(p, &format!("{key}.gdn"), h, inverse),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(spec: EncoderSpec) -> Codec {
        let mut c = Codec::init(spec, 1).unwrap();
        for name in c.params.names().map(str::to_string).collect::<Vec<_>>() {
            if name.ends_with(".weight") || name.ends_with(".bias") {
                for v in c.params.get_mut(&name).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        c
    }

    fn textured(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(3, h, w, |c, y, x| ((c * 31 + y * 17 + x * 7) % 23) as f64 / 22.0)
    }

    #[test]
    fn hyperprior_latent_is_sixteen_times_smaller() {
        let codec = Codec::init(EncoderSpec::hyperprior(8, 12), 3).unwrap();
        let a = codec.analyze(&textured(64, 64)).unwrap();
        assert_eq!(a.y.shape(), &[12, 4, 4]);
        assert_eq!(a.features.names(), vec!["conv1", "conv2", "conv3", "bottleneck"]);
        let (z, sigma) = codec.hyper_forward(&a.y).unwrap();
        assert_eq!(z.shape(), &[8, 1, 1]);
        assert_eq!(sigma.shape(), a.y.shape());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let codec = zeroed(EncoderSpec::toy());
        let a = codec.analyze(&ImageTensor::zeros(3, 32, 32)).unwrap();
        assert!(a.y.data().iter().all(|&v| v == 0.0));
        for (_, t) in &a.features.layers {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let img = codec.synthesize(&a.y, Some(&a.padding)).unwrap();
        assert!(img.data().iter().all(|&v| v == img.data()[0]));
    }

    #[test]
    fn analysis_is_deterministic() {
        let codec = Codec::init(EncoderSpec::toy(), 9).unwrap();
        let a = codec.analyze(&textured(40, 48)).unwrap();
        let b = codec.analyze(&textured(40, 48)).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn shapes_survive_pad_and_crop() {
        let codec = Codec::init(EncoderSpec::toy(), 2).unwrap();
        let a = codec.analyze(&textured(96, 80)).unwrap();
        assert_eq!((a.padding.padded_height, a.padding.padded_width), (96, 96));
        let out = codec.synthesize(&a.y.map(f64::round_ties_even), Some(&a.padding)).unwrap();
        assert_eq!((out.height(), out.width()), (96, 80));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_tiny_and_mismatched_inputs() {
        let codec = Codec::init(EncoderSpec::toy(), 2).unwrap();
        assert!(matches!(codec.analyze(&textured(4, 40)), Err(Error::InputTooSmall { .. })));
        assert!(matches!(codec.synthesize(&Tensor::zeros(&[5, 2, 2]), None), Err(Error::Dimension(_))));
    }

    #[test]
    fn sigma_respects_lower_bound() {
        let codec = Codec::init(EncoderSpec::toy(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scale in [1e-9, 1.0, 100.0] {
            let y = Tensor::uniform(&[32, 4, 8], -scale, scale, &mut rng);
            let (_, sigma) = codec.hyper_forward(&y).unwrap();
            assert!(sigma.data().iter().all(|&s| s >= SIGMA_MIN));
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_hash() {
        let codec = Codec::init(EncoderSpec::toy(), 5).unwrap();
        let ckpt = codec.to_checkpoint(json!({"quality": 4}));
        let back = Codec::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.spec, codec.spec);
        assert_eq!(back.model_hash(), {
            let mut q = codec.clone();
            Checkpoint::quantize_params(&mut q.params);
            q.model_hash()
        });
    }
}
