//! Style transfer by direct optimization of the output pixels.

use percsim_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::spec::BOTTLENECK_TAP;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metric::FeatureExtractor;

/// `F Fᵀ / (C H W)` for a `[C, H, W]` feature map.
pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("features {s:?} are not [C, H, W]")));
    }
    if !f.all_finite() {
        return Err(Error::Numeric("features".into()));
    }
    let g = Graph::inference();
    Ok(gram_var(g.constant(f.reshape(&[1, s[0], s[1], s[2]]))).value().as_ref().clone())
}

/// Gram matrix `[C, C]` of a `[1, C, H, W]` feature node.
pub fn gram_var(f: Var<'_>) -> Var<'_> {
    let s = f.shape();
    let (c, n) = (s[1], s[2] * s[3]);
    let flat = f.reshape(&[c, n]);
    flat.matmul(flat.permute(&[1, 0])).scale(1.0 / (c * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleInit {
    Content,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleConfig {
    pub content_tap: String,
    pub style_taps: Vec<String>,
    pub content_weight: f64,
    pub style_weight: f64,
    pub steps: usize,
    /// Initial step, as the largest per-pixel change.
    pub lr: f64,
    pub init: StyleInit,
    #[serde(default)]
    pub seed: u64,
}

impl StyleConfig {
    /// Content at the deepest non-bottleneck tap, style at the taps before it.
    pub fn defaults_for(extractor: &dyn FeatureExtractor) -> Self {
        let names: Vec<String> = extractor.tap_names().into_iter().filter(|n| n != BOTTLENECK_TAP).collect();
        let content_tap = names.last().cloned().unwrap_or_default();
        let mut style_taps = names[..names.len().saturating_sub(1)].to_vec();
        if style_taps.is_empty() {
            style_taps = names.clone();
        }
        Self {
            content_tap,
            style_taps,
            content_weight: 1.0,
            style_weight: 1e3,
            steps: 200,
            lr: 0.05,
            init: StyleInit::Content,
            seed: 0,
        }
    }

    pub fn validate(&self, extractor: &dyn FeatureExtractor) -> Result<()> {
        let names = extractor.tap_names();
        for t in std::iter::once(&self.content_tap).chain(&self.style_taps) {
            if !names.contains(t) {
                return Err(Error::Config(format!("`{t}` is not a tap of this encoder")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("style transfer needs at least one step".into()));
        }
        if !(self.content_weight >= 0.0 && self.style_weight >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("weights must be nonnegative and the step positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStep {
    pub step: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StyleOutcome {
    pub image: ImageTensor,
    /// Loss at the start and after each accepted step.
    pub trace: Vec<StyleStep>,
    /// Set when the loss became non-finite; `image` is the last good iterate.
    pub diverged: bool,
}

struct Targets {
    content: Tensor,
    grams: Vec<Tensor>,
}

struct Objective<'a> {
    extractor: &'a dyn FeatureExtractor,
    cfg: &'a StyleConfig,
    names: Vec<String>,
    targets: Targets,
}

impl<'a> Objective<'a> {
    fn new(extractor: &'a dyn FeatureExtractor, cfg: &'a StyleConfig, content: &ImageTensor, style: &ImageTensor) -> Result<Self> {
        let mut names = vec![cfg.content_tap.clone()];
        names.extend(cfg.style_taps.iter().cloned());
        let g = Graph::inference();
        let fc = extractor.tap_vars(&g, g.constant(content.to_tensor()), &names[..1])?;
        let fs = extractor.tap_vars(&g, g.constant(style.to_tensor()), &names[1..])?;
        let targets = Targets {
            content: fc[0].value().as_ref().clone(),
            grams: fs.into_iter().map(|f| gram_var(f).value().as_ref().clone()).collect(),
        };
        Ok(Self { extractor, cfg, names, targets })
    }

    /// `(total, content, style)` nodes.
    fn losses<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let feats = self.extractor.tap_vars(g, x, &self.names)?;
        let content = (feats[0] - g.constant(self.targets.content.clone())).square().mean();
        let mut style = g.scalar(0.0);
        for (f, target) in feats[1..].iter().zip(&self.targets.grams) {
            style = style + (gram_var(*f) - g.constant(target.clone())).square().mean();
        }
        let total = content.scale(self.cfg.content_weight) + style.scale(self.cfg.style_weight);
        Ok((total, content, style))
    }

    fn evaluate(&self, x: &Tensor) -> Result<(f64, f64, f64)> {
        let g = Graph::inference();
        let (t, c, s) = self.losses(&g, g.constant(x.clone()))?;
        Ok((t.item(), c.item(), s.item()))
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let v = g.variable(x.clone());
        let (t, _, _) = self.losses(&g, v)?;
        Ok(g.backward(t).get_or_zeros(v))
    }
}

const MAX_HALVINGS: usize = 40;

/// Gradient descent on the pixels with step halving whenever a trial step
/// would raise the loss, so the recorded trace never increases. Accepted steps
/// grow the step by half again.
pub fn style_transfer(
    content: &ImageTensor,
    style: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    cfg: &StyleConfig,
) -> Result<StyleOutcome> {
    cfg.validate(extractor)?;
    extractor.check_input(content)?;
    extractor.check_input(style)?;
    if content.channels() != style.channels() {
        return Err(Error::Dimension("content and style channel counts differ".into()));
    }
    let objective = Objective::new(extractor, cfg, content, style)?;
    let mut x = match cfg.init {
        StyleInit::Content => content.to_tensor(),
        StyleInit::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (c, h, w) = content.dims();
            Tensor::uniform(&[1, c, h, w], 0.0, 1.0, &mut rng)
        }
    };
    let (mut total, c0, s0) = objective.evaluate(&x)?;
    let mut lr = cfg.lr;
    let mut trace = vec![StyleStep { step: 0, total, content: c0, style: s0, lr }];
    let mut diverged = !total.is_finite();
    for step in 1..=cfg.steps {
        if diverged {
            break;
        }
        let grad = objective.gradient(&x)?;
        let peak = grad.max_abs();
        if !peak.is_finite() {
            diverged = true;
            break;
        }
        if peak == 0.0 {
            trace.push(StyleStep { step, ..trace[trace.len() - 1] });
            continue;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let k = lr / peak;
            let trial = x.zip_map(&grad, |p, d| (p - k * d).clamp(0.0, 1.0));
            let (t, c, s) = objective.evaluate(&trial)?;
            if t.is_finite() && t <= total {
                accepted = Some((trial, t, c, s));
                break;
            }
            lr *= 0.5;
        }
        let Some((trial, t, c, s)) = accepted else {
            log::debug!("style transfer stalled at step {step}");
            break;
        };
        x = trial;
        total = t;
        trace.push(StyleStep { step, total: t, content: c, style: s, lr });
        lr *= 1.5;
    }
    let (ch, h, w) = content.dims();
    let image = ImageTensor::new(ch, h, w, x.into_data())?;
    Ok(StyleOutcome { image, trace, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::PixelTaps;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn gram_cases() {
        assert!(gram_matrix(&Tensor::zeros(&[3, 2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
        let (a, b) = (0.7, -1.3);
        let f = Tensor::from_fn(&[2, 3, 4], |i| if i < 12 { a } else { b });
        let g = gram_matrix(&f).unwrap();
        let expect = [a * a / 2.0, a * b / 2.0, a * b / 2.0, b * b / 2.0];
        for (x, y) in g.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor::uniform(&[5, 3, 3], -1.0, 1.0, &mut rng);
        let g = gram_matrix(&r).unwrap();
        let m = DMatrix::from_row_slice(5, 5, g.data());
        assert!((m.clone() - m.transpose()).amax() < 1e-12);
        assert!(m.symmetric_eigenvalues().min() >= -1e-9);
    }

    #[test]
    fn gram_ignores_site_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Tensor::from_fn(&[3, 4, 5], |i| r.data()[(i / 20) * 20 + perm[i % 20]]);
        let (a, b) = (gram_matrix(&r).unwrap(), gram_matrix(&shuffled).unwrap());
        // equal up to summation order
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    fn texture(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: f64 = rng.gen_range(0.3..1.2);
        ImageTensor::from_fn(3, 12, 12, |c, y, x| 0.5 + 0.4 * ((x as f64 * f + c as f64).sin() * (y as f64 * 0.5).cos()))
    }

    fn pixel_cfg() -> StyleConfig {
        StyleConfig {
            content_tap: "pixels".into(),
            style_taps: vec!["pooled".into()],
            content_weight: 1.0,
            style_weight: 0.0,
            steps: 30,
            lr: 0.1,
            init: StyleInit::Noise,
            seed: 1,
        }
    }

    #[test]
    fn fixed_point_and_zero_weights() {
        let px = PixelTaps::new(3);
        let c = texture(1);
        let cfg = StyleConfig { init: StyleInit::Content, style_weight: 1.0, ..pixel_cfg() };
        let out = style_transfer(&c, &c, &px, &cfg).unwrap();
        assert!(out.trace.iter().all(|s| s.total == 0.0));
        assert_eq!(out.image, c);
        let cfg = StyleConfig { content_weight: 0.0, style_weight: 0.0, ..pixel_cfg() };
        let out = style_transfer(&c, &texture(2), &px, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Tensor::uniform(&[1, 3, 12, 12], 0.0, 1.0, &mut rng);
        assert_eq!(out.image.data(), init.data());
    }

    #[test]
    fn trace_is_monotone_and_content_converges() {
        let px = PixelTaps::new(3);
        let out = style_transfer(&texture(1), &texture(2), &px, &StyleConfig { style_weight: 0.5, ..pixel_cfg() }).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].total <= w[0].total));
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let out = style_transfer(&texture(1), &texture(2), &px, &pixel_cfg()).unwrap();
        let (first, last) = (out.trace[0], out.trace[out.trace.len() - 1]);
        assert!(last.content < 0.01 * first.content);
    }

    #[test]
    fn rejects_unknown_tap() {
        let cfg = StyleConfig { content_tap: "conv9".into(), ..pixel_cfg() };
        assert!(matches!(style_transfer(&texture(1), &texture(2), &PixelTaps::new(3), &cfg), Err(Error::Config(_))));
    }
}
