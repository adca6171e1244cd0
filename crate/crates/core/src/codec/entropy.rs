//! Quantization, likelihood models and rate estimation.
//!
//! The hyper latent `z` uses a learned per-channel monotone CDF (the
//! factorized prior); the main latent `y` uses a zero-mean Gaussian whose
//! scale comes from the hyper synthesis transform.

use percsim_autograd::{normal_cdf, Graph, ParamBinding, ParamStore, Tensor, Var};
use rand::Rng;

use super::model::SIGMA_MIN;
use crate::error::{Error, Result};

/// Likelihoods are clamped to `[LIKELIHOOD_MIN, 1]`.
pub const LIKELIHOOD_MIN: f64 = 1e-9;

/// Hidden widths of the factorized prior's per-channel density network.
const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const INIT_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Additive uniform noise, the training-time relaxation.
    Noise,
    /// Nearest integer, ties to even.
    Round,
}

/// Quantize every element. Noise mode needs an rng.
pub fn quantize<R: Rng>(v: &Tensor, mode: QuantMode, rng: Option<&mut R>) -> Result<Tensor> {
    match mode {
        QuantMode::Round => Ok(v.map(f64::round_ties_even)),
        QuantMode::Noise => {
            let rng = rng.ok_or_else(|| Error::Config("noise quantization needs a random generator".into()))?;
            let noise = noise_like(v.shape(), rng);
            Ok(v.zip_map(&noise, |x, n| x + n))
        }
    }
}

/// A sample from the open interval (-0.5, 0.5).
pub fn open_unit_noise(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-0.5..0.5);
        if u != -0.5 {
            return u;
        }
    }
}

/// Noise tensor matching `shape`, for use inside a graph.
pub fn noise_like(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| open_unit_noise(rng))
}

/// Raw parameters of the factorized prior, `[C, out, in]` per layer.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

/// Add freshly initialized factorized-prior parameters under `eb.*`.
pub fn init_factorized(params: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    let layers = FILTERS.len() - 1;
    let scale = INIT_SCALE.powf(1.0 / layers as f64);
    for k in 0..layers {
        let (fin, fout) = (FILTERS[k], FILTERS[k + 1]);
        let init = (1.0 / scale / fout as f64).exp_m1().ln();
        params.insert(format!("eb.matrix{k}"), Tensor::full(&[channels, fout, fin], init));
        params.insert(format!("eb.bias{k}"), Tensor::uniform(&[channels, fout, 1], -0.5, 0.5, rng));
        if k + 1 < layers {
            params.insert(format!("eb.factor{k}"), Tensor::zeros(&[channels, fout, 1]));
        }
    }
}

impl FactorizedPrior {
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let layers = FILTERS.len() - 1;
        let fetch = |name: String| {
            params.get(&name).cloned().ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            matrices.push(fetch(format!("eb.matrix{k}"))?);
            biases.push(fetch(format!("eb.bias{k}"))?);
            if k + 1 < layers {
                factors.push(fetch(format!("eb.factor{k}"))?);
            }
        }
        let channels = matrices[0].shape()[0];
        Ok(Self { channels, matrices, biases, factors })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// CDF logits of channel `c` at each point of `x`.
    pub fn logits(&self, c: usize, x: &[f64]) -> Vec<f64> {
        let mut h: Vec<Vec<f64>> = vec![x.to_vec()];
        for (k, m) in self.matrices.iter().enumerate() {
            let (fout, fin) = (m.shape()[1], m.shape()[2]);
            let mat = &m.data()[c * fout * fin..(c + 1) * fout * fin];
            let bias = &self.biases[k].data()[c * fout..(c + 1) * fout];
            let mut next = Vec::with_capacity(fout);
            for o in 0..fout {
                let mut row = vec![bias[o]; x.len()];
                for i in 0..fin {
                    let w = softplus(mat[o * fin + i]);
                    for (r, v) in row.iter_mut().zip(&h[i]) {
                        *r += w * v;
                    }
                }
                if let Some(f) = self.factors.get(k) {
                    let gate = f.data()[c * fout + o].tanh();
                    for r in row.iter_mut() {
                        *r += gate * r.tanh();
                    }
                }
                next.push(row);
            }
            h = next;
        }
        h.pop().unwrap_or_default()
    }

    /// Monotone CDF of channel `c`.
    pub fn cdf(&self, c: usize, x: &[f64]) -> Vec<f64> {
        self.logits(c, x).into_iter().map(sigmoid).collect()
    }

    /// Mass of the unit bin around each value of channel `c`.
    pub fn bin_mass(&self, c: usize, v: &[f64]) -> Vec<f64> {
        let lo: Vec<f64> = v.iter().map(|x| x - 0.5).collect();
        let hi: Vec<f64> = v.iter().map(|x| x + 0.5).collect();
        let (l, u) = (self.logits(c, &lo), self.logits(c, &hi));
        l.iter()
            .zip(&u)
            .map(|(&a, &b)| {
                // evaluate on whichever tail keeps the difference well conditioned
                let s = -(a + b).signum();
                (sigmoid(s * b) - sigmoid(s * a)).abs()
            })
            .collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn factorized_logits<'g>(p: &ParamBinding<'g, '_>, x: Var<'g>) -> Var<'g> {
    let layers = FILTERS.len() - 1;
    let mut h = x;
    for k in 0..layers {
        let m = p.get(&format!("eb.matrix{k}")).softplus();
        h = m.batched_matmul(h) + p.get(&format!("eb.bias{k}"));
        if k + 1 < layers {
            h = h + p.get(&format!("eb.factor{k}")).tanh() * h.tanh();
        }
    }
    h
}

/// Factorized-prior likelihood of `[B, C, h, w]` values inside a graph.
pub fn factorized_likelihood<'g>(p: &ParamBinding<'g, '_>, v: Var<'g>) -> Var<'g> {
    let s = v.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = v.permute(&[1, 0, 2, 3]).reshape(&[c, 1, b * h * w]);
    let lower = factorized_logits(p, flat.add_scalar(-0.5));
    let upper = factorized_logits(p, flat.add_scalar(0.5));
    let sign = {
        let (l, u) = (lower.value(), upper.value());
        p.graph().constant(l.zip_map(&u, |a, b| -(a + b).signum()))
    };
    let mass = ((sign * upper).sigmoid() - (sign * lower).sigmoid()).abs();
    mass.clamp(LIKELIHOOD_MIN, 1.0).reshape(&[c, b, h, w]).permute(&[1, 0, 2, 3])
}

/// Gaussian-conditional likelihood inside a graph.
pub fn gaussian_likelihood<'g>(v: Var<'g>, sigma: Var<'g>) -> Var<'g> {
    v.gaussian_bin_likelihood(sigma, LIKELIHOOD_MIN).clamp(LIKELIHOOD_MIN, 1.0)
}

/// `-sum(log2 p)` of a likelihood tensor inside a graph.
pub fn bits<'g>(likelihoods: Var<'g>) -> Var<'g> {
    likelihoods.ln().sum().scale(-1.0 / std::f64::consts::LN_2)
}

/// Probability model for a latent.
#[derive(Clone, Debug)]
pub enum LikelihoodModel<'a> {
    /// `[C, h, w]` values under the learned per-channel CDF.
    Factorized(&'a FactorizedPrior),
    /// Zero-mean Gaussian with per-element scale.
    Gaussian(&'a Tensor),
}

/// Per-element bin probability of an integer (or noisy) latent.
pub fn likelihood(v_hat: &Tensor, model: &LikelihoodModel<'_>) -> Result<Tensor> {
    match model {
        LikelihoodModel::Gaussian(sigma) => {
            if sigma.shape() != v_hat.shape() {
                return Err(Error::Dimension(format!(
                    "scale {:?} does not match latent {:?}",
                    sigma.shape(),
                    v_hat.shape()
                )));
            }
            if let Some(s) = sigma.data().iter().find(|&&s| !(s >= SIGMA_MIN)) {
                return Err(Error::Parameter(format!("scale {s} is below {SIGMA_MIN}")));
            }
            Ok(v_hat.zip_map(sigma, |v, s| gaussian_mass(v, s).clamp(LIKELIHOOD_MIN, 1.0)))
        }
        LikelihoodModel::Factorized(prior) => {
            let s = v_hat.shape();
            if s.len() != 3 || s[0] != prior.channels() {
                return Err(Error::Dimension(format!(
                    "latent {s:?} does not have {} channels",
                    prior.channels()
                )));
            }
            let plane = s[1] * s[2];
            let mut out = Vec::with_capacity(v_hat.len());
            for c in 0..s[0] {
                let mass = prior.bin_mass(c, &v_hat.data()[c * plane..(c + 1) * plane]);
                out.extend(mass.into_iter().map(|p| p.clamp(LIKELIHOOD_MIN, 1.0)));
            }
            Ok(Tensor::new(s, out))
        }
    }
}

/// `Phi((0.5 - |v|)/s) - Phi((-0.5 - |v|)/s)`.
pub fn gaussian_mass(v: f64, s: f64) -> f64 {
    let m = v.abs();
    normal_cdf((0.5 - m) / s) - normal_cdf((-0.5 - m) / s)
}

/// Quantized latents and their likelihoods for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `[M, H/s, W/s]`.
    pub y: Tensor,
    /// `[N, H/4s, W/4s]`.
    pub z: Tensor,
    pub y_likelihoods: Tensor,
    pub z_likelihoods: Tensor,
    pub mode: QuantMode,
}

impl LatentCode {
    pub fn validate(&self) -> Result<()> {
        if self.y.shape() != self.y_likelihoods.shape() || self.z.shape() != self.z_likelihoods.shape() {
            return Err(Error::Dimension("likelihoods must match their latents".into()));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|&p| p > 0.0 && p <= 1.0);
        if !in_range(&self.y_likelihoods) || !in_range(&self.z_likelihoods) {
            return Err(Error::Domain("likelihoods must lie in (0, 1]".into()));
        }
        if self.mode == QuantMode::Round {
            let integral = |t: &Tensor| t.data().iter().all(|v| v.fract() == 0.0);
            if !integral(&self.y) || !integral(&self.z) {
                return Err(Error::Domain("round-mode latents must be integers".into()));
            }
        }
        Ok(())
    }
}

/// `-sum(log2 p)` over both latents.
pub fn estimate_bits(code: &LatentCode) -> f64 {
    let b = |t: &Tensor| -t.data().iter().map(|p| p.log2()).sum::<f64>();
    b(&code.y_likelihoods) + b(&code.z_likelihoods)
}

/// Estimated bits per pixel of a `height x width` image.
pub fn estimate_rate_bpp(code: &LatentCode, height: usize, width: usize) -> Result<f64> {
    if height * width == 0 {
        return Err(Error::Domain("zero-area image".into()));
    }
    code.validate()?;
    Ok(estimate_bits(code) / (height * width) as f64)
}

/// Evaluate the factorized-prior likelihood through the graph path.
pub fn factorized_likelihood_tensor(params: &ParamStore, v: &Tensor) -> Tensor {
    let s = v.shape();
    let g = Graph::inference();
    let p = ParamBinding::frozen(&g, params);
    let out = factorized_likelihood(&p, g.constant(v.reshape(&[1, s[0], s[1], s[2]])));
    out.value().reshape(s)
}
