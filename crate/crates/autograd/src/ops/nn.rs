//! Fused layers with hand-derived backward passes.

use crate::graph::Var;
use crate::tensor::{gemm, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u * INV_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

fn nchw(shape: &[usize], op: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{op} expects NCHW input, got {shape:?}");
    (shape[0], shape[1], shape[2] * shape[3])
}

impl<'g> Var<'g> {
    /// Generalized divisive normalization over the channel axis of an NCHW tensor.
    ///
    /// With `s_i = beta_i + sum_j gamma_ij x_j^2` at each site, the forward map is
    /// `x_i / sqrt(s_i)` and the inverse map is `x_i * sqrt(s_i)`.
    pub fn gdn(self, beta: Var<'g>, gamma: Var<'g>, inverse: bool) -> Var<'g> {
        let x = self.value();
        let b = beta.value();
        let gm = gamma.value();
        let (n, c, plane) = nchw(x.shape(), "gdn");
        assert_eq!(b.shape(), &[c], "gdn beta must be [C]");
        assert_eq!(gm.shape(), &[c, c], "gdn gamma must be [C, C]");

        let mut norm = vec![0.0; n * c * plane];
        let sq: Vec<f64> = x.data().iter().map(|v| v * v).collect();
        for i in 0..n {
            let r = i * c * plane..(i + 1) * c * plane;
            gemm(c, c, plane, gm.data(), false, &sq[r.clone()], false, &mut norm[r], 0.0);
        }
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for v in &mut norm[start..start + plane] {
                    *v += b.data()[ch];
                }
            }
        }
        let out: Vec<f64> = x
            .data()
            .iter()
            .zip(&norm)
            .map(|(&xv, &s)| if inverse { xv * s.sqrt() } else { xv / s.sqrt() })
            .collect();
        let shape = x.shape().to_vec();
        self.graph.push(Tensor::new(&shape, out), &[self, beta, gamma], move |g, need| {
            // t_i = g_i * x_i * d(s_i^{+-1/2})/ds_i
            let t: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(&norm)
                .map(|((&gv, &xv), &s)| {
                    if inverse {
                        gv * xv * 0.5 / s.sqrt()
                    } else {
                        -0.5 * gv * xv / (s * s.sqrt())
                    }
                })
                .collect();
            let gx = need[0].then(|| {
                let mut back = vec![0.0; t.len()];
                for i in 0..n {
                    let r = i * c * plane..(i + 1) * c * plane;
                    gemm(c, c, plane, gm.data(), true, &t[r.clone()], false, &mut back[r], 0.0);
                }
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(&norm)
                    .zip(&back)
                    .map(|(((&gv, &xv), &s), &bk)| {
                        let direct = if inverse { gv * s.sqrt() } else { gv / s.sqrt() };
                        direct + 2.0 * xv * bk
                    })
                    .collect();
                Tensor::new(&shape, data)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; c];
                for i in 0..n {
                    for (ch, acc) in d.iter_mut().enumerate() {
                        let start = (i * c + ch) * plane;
                        *acc += t[start..start + plane].iter().sum::<f64>();
                    }
                }
                Tensor::new(&[c], d)
            });
            let gg = need[2].then(|| {
                let mut d = vec![0.0; c * c];
                for i in 0..n {
                    let r = i * c * plane..(i + 1) * c * plane;
                    gemm(c, plane, c, &t[r.clone()], false, &sq[r], true, &mut d, 1.0);
                }
                Tensor::new(&[c, c], d)
            });
            vec![gx, gb, gg]
        })
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(self, slope: Var<'g>) -> Var<'g> {
        let x = self.value();
        let a = slope.value();
        let (n, c, plane) = nchw(x.shape(), "prelu");
        assert_eq!(a.shape(), &[c], "prelu slope must be [C]");
        let mut out = x.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for v in &mut out[start..start + plane] {
                    if *v < 0.0 {
                        *v *= a.data()[ch];
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.push(Tensor::new(&shape, out), &[self, slope], move |g, need| {
            let mut gx = g.data().to_vec();
            let mut ga = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let start = (i * c + ch) * plane;
                    for j in start..start + plane {
                        let xv = x.data()[j];
                        if xv < 0.0 {
                            ga[ch] += g.data()[j] * xv;
                            gx[j] *= a.data()[ch];
                        }
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(&shape, gx)),
                need[1].then(|| Tensor::new(&[c], ga)),
            ]
        })
    }

    /// Divide each channel vector (axis 1) by its Euclidean norm plus `eps`.
    pub fn channel_normalize(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let (n, c, plane) = nchw(x.shape(), "channel_normalize");
        let mut norms = vec![0.0; n * plane];
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for p in 0..plane {
                    let v = x.data()[start + p];
                    norms[i * plane + p] += v * v;
                }
            }
        }
        for v in &mut norms {
            *v = v.sqrt();
        }
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for p in 0..plane {
                    out[start + p] = x.data()[start + p] / (norms[i * plane + p] + eps);
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.push(Tensor::new(&shape, out), &[self], move |g, _| {
            // d/dx [x / (|x| + eps)] = g/(|x|+eps) - x <g, x> / ((|x|+eps)^2 |x|)
            let mut dots = vec![0.0; n * plane];
            for i in 0..n {
                for ch in 0..c {
                    let start = (i * c + ch) * plane;
                    for p in 0..plane {
                        dots[i * plane + p] += g.data()[start + p] * x.data()[start + p];
                    }
                }
            }
            let mut gx = vec![0.0; x.len()];
            for i in 0..n {
                for ch in 0..c {
                    let start = (i * c + ch) * plane;
                    for p in 0..plane {
                        let nrm = norms[i * plane + p];
                        let denom = nrm + eps;
                        let mut v = g.data()[start + p] / denom;
                        if nrm > 0.0 {
                            v -= x.data()[start + p] * dots[i * plane + p] / (denom * denom * nrm);
                        }
                        gx[start + p] = v;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    /// Probability mass of a zero-mean Gaussian with scale `sigma` on the
    /// unit-width bin centred at each value:
    /// `Phi((v + 0.5) / sigma) - Phi((v - 0.5) / sigma)`, floored at `floor`.
    pub fn gaussian_bin_likelihood(self, sigma: Var<'g>, floor: f64) -> Var<'g> {
        let v = self.value();
        let s = sigma.value();
        assert_eq!(v.shape(), s.shape(), "gaussian likelihood: value/scale shape mismatch");
        // evaluate on the upper tail for precision: mass = Phi(a) - Phi(b)
        let mass: Vec<f64> = v
            .data()
            .iter()
            .zip(s.data())
            .map(|(&x, &sg)| {
                let m = x.abs();
                normal_cdf((0.5 - m) / sg) - normal_cdf((-0.5 - m) / sg)
            })
            .collect();
        let out: Vec<f64> = mass.iter().map(|&p| p.max(floor)).collect();
        let shape = v.shape().to_vec();
        self.graph.push(Tensor::new(&shape, out), &[self, sigma], move |g, need| {
            let mut gv = vec![0.0; v.len()];
            let mut gs = vec![0.0; v.len()];
            for j in 0..v.len() {
                if mass[j] < floor {
                    continue;
                }
                let x = v.data()[j];
                let sg = s.data()[j];
                let m = x.abs();
                let a = (0.5 - m) / sg;
                let b = (-0.5 - m) / sg;
                let (pa, pb) = (normal_pdf(a), normal_pdf(b));
                let sign = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gv[j] = g.data()[j] * sign * (pb - pa) / sg;
                gs[j] = g.data()[j] * (b * pb - a * pa) / sg;
            }
            vec![
                need[0].then(|| Tensor::new(&shape, gv)),
                need[1].then(|| Tensor::new(&shape, gs)),
            ]
        })
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g> {
        let z = self.value();
        assert_eq!(z.ndim(), 2, "cross_entropy expects [B, K] logits");
        let (b, k) = (z.shape()[0], z.shape()[1]);
        assert_eq!(labels.len(), b, "one label per row");
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < k, "label {label} out of range for {k} classes");
            let row = &z.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        self.graph.push(Tensor::scalar(loss / b as f64), &[self], move |g, _| {
            let scale = g.item() / b as f64;
            let mut d = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                d[i * k + label] -= 1.0;
            }
            for v in &mut d {
                *v *= scale;
            }
            vec![Some(Tensor::new(&[b, k], d))]
        })
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
