//! 2-D convolution and transposed convolution over NCHW batches.

use crate::graph::Var;
use crate::tensor::{gemm, Tensor};

/// Geometry of a square-kernel convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel > 0 && stride > 0, "degenerate convolution geometry");
        Self { kernel, stride, pad }
    }

    /// Output extent of a forward convolution over `size` input samples.
    pub fn out_len(&self, size: usize) -> usize {
        let padded = size + 2 * self.pad;
        assert!(padded >= self.kernel, "input {size} smaller than kernel {}", self.kernel);
        (padded - self.kernel) / self.stride + 1
    }
}

/// Unfold one `[c, h, w]` image into `[c*k*k, oh*ow]` patches.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, col: &mut [f64]) {
    let (oh, ow) = (geo.out_len(h), geo.out_len(w));
    let k = geo.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = iy as usize * w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[base + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[c, h, w]`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, geo: ConvGeometry, x: &mut [f64]) {
    let (oh, ow) = (geo.out_len(h), geo.out_len(w));
    let k = geo.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let start = (i * c + ch) * plane;
            for v in &mut out[start..start + plane] {
                *v += b;
            }
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let s = g.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut db = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *acc += g.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], db)
}

impl<'g> Var<'g> {
    /// Convolution of `[N, Ci, H, W]` with weights `[Co, Ci, k, k]` and optional bias `[Co]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let xs = x.shape().to_vec();
        let ws = wt.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NCHW input, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d expects [Co, Ci, k, k] weights");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geo = ConvGeometry::new(ws[2], stride, pad);
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let (oh, ow) = (geo.out_len(h), geo.out_len(w));
        let kk = ci * geo.kernel * geo.kernel;
        let plane = oh * ow;

        let mut out = vec![0.0; n * co * plane];
        let mut col = vec![0.0; kk * plane];
        for i in 0..n {
            im2col(&x.data()[i * ci * h * w..(i + 1) * ci * h * w], ci, h, w, geo, &mut col);
            gemm(co, kk, plane, wt.data(), false, &col, false, &mut out[i * co * plane..(i + 1) * co * plane], 0.0);
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n, co, plane);
            parents.push(b);
        }
        self.graph.push(Tensor::new(&[n, co, oh, ow], out), &parents, move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; n * ci * h * w]);
            let mut gw = need[1].then(|| vec![0.0; co * kk]);
            let mut col = vec![0.0; kk * plane];
            let mut dcol = vec![0.0; kk * plane];
            for i in 0..n {
                let go = &g.data()[i * co * plane..(i + 1) * co * plane];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[i * ci * h * w..(i + 1) * ci * h * w], ci, h, w, geo, &mut col);
                    gemm(co, plane, kk, go, false, &col, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(kk, co, plane, wt.data(), true, go, false, &mut dcol, 0.0);
                    col2im(&dcol, ci, h, w, geo, &mut gx[i * ci * h * w..(i + 1) * ci * h * w]);
                }
            }
            let mut grads = vec![gx.map(|d| Tensor::new(&xs, d)), gw.map(|d| Tensor::new(&ws, d))];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }

    /// Transposed convolution of `[N, Ci, H, W]` with weights `[Ci, Co, k, k]`.
    ///
    /// Output extent is `(H - 1) * stride - 2 * pad + k + output_pad`; this is
    /// the adjoint of [`Var::conv2d`] with the same geometry.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let xs = x.shape().to_vec();
        let ws = wt.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d expects NCHW input");
        assert_eq!(ws.len(), 4, "conv_transpose2d expects [Ci, Co, k, k] weights");
        assert_eq!(ws[0], xs[1], "conv_transpose2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert!(output_pad < stride, "output_pad must be smaller than stride");
        let geo = ConvGeometry::new(ws[2], stride, pad);
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let k = geo.kernel;
        let oh = ((h - 1) * stride + k + output_pad)
            .checked_sub(2 * pad)
            .expect("transposed convolution output would be empty");
        let ow = ((w - 1) * stride + k + output_pad) - 2 * pad;
        debug_assert_eq!(geo.out_len(oh), h);
        let kk = co * k * k;
        let plane = h * w;
        let oplane = oh * ow;

        let mut out = vec![0.0; n * co * oplane];
        let mut col = vec![0.0; kk * plane];
        for i in 0..n {
            gemm(kk, ci, plane, wt.data(), true, &x.data()[i * ci * plane..(i + 1) * ci * plane], false, &mut col, 0.0);
            col2im(&col, co, oh, ow, geo, &mut out[i * co * oplane..(i + 1) * co * oplane]);
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n, co, oplane);
            parents.push(b);
        }
        self.graph.push(Tensor::new(&[n, co, oh, ow], out), &parents, move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; n * ci * plane]);
            let mut gw = need[1].then(|| vec![0.0; ci * kk]);
            let mut gcol = vec![0.0; kk * plane];
            for i in 0..n {
                im2col(&g.data()[i * co * oplane..(i + 1) * co * oplane], co, oh, ow, geo, &mut gcol);
                if let Some(gx) = gx.as_mut() {
                    gemm(ci, kk, plane, wt.data(), false, &gcol, false, &mut gx[i * ci * plane..(i + 1) * ci * plane], 0.0);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(ci, plane, kk, &x.data()[i * ci * plane..(i + 1) * ci * plane], false, &gcol, true, gw, 1.0);
                }
            }
            let mut grads = vec![gx.map(|d| Tensor::new(&xs, d)), gw.map(|d| Tensor::new(&ws, d))];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }
}
