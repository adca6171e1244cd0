//! Reshaping, axis permutation, slicing and matrix products.

use crate::graph::Var;
use crate::tensor::{gemm, Tensor};

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let in_shape = self.shape();
        let y = self.value().reshape(shape);
        self.graph.push(y, &[self], move |g, _| vec![Some(g.reshape(&in_shape))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let y = self.value().permute(axes);
        self.graph.push(y, &[self], move |g, _| vec![Some(g.permute(&inverse))])
    }

    /// Slice along one axis.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let in_shape = self.shape();
        let y = self.value().narrow(axis, start, len);
        self.graph.push(y, &[self], move |g, _| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let dim = in_shape[axis];
            let mut out = Tensor::zeros(&in_shape);
            let data = out.data_mut();
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(out)]
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.push(y, parts, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let piece = n.then(|| g.narrow(axis, start, len));
                    start += len;
                    piece
                })
                .collect()
        })
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D operands");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        self.graph.push(Tensor::new(&[m, n], out), &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut d, 0.0);
                Tensor::new(&[m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut d, 0.0);
                Tensor::new(&[k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// `[B, m, k] x [B, k, n]`. A batch size of 1 on either side broadcasts.
    pub fn batched_matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert!(a.ndim() == 3 && b.ndim() == 3, "batched_matmul expects 3-D operands");
        let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(k, k2, "batched_matmul inner dimension mismatch");
        assert!(ba == bb || ba == 1 || bb == 1, "batched_matmul batch mismatch");
        let batch = ba.max(bb);
        let a_off = move |i: usize| if ba == 1 { 0 } else { i * m * k };
        let b_off = move |i: usize| if bb == 1 { 0 } else { i * k * n };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[a_off(i)..a_off(i) + m * k],
                false,
                &b.data()[b_off(i)..b_off(i) + k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.graph.push(Tensor::new(&[batch, m, n], out), &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![0.0; ba * m * k];
                for i in 0..batch {
                    let o = a_off(i);
                    gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[b_off(i)..b_off(i) + k * n],
                        true,
                        &mut d[o..o + m * k],
                        1.0,
                    );
                }
                Tensor::new(&[ba, m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; bb * k * n];
                for i in 0..batch {
                    let o = b_off(i);
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[a_off(i)..a_off(i) + m * k],
                        true,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        false,
                        &mut d[o..o + k * n],
                        1.0,
                    );
                }
                Tensor::new(&[bb, k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// Rearrange `[N, C*r*r, H, W]` into `[N, C, H*r, W*r]`.
    pub fn pixel_shuffle(self, r: usize) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "pixel_shuffle expects NCHW");
        let (n, crr, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(crr % (r * r), 0, "channels not divisible by r^2");
        let c = crr / (r * r);
        self.reshape(&[n, c, r, r, h, w])
            .permute(&[0, 1, 4, 2, 5, 3])
            .reshape(&[n, c, h * r, w * r])
    }
}
