//! Pointwise maps, broadcasting arithmetic and reductions.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::{broadcast_zip, sum_to_shape, Tensor};

impl<'g> Var<'g> {
    /// Pointwise op whose derivative is a function of (input, output).
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_back = Rc::clone(&y);
        self.graph.push((*y).clone(), &[self], move |g, _| {
            let mut out = Vec::with_capacity(g.len());
            for ((&gv, &xv), &yv) in g.data().iter().zip(x.data()).zip(y_back.data()) {
                out.push(gv * df(xv, yv));
            }
            vec![Some(Tensor::new(g.shape(), out))]
        })
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// `|x|` with derivative `sign(x)` and 0 at the origin.
    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let y = broadcast_zip(&a, &b, f);
        self.graph.push(y, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let local = broadcast_zip(&a, &b, &da);
                sum_to_shape(&g.zip_map(&local, |u, v| u * v), a.shape())
            });
            let gb = need[1].then(|| {
                let local = broadcast_zip(&a, &b, &db);
                sum_to_shape(&g.zip_map(&local, |u, v| u * v), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let y = broadcast_zip(&self.value(), &other.value(), |a, b| a + b);
        self.graph.push(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (sa, sb) = (self.shape(), other.shape());
        let y = broadcast_zip(&self.value(), &other.value(), |a, b| a - b);
        self.graph.push(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| sum_to_shape(g, &sa)),
                need[1].then(|| sum_to_shape(&g.map(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn sum(self) -> Var<'g> {
        let shape = self.shape();
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keepdim(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let y = sum_to_shape(&x, &out_shape);
        self.graph.push(y, &[self], move |g, _| {
            let ones = Tensor::ones(&in_shape);
            vec![Some(broadcast_zip(&ones, g, |_, v| v))]
        })
    }

    pub fn mean_axes_keepdim(self, axes: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keepdim(axes).scale(1.0 / n as f64)
    }

    /// Mark a value as constant for the backward pass.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        Var::div(self, rhs)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(self)
    }
}

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: f64) -> Var<'g> {
        self.add_scalar(rhs)
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.scale(rhs)
    }
}
