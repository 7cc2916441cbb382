use super::shape::{broadcast_map, broadcast_shape, reduce_to};
use super::{Op, Tensor};
use crate::error::Result;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tensor {
    /// Broadcasting binary op. `grads` returns (∂out/∂a, ∂out/∂b) at (a, b, out).
    fn binary(
        &self,
        other: &Tensor,
        op: Op,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let shape = broadcast_shape(op.name(), self.shape(), other.shape())?;
        let map_a = broadcast_map(self.shape(), &shape);
        let map_b = broadcast_map(other.shape(), &shape);
        let n = super::numel(&shape);
        let data: Vec<f64> = {
            let a = self.values();
            let b = other.values();
            (0..n)
                .map(|i| {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    f(a[ia], b[ib])
                })
                .collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        let (len_a, len_b) = (self.numel(), other.numel());
        Ok(Tensor::from_op(op, shape, data, vec![self.clone(), other.clone()], move |g, out, needs| {
            let a = pa.values();
            let b = pb.values();
            let mut ga = needs[0].then(|| Vec::with_capacity(n));
            let mut gb = needs[1].then(|| Vec::with_capacity(n));
            for i in 0..n {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                let (da, db) = grads(a[ia], b[ib], out[i]);
                if let Some(v) = ga.as_mut() {
                    v.push(g[i] * da);
                }
                if let Some(v) = gb.as_mut() {
                    v.push(g[i] * db);
                }
            }
            vec![
                ga.map(|v| reduce_to(&v, map_a.as_deref(), len_a)),
                gb.map(|v| reduce_to(&v, map_b.as_deref(), len_b)),
            ]
        }))
    }

    /// Elementwise op. `df` returns the derivative at (input, output).
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.values().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, vec![self.clone()], move |g, out, _| {
            let x = input.values();
            vec![Some(g.iter().zip(x.iter()).zip(out).map(|((g, &x), &y)| g * df(x, y)).collect())]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b, |_, _, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b, |_, _, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b, |a, b, _| (b, a))
    }

    /// Division follows IEEE semantics; use [`Tensor::check_finite`] to surface
    /// infinities and NaNs.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b, |_, b, out| (1.0 / b, -out / b))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::MulScalar, move |x| x * c, move |_, _| c)
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.neg().add_scalar(c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary(Op::Gelu, gelu, |x, _| gelu_grad(x))
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs, f64::abs, |x, _| sign(x))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            Op::Clamp,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }
}
