use super::shape::check_axis;
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// (outer, axis length, inner) decomposition for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tensor {
    fn prepare_reduce(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        check_axis(op, axis, self.rank())?;
        let parts = split_axis(self.shape(), axis);
        if parts.1 == 0 {
            return Err(Error::EmptyAxis { op });
        }
        Ok(parts)
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.numel();
        let s = self.values().iter().sum();
        Tensor::from_op(Op::Sum, Vec::new(), vec![s], vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0]; total])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let total = self.numel();
        let s = self.values().iter().sum::<f64>() / total as f64;
        Tensor::from_op(Op::Mean, Vec::new(), vec![s], vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0] / total as f64; total])]
        })
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.linear_reduce(Op::Sum, axis, keepdim, 1.0)
    }

    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        self.linear_reduce(Op::Mean, axis, keepdim, 1.0 / len as f64)
    }

    fn linear_reduce(&self, op: Op, axis: usize, keepdim: bool, scale: f64) -> Result<Tensor> {
        let (outer, len, inner) = self.prepare_reduce(op.name(), axis)?;
        let mut data = vec![0.0; outer * inner];
        {
            let x = self.values();
            for o in 0..outer {
                for a in 0..len {
                    let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        if scale != 1.0 {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Ok(Tensor::from_op(op, shape, data, vec![self.clone()], move |g, _, _| {
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        out[(o * len + a) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    /// Biased (1/n) variance along `axis`.
    pub fn var(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.prepare_reduce("var", axis)?;
        let n = len as f64;
        let mut means = vec![0.0; outer * inner];
        let mut data = vec![0.0; outer * inner];
        {
            let x = self.values();
            for o in 0..outer {
                for i in 0..inner {
                    let mu = (0..len).map(|a| x[(o * len + a) * inner + i]).sum::<f64>() / n;
                    let var = (0..len).map(|a| (x[(o * len + a) * inner + i] - mu).powi(2)).sum::<f64>() / n;
                    means[o * inner + i] = mu;
                    data[o * inner + i] = var;
                }
            }
        }
        let input = self.clone();
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Ok(Tensor::from_op(Op::Var, shape, data, vec![self.clone()], move |g, _, _| {
            let x = input.values();
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        let j = (o * len + a) * inner + i;
                        out[j] = g[o * inner + i] * 2.0 * (x[j] - means[o * inner + i]) / n;
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    /// Maximum along `axis`; the gradient goes to the first maximizing entry.
    pub fn max(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let (outer, len, inner) = self.prepare_reduce("max", axis)?;
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        {
            let x = self.values();
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    for a in 0..len {
                        let v = x[(o * len + a) * inner + i];
                        if a == 0 || v > data[slot] {
                            data[slot] = v;
                            argmax[slot] = a;
                        }
                    }
                }
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Ok(Tensor::from_op(Op::Max, shape, data, vec![self.clone()], move |g, _, _| {
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    out[(o * len + argmax[slot]) * inner + i] = g[slot];
                }
            }
            vec![Some(out)]
        }))
    }

    /// Numerically stable softmax along `axis`. `-inf` entries map to exactly
    /// 0; an axis slice that is entirely `-inf` is an error.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.prepare_reduce("softmax", axis)?;
        let mut data = vec![0.0; self.numel()];
        {
            let x = self.values();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(Error::DegenerateSoftmax);
                    }
                    let mut total = 0.0;
                    for a in 0..len {
                        let e = (x[at(a)] - max).exp();
                        data[at(a)] = e;
                        total += e;
                    }
                    for a in 0..len {
                        data[at(a)] /= total;
                    }
                }
            }
        }
        Ok(Tensor::from_op(Op::Softmax, self.shape().to_vec(), data, vec![self.clone()], move |g, y, _| {
            let mut out = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        out[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(out)]
        }))
    }
}
