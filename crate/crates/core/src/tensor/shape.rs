use super::{freeze, numel, Op, Tensor};
use crate::error::{Error, Result};

/// Right-aligned (trailing-dimension) broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `dst`, the flat index of the broadcast source
/// element. `None` when the shapes are identical.
pub(crate) fn broadcast_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src == dst {
        return None;
    }
    let rank = dst.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let d = i + rank - src.len();
        eff[d] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(dst);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= eff[d] * dst[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Sums a gradient of the broadcast shape back onto the source shape.
pub(crate) fn reduce_to(grad: &[f64], map: Option<&[usize]>, src_len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; src_len];
            for (g, &i) in grad.iter().zip(map) {
                out[i] += g;
            }
            out
        }
    }
}

pub(crate) fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

impl Tensor {
    /// Same values, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            Op::Reshape,
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, _, _| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", self.shape(), axes));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        // map[out_flat] = in_flat
        let mut map = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = {
            let src = self.values();
            map.iter().map(|&i| src[i]).collect()
        };
        Ok(Tensor::from_op(Op::Permute, out_shape, data, vec![self.clone()], move |g, _, _| {
            let mut out = vec![0.0; g.len()];
            for (gv, &i) in g.iter().zip(&map) {
                out[i] = *gv;
            }
            vec![Some(out)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        check_axis("transpose", a.max(b), self.rank())?;
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let rank = first.rank();
        check_axis("concat", axis, rank)?;
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.values()[o * w..(o + 1) * w]);
            }
        }
        Ok(Tensor::from_op(Op::Concat, out_shape, data, parts.to_vec(), move |g, _, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut pg = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            pg.extend_from_slice(&g[o * row + start..o * row + start + w]);
                        }
                        pg
                    })
                })
                .collect()
        }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis("slice", axis, self.rank())?;
        let len = self.shape()[axis];
        if start > end || end > len {
            return Err(Error::shape("slice", self.shape(), &[start, end]));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let w = (end - start) * inner;
        let row = len * inner;
        let mut data = Vec::with_capacity(outer * w);
        {
            let src = self.values();
            for o in 0..outer {
                data.extend_from_slice(&src[o * row + start * inner..o * row + start * inner + w]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let total = self.numel();
        Ok(Tensor::from_op(Op::Slice, shape, data, vec![self.clone()], move |g, _, _| {
            let mut out = vec![0.0; total];
            for o in 0..outer {
                out[o * row + start * inner..o * row + start * inner + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(out)]
        }))
    }

    /// Expands size-1 (or missing leading) dimensions to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let b = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if b != shape {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        let map = broadcast_map(self.shape(), shape);
        let data = {
            let src = self.values();
            match &map {
                None => src.clone(),
                Some(m) => m.iter().map(|&i| src[i]).collect(),
            }
        };
        let src_len = self.numel();
        Ok(Tensor::from_op(Op::BroadcastTo, shape.to_vec(), data, vec![self.clone()], move |g, _, _| {
            vec![Some(reduce_to(g, map.as_deref(), src_len))]
        }))
    }

    /// Copy of the values with no path back to `self` (stop-gradient).
    pub fn detach(&self) -> Tensor {
        let values = freeze::frozen(self.to_vec());
        Tensor::leaf(self.shape().to_vec(), values, false)
    }

    /// Straight-through unit coupling: `self ⊙ (1 / detach(self))`.
    ///
    /// The forward value is exactly 1 everywhere; the backward rule sends
    /// `g / detach(self)` to `self`. Under decision replay the forward value is
    /// the literal ratio `self / frozen(self)`, so finite differences see the
    /// same first-order behavior the backward rule encodes.
    pub fn hard_unit(&self) -> Tensor {
        let anchor = freeze::frozen(self.to_vec());
        let data = if freeze::is_replaying() {
            self.values().iter().zip(&anchor).map(|(s, a)| s / a).collect()
        } else {
            vec![1.0; self.numel()]
        };
        Tensor::from_op(Op::HardUnit, self.shape().to_vec(), data, vec![self.clone()], move |g, _, _| {
            vec![Some(g.iter().zip(&anchor).map(|(g, a)| g * (1.0 / a)).collect())]
        })
    }
}
