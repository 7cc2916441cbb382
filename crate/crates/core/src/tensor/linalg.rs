use super::shape::{broadcast_map, broadcast_shape};
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Flat batch offsets of `src_batch` for every index of `dst_batch`.
fn batch_index(src_batch: &[usize], dst_batch: &[usize]) -> Vec<usize> {
    let total: usize = dst_batch.iter().product();
    if src_batch.iter().product::<usize>() == 1 {
        return vec![0; total];
    }
    broadcast_map(src_batch, dst_batch).unwrap_or_else(|| (0..total).collect())
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch dimensions broadcast (equal or size 1); a 2-D operand is
    /// shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| Error::shape("matmul", sa, sb))?;
        let nb: usize = batch.iter().product();
        let ia = batch_index(batch_a, &batch);
        let ib = batch_index(batch_b, &batch);

        let mut data = vec![0.0; nb * m * n];
        {
            let a = self.values();
            let b = other.values();
            for bi in 0..nb {
                let a = &a[ia[bi] * m * k..(ia[bi] + 1) * m * k];
                let b = &b[ib[bi] * k * n..(ib[bi] + 1) * k * n];
                let c = &mut data[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    let row = &mut c[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        for (cv, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }

        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (pa, pb) = (self.clone(), other.clone());
        let (len_a, len_b) = (self.numel(), other.numel());
        Ok(Tensor::from_op(Op::MatMul, shape, data, vec![self.clone(), other.clone()], move |g, _, needs| {
            let a = pa.values();
            let b = pb.values();
            let mut ga = needs[0].then(|| vec![0.0; len_a]);
            let mut gb = needs[1].then(|| vec![0.0; len_b]);
            for bi in 0..nb {
                let gblk = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    let b = &b[ib[bi] * k * n..(ib[bi] + 1) * k * n];
                    let dst = &mut ga[ia[bi] * m * k..(ia[bi] + 1) * m * k];
                    for i in 0..m {
                        let grow = &gblk[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            dst[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC
                    let a = &a[ia[bi] * m * k..(ia[bi] + 1) * m * k];
                    let dst = &mut gb[ib[bi] * k * n..(ib[bi] + 1) * k * n];
                    for i in 0..m {
                        let grow = &gblk[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a[i * k + p];
                            for (d, gv) in dst[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        }))
    }
}
