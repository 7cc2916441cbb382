//! Parameter registry and the small layers the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether stochastic components sample (training) or take their
/// deterministic expectation (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Ordered, named collection of trainable tensors. Names are dotted module
/// paths (`embedding.patch.routed.3.weight`) and are what checkpoints store.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Tensor {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor.clone()));
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::shape("restore", &[self.entries.len()], &[snapshot.len()]));
        }
        for ((_, t), values) in self.entries.iter().zip(snapshot) {
            t.set_values(values)?;
        }
        Ok(())
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
pub fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine map `x·W + b` over the last axis; `W` is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = Tensor::parameter(&[input, output], uniform_init(rng, input * output, input))?;
        let bias = Tensor::parameter(&[output], uniform_init(rng, output, input))?;
        Ok(Self {
            weight: store.register(format!("{name}.weight"), weight),
            bias: store.register(format!("{name}.bias"), bias),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the map to `[.., in]`, returning `[.., out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let input = *shape.last().ok_or_else(|| Error::shape("linear", shape, self.weight.shape()))?;
        if input != self.input_dim() {
            return Err(Error::shape("linear", shape, self.weight.shape()));
        }
        let rows = x.numel() / input.max(1);
        let flat = x.reshape(&[rows, input])?;
        let y = flat.matmul(&self.weight)?.add(&self.bias)?;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.output_dim();
        y.reshape(&out_shape)
    }
}

/// `Linear(in→out) → GELU → Linear(out→out)`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, output, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), output, output, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// Layer normalization over the last axis with learnable gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::parameter(&[dim], vec![1.0; dim])?),
            shift: store.register(format!("{name}.shift"), Tensor::parameter(&[dim], vec![0.0; dim])?),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let axis = x.rank() - 1;
        let centered = x.sub(&x.mean(axis, true)?)?;
        let std = x.var(axis, true)?.add_scalar(self.eps).sqrt();
        centered.div(&std)?.mul(&self.gain)?.add(&self.shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_matches_manual_affine() {
        let mut store = ParamStore::new();
        let mut r = rng::rng(3);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut r).unwrap();
        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let y = lin.forward(&x).unwrap().to_vec();
        let w = lin.weight.to_vec();
        let b = lin.bias.to_vec();
        let xv = x.to_vec();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += xv[i * 3 + p] * w[p * 2 + j];
                }
                assert!((y[i * 2 + j] - (acc + b[j])).abs() < 1e-15);
            }
        }
        assert_eq!(store.len(), 2);
        assert_eq!(store.scalar_count(), 8);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 5, &mut rng::rng(0)).unwrap();
        let y = lin.forward(&Tensor::zeros(&[2, 3, 4])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        assert!(lin.forward(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let y = ln.forward(&Tensor::new(&[1, 4], vec![1., 2., 3., 4.]).unwrap()).unwrap().to_vec();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng::rng(1)).unwrap();
        let snap = store.snapshot();
        lin.weight.set_values(&[0.0; 4]).unwrap();
        store.restore(&snap).unwrap();
        assert_eq!(store.snapshot(), snap);
    }
}
