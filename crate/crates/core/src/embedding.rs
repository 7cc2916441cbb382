//! Augmented embedding: mixture-of-experts patch embedding with noisy top-k
//! gating, and series-wise prototypes built from stochastically pooled
//! channel embeddings.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Mode, ParamStore};
use crate::rng;
use crate::tensor::{freeze, Tensor};

const GATE_NOISE_STREAM: u64 = 0x6A7E;
const POOL_STREAM: u64 = 0x9001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    pub shared_experts: usize,
    pub noisy_gating: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            experts: 8,
            top_k: 2,
            shared_experts: 1,
            noisy_gating: true,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden dimension must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::config(format!(
                "top_k must satisfy 1 <= k <= experts, got k={} with {} routed experts",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }
}

/// Routing result for a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Selected experts per token, highest logit first.
    pub indices: Vec<Vec<usize>>,
    /// Normalized weights aligned with `indices`.
    pub weights: Vec<Vec<f64>>,
    /// Gate logits before top-k masking (noise included when training).
    pub logits: Vec<Vec<f64>>,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.indices.len()
    }
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Mixture-of-experts patch embedding: shared experts applied to every token
/// plus a gate-weighted sum over the top-k routed experts.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub config: MoeConfig,
    pub patch_len: usize,
    pub shared: Vec<Linear>,
    pub routed: Vec<Linear>,
    pub gate_mean: Linear,
    pub gate_noise: Linear,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        config: MoeConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let shared = (0..config.shared_experts)
            .map(|i| Linear::new(store, &format!("{name}.shared.{i}"), patch_len, d, rng))
            .collect::<Result<_>>()?;
        let routed = (0..config.experts)
            .map(|i| Linear::new(store, &format!("{name}.routed.{i}"), patch_len, d, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            patch_len,
            shared,
            routed,
            gate_mean: Linear::new(store, &format!("{name}.gate.mean"), patch_len, config.experts, rng)?,
            gate_noise: Linear::new(store, &format!("{name}.gate.noise"), patch_len, config.experts, rng)?,
        })
    }

    /// One routed expert's linear value embedding of `[tokens, p]`.
    pub fn expert_project(&self, x: &Tensor, expert: usize) -> Result<Tensor> {
        let e = self.routed.get(expert).ok_or_else(|| {
            Error::config(format!("expert {expert} out of range ({} routed)", self.routed.len()))
        })?;
        e.forward(x)
    }

    /// Noisy top-k gate. Returns the dense `[tokens, M]` weight matrix (zeros
    /// outside the selected experts) together with the decision.
    pub fn gate(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, GateDecision)> {
        let tokens = x.shape()[0];
        let m = self.config.experts;
        let clean = self.gate_mean.forward(x)?;
        let logits = match mode {
            Mode::Train { seed } if self.config.noisy_gating => {
                let mut r = rng::rng(rng::derive(seed, GATE_NOISE_STREAM));
                let eps: Vec<f64> = (0..tokens * m).map(|_| r.sample(StandardNormal)).collect();
                let eps = Tensor::new(&[tokens, m], eps)?;
                clean.add(&eps.mul(&self.gate_noise.forward(x)?)?)?
            }
            _ => clean,
        };

        let raw = logits.to_vec();
        let mut mask = vec![f64::NEG_INFINITY; tokens * m];
        for t in 0..tokens {
            for i in top_k_indices(&raw[t * m..(t + 1) * m], self.config.top_k) {
                mask[t * m + i] = 0.0;
            }
        }
        let mask = freeze::frozen(mask);
        let weights = logits.add(&Tensor::new(&[tokens, m], mask.clone())?)?.softmax(1)?;

        let w = weights.to_vec();
        let mut decision = GateDecision {
            indices: Vec::with_capacity(tokens),
            weights: Vec::with_capacity(tokens),
            logits: raw.chunks(m).map(<[f64]>::to_vec).collect(),
        };
        for t in 0..tokens {
            let row = &raw[t * m..(t + 1) * m];
            let mut chosen: Vec<usize> = (0..m).filter(|&i| mask[t * m + i] == 0.0).collect();
            chosen.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            decision.weights.push(chosen.iter().map(|&i| w[t * m + i]).collect());
            decision.indices.push(chosen);
        }
        Ok((weights, decision))
    }

    /// Embeds `[tokens, p]` patches into `[tokens, d]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, GateDecision)> {
        let tokens = x.shape()[0];
        let (m, d) = (self.config.experts, self.config.hidden);
        let (gates, decision) = self.gate(x, mode)?;

        // All routed experts in one product; unselected experts carry weight 0.
        let weight = Tensor::concat(&self.routed.iter().map(|e| e.weight.clone()).collect::<Vec<_>>(), 1)?;
        let bias = Tensor::concat(&self.routed.iter().map(|e| e.bias.clone()).collect::<Vec<_>>(), 0)?;
        let experts = x.matmul(&weight)?.add(&bias)?.reshape(&[tokens, m, d])?;
        let routed = experts.mul(&gates.reshape(&[tokens, m, 1])?)?.sum(1, false)?;

        let mut shared: Option<Tensor> = None;
        for e in &self.shared {
            let y = e.forward(x)?;
            shared = Some(match shared {
                None => y,
                Some(acc) => acc.add(&y)?,
            });
        }
        let out = match shared {
            Some(s) => s.add(&routed)?,
            None => routed,
        };
        Ok((out, decision))
    }
}

/// Channel embeddings, pooled core representation and per-channel prototypes.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `[B, N, d]`
    pub channel_embeddings: Tensor,
    /// `[B, 1, d']`
    pub core: Tensor,
    /// `[B, N, d + d']`
    pub features: Tensor,
    /// `[B, N, d]`
    pub prototypes: Tensor,
}

/// Pools `[B, N, d']` activations over the channel axis. Per feature position,
/// channel probabilities are the softmax of that position's activations.
/// Training draws one channel per position; inference returns the
/// probability-weighted expectation. Output is `[B, 1, d']`.
pub fn pool_channels(activations: &Tensor, mode: Mode) -> Result<Tensor> {
    let probs = activations.softmax(1)?;
    match mode {
        Mode::Eval => probs.mul(activations)?.sum(1, true),
        Mode::Train { seed } => {
            let &[b, n, width] = activations.shape() else {
                return Err(Error::shape("stochastic_pool", activations.shape(), &[0, 0, 0]));
            };
            let p = probs.to_vec();
            let mut r = rng::rng(rng::derive(seed, POOL_STREAM));
            let mut pick = vec![0.0; b * n * width];
            for bi in 0..b {
                for j in 0..width {
                    let u: f64 = r.random();
                    let mut acc = 0.0;
                    let mut chosen = n - 1;
                    for c in 0..n {
                        acc += p[(bi * n + c) * width + j];
                        if u < acc {
                            chosen = c;
                            break;
                        }
                    }
                    pick[(bi * n + chosen) * width + j] = 1.0;
                }
            }
            let pick = Tensor::new(&[b, n, width], freeze::frozen(pick))?;
            pick.mul(activations)?.sum(1, true)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeriesEmbedding {
    pub channel: Linear,
    pub mlp_pool: Mlp,
    pub mlp_proto: Mlp,
}

impl SeriesEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        lookback: usize,
        hidden: usize,
        pool_dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        if pool_dim == 0 {
            return Err(Error::config("pooled dimension must be at least 1"));
        }
        Ok(Self {
            channel: Linear::new(store, &format!("{name}.channel"), lookback, hidden, rng)?,
            mlp_pool: Mlp::new(store, &format!("{name}.mlp_pool"), hidden, pool_dim, rng)?,
            mlp_proto: Mlp::new(store, &format!("{name}.mlp_proto"), hidden + pool_dim, hidden, rng)?,
        })
    }

    /// `[B, N, T] -> [B, N, d]`, one shared affine map per channel row.
    pub fn channel_embed(&self, x: &Tensor) -> Result<Tensor> {
        self.channel.forward(x)
    }

    /// `[B, N, d] -> [B, 1, d']`
    pub fn stochastic_pool(&self, embeddings: &Tensor, mode: Mode) -> Result<Tensor> {
        pool_channels(&self.mlp_pool.forward(embeddings)?, mode)
    }

    /// Concatenates the broadcast core onto every channel embedding and maps
    /// the result back to `d`. Returns `(features, prototypes)`.
    pub fn build_prototypes(&self, embeddings: &Tensor, core: &Tensor) -> Result<(Tensor, Tensor)> {
        let &[b, n, _] = embeddings.shape() else {
            return Err(Error::shape("build_prototypes", embeddings.shape(), core.shape()));
        };
        let width = *core.shape().last().unwrap_or(&0);
        let repeated = core.broadcast_to(&[b, n, width])?;
        let features = Tensor::concat(&[embeddings.clone(), repeated], 2)?;
        let prototypes = self.mlp_proto.forward(&features)?;
        Ok((features, prototypes))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<PrototypeSet> {
        let channel_embeddings = self.channel_embed(x)?;
        let core = self.stochastic_pool(&channel_embeddings, mode)?;
        let (features, prototypes) = self.build_prototypes(&channel_embeddings, &core)?;
        Ok(PrototypeSet {
            channel_embeddings,
            core,
            features,
            prototypes,
        })
    }
}
