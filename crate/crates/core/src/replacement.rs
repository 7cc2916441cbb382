//! Learnable patch replacement: token scoring with a straight-through mask,
//! prototype substitution, and the causal / refinement attention blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::tensor::{freeze, Tensor};

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before the
/// straight-through division.
pub const SCORE_EPS: f64 = 1e-6;

/// Per-token filter verdict.
#[derive(Debug, Clone)]
pub struct FilterMask {
    /// Clamped sigmoid scores, `[B, N, n]`.
    pub scores: Tensor,
    /// 1.0 where `score > tau`, else 0.0; row-major like `scores`.
    pub indicators: Vec<f64>,
    /// Forward value 1 everywhere, gradient `g / score` onto `scores`.
    pub identity: Tensor,
    pub tau: f64,
}

impl FilterMask {
    /// Builds indicators and the straight-through coupling from scores.
    pub fn from_scores(scores: Tensor, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::config(format!("score threshold must lie in [0, 1), got {tau}")));
        }
        let indicators = freeze::frozen(scores.values().iter().map(|&s| f64::from(u8::from(s > tau))).collect());
        let identity = scores.hard_unit();
        Ok(Self {
            scores,
            indicators,
            identity,
            tau,
        })
    }

    /// Replaces the indicators with all ones (filter disabled).
    pub fn keep_all(mut self) -> Self {
        self.indicators = vec![1.0; self.indicators.len()];
        self
    }

    /// Number of kept tokens per channel row (last axis).
    pub fn kept_per_row(&self) -> Vec<usize> {
        let n = *self.scores.shape().last().unwrap_or(&1);
        self.indicators
            .chunks(n.max(1))
            .map(|row| row.iter().filter(|&&v| v == 1.0).count())
            .collect()
    }

    /// Gradient-carrying mask `indicators ⊙ identity`.
    pub fn mask(&self) -> Result<Tensor> {
        let ind = Tensor::new(self.scores.shape(), self.indicators.clone())?;
        ind.mul(&self.identity)
    }
}

/// Linear scorer `d → 1` followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct TokenFilter {
    pub scorer: Linear,
}

impl TokenFilter {
    /// `bias_init` sets the scorer's starting bias; positive values start
    /// with most tokens kept.
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, bias_init: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let scorer = Linear::new(store, &format!("{name}.scorer"), hidden, 1, rng)?;
        scorer.bias.set_values(&[bias_init])?;
        Ok(Self { scorer })
    }

    /// Scores `[B, N, n, d]` tokens and thresholds them at `tau`.
    pub fn score_tokens(&self, tokens: &Tensor, tau: f64) -> Result<FilterMask> {
        let shape = tokens.shape();
        let scores = self
            .scorer
            .forward(tokens)?
            .reshape(&shape[..shape.len() - 1])?
            .sigmoid()
            .clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        FilterMask::from_scores(scores, tau)
    }
}

/// `tokens ⊙ M + prototypes ⊙ (1 − M)` with the scalar mask broadcast over `d`.
///
/// `tokens`: `[B, N, n, d]`, `prototypes`: `[B, N, d]`, `mask`: `[B, N, n]`.
pub fn replace_tokens(tokens: &Tensor, prototypes: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = tokens.shape();
    let rank = shape.len();
    if rank < 2 || mask.shape() != &shape[..rank - 1] || prototypes.shape() != [&shape[..rank - 2], &shape[rank - 1..]].concat() {
        return Err(Error::shape("replace_tokens", shape, prototypes.shape()));
    }
    let mut mshape = mask.shape().to_vec();
    mshape.push(1);
    let m = mask.reshape(&mshape)?;
    let mut pshape = prototypes.shape().to_vec();
    pshape.insert(rank - 2, 1);
    let proto = prototypes.reshape(&pshape)?;
    tokens.mul(&m)?.add(&proto.mul(&m.rsub_scalar(1.0))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Learnable position embeddings added before the causal block.
    pub positional_embedding: bool,
    /// Pre-attention layer normalization in both blocks.
    pub layer_norm: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            positional_embedding: true,
            layer_norm: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.heads == 0 || hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide hidden dimension {hidden}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[B, S, d]`
    pub output: Tensor,
    /// `[B, h, S, S]`, rows sum to 1.
    pub weights: Tensor,
}

/// Multi-head scaled dot-product self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: Option<LayerNorm>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

/// `[S, S]` additive mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(&[len, len], m).expect("square mask")
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        cfg: &AttentionConfig,
        causal: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(hidden)?;
        Ok(Self {
            norm: if cfg.layer_norm {
                Some(LayerNorm::new(store, &format!("{name}.norm"), hidden)?)
            } else {
                None
            },
            query: Linear::new(store, &format!("{name}.query"), hidden, hidden, rng)?,
            key: Linear::new(store, &format!("{name}.key"), hidden, hidden, rng)?,
            value: Linear::new(store, &format!("{name}.value"), hidden, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, hidden, rng)?,
            heads: cfg.heads,
            causal,
        })
    }

    /// `[B, S, d] -> [B, S, d]`
    pub fn forward(&self, x: &Tensor) -> Result<AttentionOutput> {
        let &[b, s, d] = x.shape() else {
            return Err(Error::shape("attention", x.shape(), &[0, 0, 0]));
        };
        let h = self.heads;
        let dh = d / h;
        let normed = match &self.norm {
            Some(ln) => ln.forward(x)?,
            None => x.clone(),
        };
        let split = |t: Tensor| -> Result<Tensor> { t.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = split(self.query.forward(&normed)?)?;
        let k = self.key.forward(&normed)?.reshape(&[b, s, h, dh])?.permute(&[0, 2, 3, 1])?;
        let v = split(self.value.forward(&normed)?)?;

        let mut scores = q.matmul(&k)?.mul_scalar(1.0 / (dh as f64).sqrt());
        if self.causal {
            scores = scores.add(&causal_mask(s))?;
        }
        let weights = scores.softmax(3)?;
        let context = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
        let output = x.add(&self.out.forward(&context)?)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Prepends the prototype as a global token, runs causal attention, then full
/// self-attention over the result.
#[derive(Debug, Clone)]
pub struct ReplacedAttention {
    pub positions: Option<Tensor>,
    pub causal: SelfAttention,
    pub refine: SelfAttention,
}

#[derive(Debug, Clone)]
pub struct ReplacedAttentionOutput {
    /// Causal block output, `[B·N, n+1, d]`.
    pub causal: AttentionOutput,
    /// Refinement block output, `[B·N, n+1, d]`.
    pub refined: AttentionOutput,
}

impl ReplacedAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        patches: usize,
        cfg: &AttentionConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(hidden)?;
        let positions = if cfg.positional_embedding {
            use rand::Rng;
            let values = (0..(patches + 1) * hidden).map(|_| 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            Some(store.register(format!("{name}.positions"), Tensor::parameter(&[patches + 1, hidden], values)?))
        } else {
            None
        };
        Ok(Self {
            positions,
            causal: SelfAttention::new(store, &format!("{name}.causal"), hidden, cfg, true, rng)?,
            refine: SelfAttention::new(store, &format!("{name}.refine"), hidden, cfg, false, rng)?,
        })
    }

    /// Builds `[O ; X^F']` as `[B·N, n+1, d]` with positions added.
    pub fn sequence(&self, replaced: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
        let &[b, n_ch, n, d] = replaced.shape() else {
            return Err(Error::shape("causal_attend", replaced.shape(), prototypes.shape()));
        };
        let global = prototypes.reshape(&[b, n_ch, 1, d])?;
        let mut seq = Tensor::concat(&[global, replaced.clone()], 2)?;
        if let Some(pos) = &self.positions {
            seq = seq.add(pos)?;
        }
        seq.reshape(&[b * n_ch, n + 1, d])
    }

    /// `replaced`: `[B, N, n, d]`, `prototypes`: `[B, N, d]`.
    pub fn causal_attend(&self, replaced: &Tensor, prototypes: &Tensor) -> Result<AttentionOutput> {
        self.causal.forward(&self.sequence(replaced, prototypes)?)
    }

    pub fn refine_msa(&self, x: &Tensor) -> Result<AttentionOutput> {
        self.refine.forward(x)
    }

    pub fn forward(&self, replaced: &Tensor, prototypes: &Tensor) -> Result<ReplacedAttentionOutput> {
        let causal = self.causal_attend(replaced, prototypes)?;
        let refined = self.refine_msa(&causal.output)?;
        Ok(ReplacedAttentionOutput { causal, refined })
    }
}
