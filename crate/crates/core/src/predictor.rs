//! Full forecaster: composition of the components, the flatten head, the L1
//! objective and the training loop.

use log::{debug, info};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{stack, WindowPair};
use crate::embedding::{GateDecision, MoeConfig, PatchEmbedding, PrototypeSet, SeriesEmbedding};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{normalize_rows, pad_rows, NormStats, Padding, PatchConfig, NORM_EPS};
use crate::replacement::{AttentionConfig, FilterMask, ReplacedAttention, ReplacedAttentionOutput, TokenFilter};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5407;
const STEP_STREAM: u64 = 0x57E9;

/// Every hyperparameter of the forecaster. Flat so that it maps one-to-one
/// onto the `[model]` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub padding: Padding,
    /// Token width `d`.
    pub hidden: usize,
    /// Width `d̃` after feature reduction.
    pub reduced: usize,
    /// Width `d'` of the pooled core representation.
    pub pool_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub shared_experts: usize,
    pub noisy_gating: bool,
    pub heads: usize,
    pub positional_embedding: bool,
    pub layer_norm: bool,
    /// Token filter threshold; 0 keeps every token whose score is positive.
    pub tau: f64,
    /// Starting bias of the token scorer.
    pub filter_bias_init: f64,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            padding: Padding::FrontReplicate,
            hidden: 64,
            reduced: 32,
            pool_dim: 32,
            experts: 8,
            top_k: 2,
            shared_experts: 1,
            noisy_gating: true,
            heads: 4,
            positional_embedding: true,
            layer_norm: true,
            tau: 0.5,
            filter_bias_init: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            hidden: self.hidden,
            experts: self.experts,
            top_k: self.top_k,
            shared_experts: self.shared_experts,
            noisy_gating: self.noisy_gating,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            positional_embedding: self.positional_embedding,
            layer_norm: self.layer_norm,
        }
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            padding: self.padding,
        }
    }

    /// Number of patch tokens `n` per channel.
    pub fn patches(&self) -> usize {
        self.patch().patch_count(self.lookback)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::config("lookback must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.reduced == 0 || self.reduced > self.hidden {
            return Err(Error::config(format!(
                "reduced width must lie in 1..={}, got {}",
                self.hidden, self.reduced
            )));
        }
        if self.pool_dim == 0 {
            return Err(Error::config("pool_dim must be at least 1"));
        }
        if !self.filter_bias_init.is_finite() {
            return Err(Error::config("filter_bias_init must be finite"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        self.moe().validate()?;
        self.attention().validate(self.hidden)?;
        self.patch().padding_for(self.lookback)?;
        Ok(())
    }
}

/// Shared affine map `d → d̃` over the last axis.
pub fn reduce_features(reduce: &Linear, x: &Tensor) -> Result<Tensor> {
    if reduce.output_dim() > reduce.input_dim() {
        return Err(Error::config(format!(
            "reduced width {} exceeds token width {}",
            reduce.output_dim(),
            reduce.input_dim()
        )));
    }
    reduce.forward(x)
}

/// Flattens the trailing `[n+1, d̃]` axes of `[.., n+1, d̃]` and applies the
/// shared head, giving `[.., F]`.
pub fn flatten_head(head: &Linear, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("flatten_head", shape, head.weight.shape()));
    }
    let mut flat = shape[..shape.len() - 2].to_vec();
    flat.push(shape[shape.len() - 2] * shape[shape.len() - 1]);
    head.forward(&x.reshape(&flat)?)
}

/// Mean absolute deviation over all entries.
pub fn l1_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("l1_loss", prediction.shape(), target.shape()));
    }
    Ok(prediction.sub(target)?.abs().mean_all())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Force every filter indicator to 1 (no replacement).
    pub keep_all: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            keep_all: false,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train { seed },
            keep_all: false,
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[B, N, F]` in the original scale.
    pub prediction: Tensor,
    /// `[B, N, F]` before denormalization.
    pub normalized: Tensor,
    /// `[B, N, n, d]`
    pub tokens: Tensor,
    pub gate: GateDecision,
    pub prototypes: PrototypeSet,
    pub mask: FilterMask,
    /// `[B, N, n, d]` after prototype substitution.
    pub replaced: Tensor,
    pub attention: ReplacedAttentionOutput,
    /// One entry per `(b, c)` row.
    pub stats: NormStats,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub patch_embedding: PatchEmbedding,
    pub series_embedding: SeriesEmbedding,
    pub filter: TokenFilter,
    pub attention: ReplacedAttention,
    pub reduce: Linear,
    pub head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::rng(rng::derive(config.seed, INIT_STREAM));
        let d = config.hidden;
        let n = config.patches();
        let patch_embedding = PatchEmbedding::new(&mut store, "embedding.patch", config.patch_len, config.moe(), &mut r)?;
        let series_embedding =
            SeriesEmbedding::new(&mut store, "embedding.series", config.lookback, d, config.pool_dim, &mut r)?;
        let filter = TokenFilter::new(&mut store, "filter", d, config.filter_bias_init, &mut r)?;
        let attention = ReplacedAttention::new(&mut store, "attention", d, n, &config.attention(), &mut r)?;
        let reduce = Linear::new(&mut store, "reduce", d, config.reduced, &mut r)?;
        let head = Linear::new(&mut store, "head", (n + 1) * config.reduced, config.horizon, &mut r)?;
        Ok(Self {
            config,
            store,
            patch_embedding,
            series_embedding,
            filter,
            attention,
            reduce,
            head,
        })
    }

    pub fn parameters(&self) -> &ParamStore {
        &self.store
    }

    /// Runs the forecaster on `[B, N, T]` inputs.
    pub fn forward(&self, inputs: &Array3<f64>, opts: ForwardOptions) -> Result<ForwardTrace> {
        let (b, n_ch, t) = inputs.dim();
        let cfg = &self.config;
        if t != cfg.lookback {
            return Err(Error::shape("forward", &[b, n_ch, t], &[b, n_ch, cfg.lookback]));
        }
        if b == 0 || n_ch == 0 {
            return Err(Error::shape("forward", &[b, n_ch, t], &[1, 1, cfg.lookback]));
        }
        let (p, n, d) = (cfg.patch_len, cfg.patches(), cfg.hidden);

        let mut data: Vec<f64> = inputs.iter().copied().collect();
        let stats = normalize_rows(&mut data, t);
        let padded = pad_rows(&data, t, &cfg.patch())?;
        let series = Tensor::new(&[b, n_ch, t], data)?;
        let patches = Tensor::new(&[b * n_ch * n, p], padded)?;

        let (tokens, gate) = self.patch_embedding.forward(&patches, opts.mode)?;
        let tokens = tokens.reshape(&[b, n_ch, n, d])?;
        let prototypes = self.series_embedding.forward(&series, opts.mode)?;

        let mut mask = self.filter.score_tokens(&tokens, cfg.tau)?;
        if opts.keep_all {
            mask = mask.keep_all();
        }
        let replaced = crate::replacement::replace_tokens(&tokens, &prototypes.prototypes, &mask.mask()?)?;
        let attention = self.attention.forward(&replaced, &prototypes.prototypes)?;

        let reduced = reduce_features(&self.reduce, &attention.refined.output)?;
        let normalized = flatten_head(&self.head, &reduced)?.reshape(&[b, n_ch, cfg.horizon])?;

        let scale: Vec<f64> = stats.std.iter().map(|s| s + NORM_EPS).collect();
        let scale = Tensor::new(&[b, n_ch, 1], scale)?;
        let mean = Tensor::new(&[b, n_ch, 1], stats.mean.clone())?;
        let prediction = normalized.mul(&scale)?.add(&mean)?;
        Ok(ForwardTrace {
            prediction,
            normalized,
            tokens,
            gate,
            prototypes,
            mask,
            replaced,
            attention,
            stats,
        })
    }

    /// Inference on `[B, N, T]`, returning `[B, N, F]`.
    pub fn predict_batch(&self, inputs: &Array3<f64>) -> Result<Array3<f64>> {
        let (b, n_ch, _) = inputs.dim();
        let trace = no_grad(|| self.forward(inputs, ForwardOptions::eval()))?;
        Ok(Array3::from_shape_vec((b, n_ch, self.config.horizon), trace.prediction.to_vec()).expect("prediction shape"))
    }

    /// Inference on one `N × T` window.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let batch = input.clone().insert_axis(Axis(0));
        Ok(self.predict_batch(&batch)?.index_axis_move(Axis(0), 0))
    }
}

/// Options of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Smallest batch the halving policy may fall back to.
    pub min_batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Estimated working-set budget in `f64` elements.
    pub memory_budget: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            min_batch_size: 8,
            lr: 1e-3,
            patience: Some(5),
            seed: 0,
            memory_budget: 1 << 30,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.min_batch_size == 0 || self.min_batch_size > self.batch_size {
            return Err(Error::config(format!(
                "batch sizes must satisfy 1 <= min_batch_size ({}) <= batch_size ({})",
                self.min_batch_size, self.batch_size
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if validation data was available.
    pub best_epoch: Option<usize>,
    pub batch_size: usize,
    pub stopped_early: bool,
}

/// Rough per-sample count of live `f64`s in one forward/backward pass.
pub fn sample_footprint(cfg: &ModelConfig, channels: usize) -> usize {
    let n = cfg.patches();
    let s = n + 1;
    let d = cfg.hidden;
    channels * (n * (cfg.experts + 6) * d + s * d * 24 + s * s * cfg.heads * 6 + cfg.lookback * 4)
}

/// Halves `requested` until the batch fits `budget`, never going below `min`.
pub fn resolve_batch_size(requested: usize, min: usize, per_sample: usize, budget: usize) -> usize {
    let mut batch = requested;
    while batch > min && batch.saturating_mul(per_sample) > budget {
        batch = (batch / 2).max(min);
    }
    batch
}

/// Mean L1 loss (normalized-free, original scale) of `model` over `windows`
/// in inference mode, weighted by window.
pub fn evaluate_loss(model: &Model, windows: &[WindowPair], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("no windows to evaluate"));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowPair> = chunk.iter().collect();
        let (x, y) = stack(&refs);
        let pred = model.predict_batch(&x)?;
        total += (&pred - &y).mapv(f64::abs).sum() / (y.len() / chunk.len()) as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Adam + L1 over seeded shuffled mini-batches with early stopping on the
/// validation loss. The best parameters are restored before returning.
pub fn train(model: &Model, train_windows: &[WindowPair], val_windows: &[WindowPair], opts: &TrainOptions) -> Result<TrainReport> {
    opts.validate()?;
    let channels = train_windows.first().map_or(1, |w| w.input.nrows());
    let batch_size = resolve_batch_size(
        opts.batch_size,
        opts.min_batch_size,
        sample_footprint(&model.config, channels),
        opts.memory_budget,
    );
    if batch_size != opts.batch_size {
        info!("batch size halved to {batch_size} to fit the memory budget");
    }
    let params = model.store.tensors();
    let mut adam = Adam::new(
        AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        },
        &params,
    );

    let mut report = TrainReport {
        trace: Vec::with_capacity(opts.epochs),
        best_epoch: None,
        batch_size,
        stopped_early: false,
    };
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 0..opts.epochs {
        let epoch_seed = rng::derive(opts.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng::rng(rng::derive(epoch_seed, SHUFFLE_STREAM)));

        let mut weighted = 0.0;
        for (step, idx) in order.chunks(batch_size).enumerate() {
            let refs: Vec<&WindowPair> = idx.iter().map(|&i| &train_windows[i]).collect();
            let (x, y) = stack(&refs);
            let seed = rng::derive(rng::derive(epoch_seed, STEP_STREAM), step as u64);
            let trace = model.forward(&x, ForwardOptions::train(seed))?;
            let target = Tensor::new(y.shape(), y.iter().copied().collect())?;
            let loss = l1_loss(&trace.prediction, &target)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, step {step}")));
            }
            model.store.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
            weighted += value * idx.len() as f64;
        }
        let train_loss = if train_windows.is_empty() { 0.0 } else { weighted / train_windows.len() as f64 };
        let val_loss = if val_windows.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val_windows, batch_size)?)
        };
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        report.trace.push(EpochRecord { epoch, train_loss, val_loss });

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.store.snapshot()));
                report.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if opts.patience.is_some_and(|p| stale >= p) {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.store.restore(&snapshot)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            lookback: 16,
            horizon: 4,
            patch_len: 4,
            hidden: 8,
            reduced: 4,
            pool_dim: 4,
            experts: 4,
            top_k: 2,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn l1_examples() {
        let y = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(l1_loss(&y, &y).unwrap().item(), 0.0);
        let z = Tensor::zeros(&[2]);
        assert_eq!(l1_loss(&y, &z).unwrap().item(), 1.5);
        assert!(l1_loss(&y, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn flatten_head_sums_two_features() {
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "h", 2, 1, &mut rng::rng(0)).unwrap();
        head.weight.set_values(&[1.0, 1.0]).unwrap();
        head.bias.set_values(&[0.0]).unwrap();
        let x = Tensor::new(&[1, 2, 1], vec![0.25, 1.5]).unwrap();
        assert_eq!(flatten_head(&head, &x).unwrap().to_vec(), vec![1.75]);
    }

    #[test]
    fn reduce_rejects_widening() {
        let mut store = ParamStore::new();
        let wide = Linear::new(&mut store, "w", 4, 8, &mut rng::rng(0)).unwrap();
        assert!(reduce_features(&wide, &Tensor::zeros(&[2, 4])).is_err());
        let cfg = ModelConfig { reduced: 9, ..toy_config() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let model = Model::new(toy_config()).unwrap();
        let x = Array2::from_shape_fn((3, 16), |(c, t)| ((c + 1) as f64 * t as f64 * 0.3).sin());
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.dim(), (3, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = Model::new(toy_config()).unwrap();
        let before = model.store.snapshot();
        let w: Vec<WindowPair> = (0..4)
            .map(|i| WindowPair {
                input: Array2::from_shape_fn((1, 16), |(_, t)| ((t + i) as f64).sin()),
                target: Array2::from_shape_fn((1, 4), |(_, t)| ((t + i + 16) as f64).sin()),
                origin: i,
            })
            .collect();
        let opts = TrainOptions { epochs: 1, lr: 0.0, batch_size: 2, min_batch_size: 1, ..TrainOptions::default() };
        let report = train(&model, &w, &w, &opts).unwrap();
        assert_eq!(report.trace.len(), 1);
        assert_eq!(model.store.snapshot(), before);
    }

    #[test]
    fn batch_halving_policy() {
        assert_eq!(resolve_batch_size(64, 8, 10, 1 << 20), 64);
        assert_eq!(resolve_batch_size(64, 8, 100, 1600), 16);
        assert_eq!(resolve_batch_size(64, 8, 1000, 10), 8);
    }
}
