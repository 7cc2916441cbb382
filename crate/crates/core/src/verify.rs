//! Self-check suite: per-op and full-model gradient checks plus the gating,
//! straight-through, replacement, causality, corruption, optimizer and metric
//! invariants. Run by `robustcast verify`.

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{MoeConfig, PatchEmbedding};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, relative_error};
use crate::metrics;
use crate::nn::{Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::perturb::{self, PerturbKind, PerturbationSpec};
use crate::predictor::{ForwardOptions, Model, ModelConfig};
use crate::replacement::{self, AttentionConfig, FilterMask, ReplacedAttention, SelfAttention};
use crate::rng;
use crate::tensor::{fault, freeze, no_grad, Op, Tensor};

/// Relative error allowed for single-op vector-Jacobian checks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Relative error allowed per parameter in the full-model check.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Central-difference step of the full-model check.
pub const MODEL_STEP: f64 = 1e-5;
const OP_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Corrupt this op's backward rule for the whole run.
    pub fault: Option<Op>,
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn signed(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = r.random_range(lo..hi);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::parameter(shape, values).expect("probe shape")
}

/// Relative error between the backward pass of `f` seeded with random output
/// weights and central differences of the weighted output.
pub fn vjp_error<F>(inputs: &[Tensor], f: F, seed: u64, step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for x in inputs {
        x.zero_grad();
    }
    let (out, decisions) = freeze::record(|| f(inputs));
    let out = out?;
    let mut r = rng::rng(seed);
    let weights: Vec<f64> = (0..out.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    out.backward_with(weights.clone())?;

    let weighted = || -> Result<f64> {
        let y = no_grad(|| freeze::replay(&decisions, || f(inputs)))?;
        let v = y.values();
        Ok(v.iter().zip(&weights).map(|(a, b)| a * b).sum())
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for x in inputs {
        analytic.extend(x.grad().unwrap_or_else(|| vec![0.0; x.numel()]));
        let original = x.to_vec();
        let mut probe = original.clone();
        for j in 0..original.len() {
            probe[j] = original[j] + step;
            x.set_values(&probe)?;
            let plus = weighted()?;
            probe[j] = original[j] - step;
            x.set_values(&probe)?;
            let minus = weighted()?;
            probe[j] = original[j];
            numeric.push((plus - minus) / (2.0 * step));
        }
        x.set_values(&original)?;
        x.zero_grad();
    }
    Ok(relative_error(&analytic, &numeric))
}

type Probe = (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);

/// Small graph whose only differentiable node is `op`, with inputs kept away
/// from kinks and domain edges.
pub fn op_probe(op: Op, seed: u64) -> Probe {
    let mut r = rng::rng(rng::derive(seed, op as u64));
    let mut g = |shape: &[usize], lo: f64, hi: f64| -> Tensor {
        let n = shape.iter().product();
        param(shape, signed(&mut r, n, lo, hi))
    };
    let x23 = g(&[2, 3], 0.1, 1.5);
    let unary = |f: fn(&Tensor) -> Tensor| -> Box<dyn Fn(&[Tensor]) -> Result<Tensor>> { Box::new(move |t| Ok(f(&t[0]))) };
    match op {
        Op::Add => (vec![x23, g(&[3], 0.1, 1.5)], Box::new(|t| t[0].add(&t[1]))),
        Op::Sub => (vec![x23, g(&[2, 1], 0.1, 1.5)], Box::new(|t| t[0].sub(&t[1]))),
        Op::Mul => (vec![x23, g(&[2, 3], 0.1, 1.5)], Box::new(|t| t[0].mul(&t[1]))),
        Op::Div => (vec![x23, g(&[2, 3], 0.5, 1.5)], Box::new(|t| t[0].div(&t[1]))),
        Op::Neg => (vec![x23], unary(Tensor::neg)),
        Op::AddScalar => (vec![x23], Box::new(|t| Ok(t[0].add_scalar(0.7)))),
        Op::MulScalar => (vec![x23], Box::new(|t| Ok(t[0].mul_scalar(-1.3)))),
        Op::Exp => (vec![x23], unary(Tensor::exp)),
        Op::Sigmoid => (vec![x23], unary(Tensor::sigmoid)),
        Op::Relu => (vec![x23], unary(Tensor::relu)),
        Op::Gelu => (vec![x23], unary(Tensor::gelu)),
        Op::Abs => (vec![x23], unary(Tensor::abs)),
        Op::Sqrt => {
            let v: Vec<f64> = x23.to_vec().iter().map(|v| v.abs() + 0.3).collect();
            (vec![param(&[2, 3], v)], unary(Tensor::sqrt))
        }
        Op::Clamp => {
            // Half the entries inside (-1, 1), half outside, none near the bounds.
            let v: Vec<f64> = x23.to_vec().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v * 0.5 } else { v.signum() * (1.2 + v.abs()) }).collect();
            (vec![param(&[2, 3], v)], Box::new(|t| Ok(t[0].clamp(-1.0, 1.0))))
        }
        Op::MatMul => (vec![g(&[2, 3, 4], 0.1, 1.5), g(&[4, 2], 0.1, 1.5)], Box::new(|t| t[0].matmul(&t[1]))),
        Op::Softmax => (vec![g(&[2, 4], 0.1, 1.5)], Box::new(|t| t[0].softmax(1))),
        Op::Sum => (vec![x23], Box::new(|t| t[0].sum(1, false))),
        Op::Mean => (vec![x23], Box::new(|t| t[0].mean(0, true))),
        Op::Var => (vec![g(&[2, 4], 0.1, 1.5)], Box::new(|t| t[0].var(1, false))),
        Op::Max => {
            let v = vec![0.1, 0.9, -0.4, 1.4, -1.1, 0.3];
            (vec![param(&[2, 3], v)], Box::new(|t| t[0].max(1, false)))
        }
        Op::Reshape => (vec![x23], Box::new(|t| t[0].reshape(&[3, 2]))),
        Op::Permute => (vec![g(&[2, 3, 4], 0.1, 1.5)], Box::new(|t| t[0].permute(&[2, 0, 1]))),
        Op::Concat => (vec![x23, g(&[2, 2], 0.1, 1.5)], Box::new(|t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1))),
        Op::Slice => (vec![g(&[2, 4], 0.1, 1.5)], Box::new(|t| t[0].slice(1, 1, 3))),
        Op::BroadcastTo => (vec![g(&[1, 3], 0.1, 1.5)], Box::new(|t| t[0].broadcast_to(&[2, 3]))),
        Op::HardUnit => {
            let v: Vec<f64> = x23.to_vec().iter().map(|v| 0.2 + v.abs() * 0.5).collect();
            (vec![param(&[2, 3], v)], Box::new(|t| Ok(t[0].hard_unit())))
        }
        Op::Leaf | Op::Detach => (vec![x23], Box::new(|t| Ok(t[0].clone()))),
    }
}

pub fn op_gradient_error(op: Op, seed: u64) -> Result<f64> {
    let (inputs, f) = op_probe(op, seed);
    vjp_error(&inputs, f, rng::derive(seed, 0x0be), OP_STEP)
}

/// The small configuration used for the full-model gradient check.
pub fn toy_config(tau: f64) -> ModelConfig {
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
        tau,
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Full-model gradient check in training mode (noisy gate and sampled pooling
/// frozen across probes) on a squared-error loss.
pub fn model_gradient_check(seed: u64) -> Result<crate::gradcheck::GradCheckReport> {
    let model = Model::new(ModelConfig { seed, ..toy_config(0.0) })?;
    let mut r = rng::rng(rng::derive(seed, 0x4d));
    let x = Array3::from_shape_fn((1, 2, 16), |(_, c, t)| ((c + 1) as f64 * 0.7 * t as f64).sin() + r.random_range(-0.3..0.3));
    let target = Tensor::new(&[1, 2, 4], (0..8).map(|_| r.random_range(-1.0..1.0)).collect())?;
    check_gradients(
        model.store.entries(),
        || {
            let trace = model.forward(&x, ForwardOptions::train(rng::derive(seed, 5)))?;
            let d = trace.prediction.sub(&target)?;
            Ok(d.mul(&d)?.mean_all())
        },
        MODEL_STEP,
    )
}

fn check_model_gradients(opts: &VerifyOptions) -> Outcome {
    let report = model_gradient_check(opts.seed).map_err(err)?;
    let worst = report.worst().cloned();
    match worst {
        Some(w) if w.rel_error >= MODEL_TOLERANCE => Err(format!("{} relative error {:.3e}", w.name, w.rel_error)),
        Some(w) => Ok(format!("{} parameters, worst {} at {:.3e}", report.params.len(), w.name, w.rel_error)),
        None => Err("no parameters checked".into()),
    }
}

fn random_tokens(seed: u64, tokens: usize, width: usize) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::new(&[tokens, width], (0..tokens * width).map(|_| r.random_range(-2.0..2.0)).collect()).expect("token shape")
}

fn gate_fixture(cfg: MoeConfig, seed: u64) -> Result<PatchEmbedding> {
    PatchEmbedding::new(&mut ParamStore::new(), "gate", 4, cfg, &mut rng::rng(seed))
}

fn check_gating_topk(opts: &VerifyOptions) -> Outcome {
    let cfg = MoeConfig::default();
    let emb = gate_fixture(cfg, opts.seed).map_err(err)?;
    let x = random_tokens(rng::derive(opts.seed, 1), 64, 4);
    for mode in [Mode::Train { seed: opts.seed }, Mode::Eval] {
        let (w, _) = emb.gate(&x, mode).map_err(err)?;
        for (t, row) in w.to_vec().chunks(cfg.experts).enumerate() {
            let positive = row.iter().filter(|&&v| v > 0.0).count();
            let sum: f64 = row.iter().sum();
            ensure(positive == cfg.top_k, || format!("token {t}: {positive} positive weights, expected {}", cfg.top_k))?;
            ensure((sum - 1.0).abs() <= 1e-9, || format!("token {t}: weights sum to {sum}"))?;
        }
    }
    Ok(format!("64 tokens, k={} of M={}", cfg.top_k, cfg.experts))
}

fn check_gating_full_softmax(opts: &VerifyOptions) -> Outcome {
    let cfg = MoeConfig { experts: 4, top_k: 4, ..MoeConfig::default() };
    let emb = gate_fixture(cfg, opts.seed).map_err(err)?;
    let x = random_tokens(rng::derive(opts.seed, 2), 16, 4);
    let (w, decision) = emb.gate(&x, Mode::Eval).map_err(err)?;
    for (row, logits) in w.to_vec().chunks(4).zip(&decision.logits) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (wi, l) in row.iter().zip(logits) {
            let expected = (l - max).exp() / z;
            ensure((wi - expected).abs() <= 1e-12, || format!("weight {wi} vs softmax {expected}"))?;
        }
    }
    Ok("k=M matches plain softmax".into())
}

fn check_gating_inference(opts: &VerifyOptions) -> Outcome {
    let emb = gate_fixture(MoeConfig::default(), opts.seed).map_err(err)?;
    let x = random_tokens(rng::derive(opts.seed, 3), 32, 4);
    let (a, da) = emb.gate(&x, Mode::Eval).map_err(err)?;
    let (b, _) = emb.gate(&x, Mode::Eval).map_err(err)?;
    ensure(a.to_vec() == b.to_vec(), || "inference gate weights differ between calls".into())?;
    let clean = emb.gate_mean.forward(&x).map_err(err)?.to_vec();
    let logits: Vec<f64> = da.logits.concat();
    ensure(clean == logits, || "inference logits include noise".into())?;
    let (t, _) = emb.gate(&x, Mode::Train { seed: opts.seed }).map_err(err)?;
    ensure(t.to_vec() != a.to_vec(), || "training gate shows no noise".into())?;
    Ok("noise-free and repeatable".into())
}

fn check_straight_through(opts: &VerifyOptions) -> Outcome {
    let mut r = rng::rng(rng::derive(opts.seed, 4));
    let s: Vec<f64> = (0..12).map(|_| r.random_range(0.05..0.95)).collect();
    let scores = param(&[3, 4], s.clone());
    let mask = FilterMask::from_scores(scores.clone(), 0.0).map_err(err)?;
    for v in mask.identity.to_vec() {
        ensure((v - 1.0).abs() <= 1e-12, || format!("identity forward value {v}"))?;
    }
    let g: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    mask.identity.backward_with(g.clone()).map_err(err)?;
    let grad = scores.grad().ok_or("no gradient reached the scores")?;
    for ((gi, si), got) in g.iter().zip(&s).zip(&grad) {
        let want = gi / si;
        ensure((got - want).abs() <= 1e-12 * want.abs().max(1.0), || format!("gradient {got} vs g/s {want}"))?;
    }
    Ok("forward 1, backward g/s".into())
}

fn check_replacement(opts: &VerifyOptions) -> Outcome {
    let (b, n_ch, n, d) = (2, 3, 4, 5);
    let mut r = rng::rng(rng::derive(opts.seed, 5));
    let tokens = Tensor::new(&[b, n_ch, n, d], (0..b * n_ch * n * d).map(|_| r.random_range(-1.0..1.0)).collect()).map_err(err)?;
    let protos = Tensor::new(&[b, n_ch, d], (0..b * n_ch * d).map(|_| r.random_range(-1.0..1.0)).collect()).map_err(err)?;
    let tv = tokens.to_vec();
    let pv = protos.to_vec();

    let ones = replacement::replace_tokens(&tokens, &protos, &Tensor::ones(&[b, n_ch, n])).map_err(err)?;
    ensure(ones.to_vec() == tv, || "all-ones mask changed the tokens".into())?;

    let zeros = replacement::replace_tokens(&tokens, &protos, &Tensor::zeros(&[b, n_ch, n])).map_err(err)?.to_vec();
    for row in 0..b * n_ch * n {
        let proto = &pv[(row / n) * d..(row / n + 1) * d];
        ensure(&zeros[row * d..(row + 1) * d] == proto, || format!("row {row} is not its channel prototype"))?;
    }

    let m: Vec<f64> = (0..b * n_ch * n).map(|_| f64::from(u8::from(r.random::<bool>()))).collect();
    let mixed = replacement::replace_tokens(&tokens, &protos, &Tensor::new(&[b, n_ch, n], m.clone()).map_err(err)?).map_err(err)?.to_vec();
    let mut changed = 0;
    for (row, &keep) in m.iter().enumerate() {
        let out = &mixed[row * d..(row + 1) * d];
        let want = if keep == 1.0 { &tv[row * d..(row + 1) * d] } else { &pv[(row / n) * d..(row / n + 1) * d] };
        ensure(out == want, || format!("row {row} (mask {keep}) has the wrong content"))?;
        changed += usize::from(out != &tv[row * d..(row + 1) * d]);
    }
    let masked = m.iter().filter(|&&v| v == 0.0).count();
    ensure(changed == masked, || format!("{changed} rows changed, {masked} masked"))?;
    Ok(format!("{masked} of {} rows replaced", m.len()))
}

fn check_causal_weights(opts: &VerifyOptions) -> Outcome {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { heads: 2, ..AttentionConfig::default() };
    let att = SelfAttention::new(&mut store, "a", 8, &cfg, true, &mut rng::rng(opts.seed)).map_err(err)?;
    let x = random_tokens(rng::derive(opts.seed, 6), 14, 8).reshape(&[2, 7, 8]).map_err(err)?;
    let w = att.forward(&x).map_err(err)?.weights;
    let s = 7;
    for (i, row) in w.to_vec().chunks(s).enumerate() {
        let q = i % s;
        for (k, &v) in row.iter().enumerate() {
            if k > q {
                ensure(v == 0.0, || format!("weight {v} at query {q}, key {k}"))?;
            }
        }
    }
    Ok("strict upper triangle is exactly zero".into())
}

/// Two positions replaced by the same prototype must still come out distinct
/// because their causal prefixes differ.
pub fn distinct_replaced_outputs(seed: u64) -> Result<f64> {
    let d = 8;
    let n = 4;
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { heads: 2, positional_embedding: false, layer_norm: true };
    let att = ReplacedAttention::new(&mut store, "att", d, n, &cfg, &mut rng::rng(seed))?;
    let mut r = rng::rng(rng::derive(seed, 7));
    let tokens = Tensor::new(&[1, 1, n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let protos = Tensor::new(&[1, 1, d], (0..d).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let mask = Tensor::new(&[1, 1, n], vec![1.0, 0.0, 1.0, 0.0])?;
    let replaced = replacement::replace_tokens(&tokens, &protos, &mask)?;
    let out = att.causal_attend(&replaced, &protos)?.output.to_vec();
    // sequence positions are shifted by one for the prepended prototype
    let a = &out[2 * d..3 * d];
    let b = &out[4 * d..5 * d];
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn check_causal_distinct(opts: &VerifyOptions) -> Outcome {
    let gap = distinct_replaced_outputs(opts.seed).map_err(err)?;
    ensure(gap > 1e-9, || format!("replaced tokens collapsed (max difference {gap:e})"))?;
    Ok(format!("max difference {gap:.3e}"))
}

fn sine_frame(t: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, n), |(i, c)| (i as f64 * 0.05 * (c + 1) as f64).sin() * (c + 1) as f64 + c as f64)
}

fn check_perturb_identity(opts: &VerifyOptions) -> Outcome {
    let x = sine_frame(200, 3);
    let s = opts.seed;
    ensure(perturb::inject_white_noise(&x, 0.0, 1.0, s).data == x, || "white noise at r=0".into())?;
    ensure(perturb::inject_anomalies(&x, 0.0, 12, 0.0, 2.0, s).map_err(err)?.data == x, || "anomalies at r=0".into())?;
    ensure(perturb::inject_missing(&x, 0.0, 12, s).map_err(err)?.data == x, || "missing at r=0".into())?;
    ensure(perturb::inject_distribution_shift(&x, 3, 0.0, s).map_err(err)?.data == x, || "shift at alpha=0".into())?;
    let flat = Array2::from_elem((200, 2), 4.0);
    ensure(perturb::inject_distribution_shift(&flat, 5, 5.0, s).map_err(err)?.data == flat, || "shift on constant channel".into())?;
    Ok("all four are the identity at zero strength".into())
}

fn check_perturb_counts(opts: &VerifyOptions) -> Outcome {
    let s = opts.seed;
    let x = sine_frame(100, 2);
    let p = perturb::inject_white_noise(&x, 0.1, 1.0, s);
    for c in 0..2 {
        let changed = (0..100).filter(|&i| p.data[[i, c]] != x[[i, c]]).count();
        ensure(changed == 10, || format!("white noise changed {changed} points in channel {c}"))?;
    }
    let x = sine_frame(24, 2).mapv(|v| v + 10.0);
    let p = perturb::inject_missing(&x, 0.5, 12, s).map_err(err)?;
    for c in 0..2 {
        let zeros = p.data.column(c).iter().filter(|&&v| v == 0.0).count();
        ensure(zeros == 12, || format!("missing zeroed {zeros} points in channel {c}"))?;
    }
    let p = perturb::inject_anomalies(&x, 0.5, 12, 0.0, 2.0, s).map_err(err)?;
    for c in 0..2 {
        let sigma = perturb::channel_std(x.column(c));
        let diffs: Vec<f64> = (0..24).map(|i| p.data[[i, c]] - x[[i, c]]).filter(|d| *d != 0.0).collect();
        ensure(diffs.len() == 12, || format!("anomaly touched {} points in channel {c}", diffs.len()))?;
        ensure(diffs.iter().all(|d| (d.abs() - 2.0 * sigma).abs() < 1e-9 && (d - diffs[0]).abs() < 1e-9), || {
            format!("anomaly offsets {diffs:?} are not a constant ±2σ")
        })?;
    }
    let x = sine_frame(10, 1);
    let p = perturb::inject_distribution_shift(&x, 3, 5.0, s).map_err(err)?;
    let off: Vec<f64> = (0..10).map(|i| p.data[[i, 0]] - x[[i, 0]]).collect();
    ensure(off[9] == 0.0, || "index past the last block was shifted".into())?;
    for block in [0..3, 3..6, 6..9] {
        let b = &off[block.clone()];
        ensure(b.iter().all(|v| (v - b[0]).abs() < 1e-12), || format!("block {block:?} offset not constant"))?;
    }
    Ok("floor-formula counts hold".into())
}

/// Mean and standard deviation of noise added with `r = 1, α = 1` over
/// `len` points, together with the channel's σ.
pub fn noise_moments(len: usize, seed: u64) -> (f64, f64, f64) {
    let x = Array2::from_shape_fn((len, 1), |(i, _)| (i as f64 * 0.01).sin() * 1.3);
    let p = perturb::inject_white_noise(&x, 1.0, 1.0, seed);
    let noise: Vec<f64> = (0..len).map(|i| p.data[[i, 0]] - x[[i, 0]]).collect();
    let n = len as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, std, perturb::channel_std(x.column(0)))
}

fn check_perturb_moments(opts: &VerifyOptions) -> Outcome {
    let (mean, std, sigma) = noise_moments(100_000, opts.seed);
    ensure(mean.abs() <= 0.02, || format!("noise mean {mean}"))?;
    ensure((std - sigma).abs() <= 0.02, || format!("noise std {std} vs sigma {sigma}"))?;
    Ok(format!("mean {mean:.4}, std {std:.4} vs sigma {sigma:.4}"))
}

fn check_perturb_single_shift(opts: &VerifyOptions) -> Outcome {
    let x = sine_frame(300, 3);
    let p = perturb::inject_distribution_shift(&x, 1, 5.0, opts.seed).map_err(err)?;
    for c in 0..3 {
        let sigma = perturb::channel_std(x.column(c));
        let delta = p.data[[0, c]] - x[[0, c]];
        ensure(delta.abs() <= 5.0 * sigma, || format!("offset {delta} exceeds 5σ"))?;
        for i in 1..300 {
            let before = x[[i, c]] - x[[0, c]];
            let after = p.data[[i, c]] - p.data[[0, c]];
            ensure((before - after).abs() < 1e-9, || format!("pairwise difference changed at {i} in channel {c}"))?;
        }
    }
    Ok("single block preserves within-channel differences".into())
}

fn check_perturb_grids(_: &VerifyOptions) -> Outcome {
    let d = PerturbationSpec::default();
    let ratio_grid = vec![0.0, 0.01, 0.05, 0.10, 0.15];
    for kind in [PerturbKind::WhiteNoise, PerturbKind::Anomalies, PerturbKind::Missing] {
        ensure(kind.default_grid() == ratio_grid, || format!("{kind} grid"))?;
    }
    ensure(PerturbKind::DistributionShift.default_grid() == vec![0.0, 1.0, 3.0, 5.0, 10.0], || "shift grid".into())?;
    ensure(d.l_cont == 12 && d.l_miss == 12, || "segment lengths".into())?;
    ensure(d.alpha_anom == 2.0 && d.r_out == 0.005, || "anomaly defaults".into())?;
    ensure(d.alpha_noise == 1.0 && d.alpha_shift == 5.0, || "scale defaults".into())?;
    Ok("defaults and grids as specified".into())
}

fn check_sweep_determinism(opts: &VerifyOptions) -> Outcome {
    let x = sine_frame(120, 2);
    let spec = PerturbationSpec { seed: opts.seed, ..PerturbationSpec::new(PerturbKind::Missing) };
    let grid = PerturbKind::Missing.default_grid();
    let a = perturb::sweep(&x, &spec, &grid).map_err(err)?;
    let b = perturb::sweep(&x, &spec, &grid).map_err(err)?;
    ensure(a == b, || "sweep is not repeatable".into())?;
    ensure(a.len() == grid.len() && a[0].1.data == x, || "level 0 differs from the input".into())?;
    Ok(format!("{} levels", a.len()))
}

fn check_adam(_: &VerifyOptions) -> Outcome {
    let x = param(&[], vec![1.0]);
    let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, std::slice::from_ref(&x));
    x.mul(&x).map_err(err)?.sum_all().backward().map_err(err)?;
    adam.step(std::slice::from_ref(&x)).map_err(err)?;
    let v = x.item();
    ensure((v - 0.9).abs() < 1e-6, || format!("after one step x = {v}"))?;
    Ok("first step moves by lr".into())
}

fn check_metrics(_: &VerifyOptions) -> Outcome {
    let e = |r: Result<f64>| r.map_err(err);
    ensure(e(metrics::mse(&[2.0], &[0.0]))? == 4.0, || "mse".into())?;
    ensure(e(metrics::mae(&[2.0], &[0.0]))? == 2.0, || "mae".into())?;
    ensure(e(metrics::msmape(&[1.0, 3.0], &[1.0, 3.0], 0.1))? == 0.0, || "msmape".into())?;
    let mase = metrics::mase(&[1.5], &[1.0], &[1.0, 2.0, 3.0, 4.0], 1).map_err(err)?;
    ensure(mase == Some(0.5), || format!("mase {mase:?}"))?;
    Ok("hand fixtures".into())
}

type CheckFn = fn(&VerifyOptions) -> Outcome;

const CHECKS: [(&str, CheckFn); 16] = [
    ("model:gradients", check_model_gradients),
    ("gating:top-k", check_gating_topk),
    ("gating:full-softmax", check_gating_full_softmax),
    ("gating:inference", check_gating_inference),
    ("straight-through", check_straight_through),
    ("replacement", check_replacement),
    ("causality:weights", check_causal_weights),
    ("causality:distinct", check_causal_distinct),
    ("perturb:identity", check_perturb_identity),
    ("perturb:counts", check_perturb_counts),
    ("perturb:moments", check_perturb_moments),
    ("perturb:single-shift", check_perturb_single_shift),
    ("perturb:grids", check_perturb_grids),
    ("perturb:sweep", check_sweep_determinism),
    ("adam", check_adam),
    ("metrics", check_metrics),
];

fn timed(name: String, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail, elapsed },
        Err(detail) => CheckResult { name, passed: false, detail, elapsed },
    }
}

/// Runs every check. With `opts.fault` set, that op's backward rule is
/// corrupted for the duration of the run.
pub fn run(opts: &VerifyOptions) -> VerifyReport {
    let _guard = opts.fault.map(fault::inject);
    let mut report = VerifyReport::default();
    for op in Op::DIFFERENTIABLE {
        report.checks.push(timed(format!("grad:{op}"), || {
            let e = op_gradient_error(op, opts.seed).map_err(err)?;
            ensure(e < OP_TOLERANCE, || format!("relative error {e:.3e}"))?;
            Ok(format!("relative error {e:.3e}"))
        }));
    }
    for (name, check) in CHECKS {
        report.checks.push(timed(name.to_string(), || check(opts)));
    }
    report
}
