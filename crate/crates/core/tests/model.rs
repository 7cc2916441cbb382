use ndarray::{Array2, Array3};
use rand::Rng;
use robustcast_core::data::{windows, TimeSeriesFrame};
use robustcast_core::embedding::{pool_channels, MoeConfig, PatchEmbedding, SeriesEmbedding};
use robustcast_core::nn::{LayerNorm, Mode, ParamStore};
use robustcast_core::predictor::{evaluate_loss, train, ForwardOptions, Model, ModelConfig, TrainOptions};
use robustcast_core::replacement::{AttentionConfig, SelfAttention};
use robustcast_core::verify::{self, toy_config, MODEL_TOLERANCE};
use robustcast_core::{rng, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::new(shape, (0..shape.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let report = verify::model_gradient_check(11).unwrap();
    assert!(report.passes(MODEL_TOLERANCE), "{:?}", report.worst());
    assert!(report.params.iter().any(|p| p.name == "filter.scorer.weight" && p.analytic_norm > 0.0));
}

#[test]
fn moe_matches_enumeration() {
    // N=1, n=2, p=2, d=2, M=2, k=2: with every expert selected the embedding
    // is shared(x) + Σ softmax(gate(x))_i · expert_i(x).
    let cfg = MoeConfig { hidden: 2, experts: 2, top_k: 2, shared_experts: 1, noisy_gating: true };
    let emb = PatchEmbedding::new(&mut ParamStore::new(), "e", 2, cfg, &mut rng::rng(4)).unwrap();
    let x = Tensor::new(&[2, 2], vec![0.3, -1.2, 0.8, 0.5]).unwrap();
    let (out, _) = emb.forward(&x, Mode::Eval).unwrap();
    let lin = |w: &[f64], b: &[f64], row: &[f64], outs: usize| -> Vec<f64> {
        (0..outs).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * outs + j]).sum::<f64>()).collect()
    };
    let xv = x.to_vec();
    let mut expected = Vec::new();
    for row in xv.chunks(2) {
        let logits = lin(&emb.gate_mean.weight.to_vec(), &emb.gate_mean.bias.to_vec(), row, 2);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut acc = lin(&emb.shared[0].weight.to_vec(), &emb.shared[0].bias.to_vec(), row, 2);
        for (i, e) in emb.routed.iter().enumerate() {
            let y = lin(&e.weight.to_vec(), &e.bias.to_vec(), row, 2);
            for j in 0..2 {
                acc[j] += logits[i].exp() / z * y[j];
            }
        }
        expected.extend(acc);
    }
    assert!(close(&out.to_vec(), &expected, 1e-12), "{:?} vs {expected:?}", out.to_vec());
}

#[test]
fn stochastic_pool_mean_matches_expectation() {
    let act = random(&[1, 3, 2], 8).mul_scalar(2.0);
    let expected = pool_channels(&act, Mode::Eval).unwrap().to_vec();
    let p = act.softmax(1).unwrap().to_vec();
    let a = act.to_vec();
    let draws = 10_000;
    let mut sum = [0.0; 2];
    for s in 0..draws {
        let v = pool_channels(&act, Mode::Train { seed: s }).unwrap().to_vec();
        sum[0] += v[0];
        sum[1] += v[1];
    }
    for j in 0..2 {
        let mean = sum[j] / draws as f64;
        let second: f64 = (0..3).map(|c| p[c * 2 + j] * a[c * 2 + j].powi(2)).sum();
        let se = ((second - expected[j].powi(2)) / draws as f64).sqrt();
        assert!((mean - expected[j]).abs() < 3.0 * se, "position {j}: {mean} vs {} (se {se})", expected[j]);
    }
}

#[test]
fn prototypes_follow_channel_permutation() {
    let emb = SeriesEmbedding::new(&mut ParamStore::new(), "s", 6, 4, 3, &mut rng::rng(2)).unwrap();
    let x = random(&[1, 3, 6], 5);
    let xv = x.to_vec();
    let perm = [2, 0, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&c| xv[c * 6..(c + 1) * 6].to_vec()).collect();
    let a = emb.forward(&x, Mode::Eval).unwrap();
    let b = emb.forward(&Tensor::new(&[1, 3, 6], permuted).unwrap(), Mode::Eval).unwrap();
    assert!(close(&a.core.to_vec(), &b.core.to_vec(), 1e-12));
    let pa = a.prototypes.to_vec();
    let pb = b.prototypes.to_vec();
    for (i, &c) in perm.iter().enumerate() {
        assert!(close(&pb[i * 4..(i + 1) * 4], &pa[c * 4..(c + 1) * 4], 1e-12));
    }
}

#[test]
fn first_position_sees_only_itself() {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { heads: 2, ..AttentionConfig::default() };
    let att = SelfAttention::new(&mut store, "a", 4, &cfg, true, &mut rng::rng(1)).unwrap();
    let x = random(&[1, 5, 4], 3);
    let out = att.forward(&x).unwrap().output.to_vec();
    let x0 = x.slice(1, 0, 1).unwrap();
    let ln: &LayerNorm = att.norm.as_ref().unwrap();
    let direct = x0.add(&att.out.forward(&att.value.forward(&ln.forward(&x0).unwrap()).unwrap()).unwrap()).unwrap();
    assert!(close(&out[..4], &direct.to_vec(), 1e-12));
}

#[test]
fn identical_replaced_tokens_stay_distinct() {
    assert!(verify::distinct_replaced_outputs(0).unwrap() > 1e-9);
}

#[test]
fn refinement_is_permutation_equivariant_without_positions() {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { heads: 2, positional_embedding: false, layer_norm: true };
    let att = SelfAttention::new(&mut store, "r", 4, &cfg, false, &mut rng::rng(6)).unwrap();
    let x = random(&[1, 4, 4], 7);
    let xv = x.to_vec();
    let perm = [3, 1, 0, 2];
    let px: Vec<f64> = perm.iter().flat_map(|&i| xv[i * 4..(i + 1) * 4].to_vec()).collect();
    let a = att.forward(&x).unwrap().output.to_vec();
    let b = att.forward(&Tensor::new(&[1, 4, 4], px).unwrap()).unwrap().output.to_vec();
    for (i, &src) in perm.iter().enumerate() {
        assert!(close(&b[i * 4..(i + 1) * 4], &a[src * 4..(src + 1) * 4], 1e-12));
    }
}

#[test]
fn prediction_shape_for_benchmark_sizes() {
    let model = Model::new(ModelConfig { lookback: 96, horizon: 96, ..ModelConfig::default() }).unwrap();
    let x = Array2::from_shape_fn((7, 96), |(c, t)| ((c * 96 + t) as f64 * 0.1).sin());
    let y = model.predict(&x).unwrap();
    assert_eq!(y.dim(), (7, 96));
    assert_eq!(y, model.predict(&x).unwrap());
}

#[test]
fn no_filtering_at_tau_zero_equals_forced_keep() {
    let model = Model::new(toy_config(0.0)).unwrap();
    let x = Array3::from_shape_fn((2, 3, 16), |(b, c, t)| ((b + 2 * c + t) as f64 * 0.4).cos());
    let a = model.forward(&x, ForwardOptions::eval()).unwrap();
    let b = model.forward(&x, ForwardOptions { keep_all: true, ..ForwardOptions::eval() }).unwrap();
    assert_eq!(a.prediction.to_vec(), b.prediction.to_vec());
}

#[test]
fn prediction_scales_with_input() {
    // Normalization makes the network see the same standardized window, so
    // an affine change of the input shows up affinely in the output.
    let model = Model::new(toy_config(0.5)).unwrap();
    let x = Array2::from_shape_fn((2, 16), |(c, t)| (t as f64 * 0.3 + c as f64).sin());
    let base = model.predict(&x).unwrap();
    let scaled = model.predict(&x.mapv(|v| 10.0 * v + 3.0)).unwrap();
    for (a, b) in base.iter().zip(scaled.iter()) {
        assert!((10.0 * a + 3.0 - b).abs() < 1e-3 * (1.0 + b.abs()), "{a} {b}");
    }
}

fn sine_frame(len: usize) -> TimeSeriesFrame {
    let values = Array2::from_shape_fn((1, len), |(_, t)| (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin());
    TimeSeriesFrame::new(vec!["s".into()], values).unwrap()
}

#[test]
fn training_is_reproducible_and_learns() {
    let frame = sine_frame(600);
    let tr = windows(&frame.slice_time(0, 400), 32, 8, 1);
    let va = windows(&frame.slice_time(400, 600), 32, 8, 1);
    let cfg = ModelConfig { lookback: 32, horizon: 8, patch_len: 8, hidden: 16, reduced: 8, pool_dim: 8, experts: 4, seed: 2, ..ModelConfig::default() };
    let opts = TrainOptions { epochs: 6, batch_size: 32, seed: 5, ..TrainOptions::default() };
    let a = Model::new(cfg.clone()).unwrap();
    let b = Model::new(cfg).unwrap();
    let before = evaluate_loss(&a, &va, 64).unwrap();
    let ra = train(&a, &tr, &va, &opts).unwrap();
    let rb = train(&b, &tr, &va, &opts).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.store.snapshot(), b.store.snapshot());
    assert!(evaluate_loss(&a, &va, 64).unwrap() < before / 2.0);
}

#[test]
fn early_stopping_restores_best() {
    let frame = sine_frame(300);
    let tr = windows(&frame.slice_time(0, 200), 32, 8, 4);
    let va = windows(&frame.slice_time(200, 300), 32, 8, 4);
    let cfg = ModelConfig { lookback: 32, horizon: 8, patch_len: 8, hidden: 8, reduced: 4, pool_dim: 4, experts: 2, top_k: 1, heads: 2, ..ModelConfig::default() };
    let model = Model::new(cfg).unwrap();
    let opts = TrainOptions { epochs: 40, lr: 0.05, patience: Some(2), ..TrainOptions::default() };
    let report = train(&model, &tr, &va, &opts).unwrap();
    let best = report.best_epoch.unwrap();
    let best_val = report.trace[best].val_loss.unwrap();
    assert!((evaluate_loss(&model, &va, 64).unwrap() - best_val).abs() < 1e-12);
    if report.stopped_early {
        assert_eq!(report.trace.len(), best + 3);
    }
}
