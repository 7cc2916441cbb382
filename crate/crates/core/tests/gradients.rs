use proptest::prelude::*;
use robustcast_core::tensor::{fault, Op};
use robustcast_core::verify::{op_gradient_error, vjp_error, OP_TOLERANCE};
use robustcast_core::{rng, Tensor};

fn values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| {
            let v: f64 = r.random_range(lo..hi);
            if r.random::<bool>() { v } else { -v }
        })
        .collect()
}

fn param(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::parameter(shape, values(seed, shape.iter().product(), lo, hi)).unwrap()
}

#[test]
fn every_op_passes_its_probe() {
    for op in Op::DIFFERENTIABLE {
        let e = op_gradient_error(op, 3).unwrap();
        assert!(e < OP_TOLERANCE, "{op}: {e:e}");
    }
}

#[test]
fn every_injected_fault_is_caught() {
    for op in Op::DIFFERENTIABLE {
        let _g = fault::inject(op);
        let e = op_gradient_error(op, 3).unwrap();
        assert!(e > 0.1, "{op}: fault went unnoticed ({e:e})");
    }
}

#[test]
fn matmul_product_gradient() {
    let a = param(&[4, 5], 1, 0.1, 2.0);
    let b = param(&[5, 3], 2, 0.1, 2.0);
    let e = vjp_error(&[a, b], |t| t[0].matmul(&t[1]), 9, 1e-6).unwrap();
    assert!(e < 1e-6, "{e:e}");
}

#[test]
fn sigmoid_of_matmul_gradient() {
    let a = param(&[3, 4], 4, 0.1, 1.0);
    let b = param(&[4, 2], 5, 0.1, 1.0);
    let e = vjp_error(&[a, b], |t| Ok(t[0].matmul(&t[1])?.sigmoid()), 10, 1e-6).unwrap();
    assert!(e < 1e-5, "{e:e}");
}

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=3, 1..=3).prop_filter("at most 6 elements", |s| s.iter().product::<usize>() <= 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_ops(s in shape(), seed in 0u64..1000, which in 0usize..8) {
        let x = param(&s, seed, 0.2, 1.5);
        let y = param(&s, seed + 1, 0.5, 1.5);
        let e = vjp_error(&[x, y], |t| match which {
            0 => t[0].add(&t[1]),
            1 => t[0].sub(&t[1]),
            2 => t[0].mul(&t[1]),
            3 => t[0].div(&t[1]),
            4 => Ok(t[0].exp().mul(&t[1])?),
            5 => Ok(t[0].gelu().add(&t[1].sigmoid())?),
            6 => Ok(t[0].abs().add(&t[1].abs().sqrt())?),
            _ => Ok(t[0].relu().mul(&t[1].neg())?),
        }, seed, 1e-6).unwrap();
        prop_assert!(e < 1e-4, "{}", e);
    }

    #[test]
    fn reductions(s in shape(), seed in 0u64..1000, which in 0usize..5) {
        let x = param(&s, seed, 0.2, 1.5);
        let axis = (seed as usize) % s.len();
        let e = vjp_error(&[x], |t| match which {
            0 => t[0].sum(axis, true),
            1 => t[0].mean(axis, false),
            2 => t[0].var(axis, true),
            3 => t[0].softmax(axis),
            _ => Ok(t[0].sum_all()),
        }, seed, 1e-6).unwrap();
        prop_assert!(e < 1e-4, "{}", e);
    }

    #[test]
    fn batched_matmul(b in 1usize..=2, m in 1usize..=3, k in 1usize..=3, n in 1usize..=2, seed in 0u64..1000) {
        let x = param(&[b, m, k], seed, 0.1, 1.0);
        let y = param(&[k, n], seed + 7, 0.1, 1.0);
        let e = vjp_error(&[x, y], |t| t[0].matmul(&t[1]), seed, 1e-6).unwrap();
        prop_assert!(e < 1e-4, "{}", e);
    }
}
