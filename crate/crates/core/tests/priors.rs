mod common;

use bitta_core::net::Network;
use bitta_core::priors::{prior_loss, prior_loss_value, scl_value, tcl_value, PriorConfig};
use bitta_core::tensor::Tensor;
use common::{general_position_params, rng, stream_pair, tiny_config};
use proptest::prelude::*;
use rand::Rng;

fn tcl_oracle(a: &[f64], b: &[f64], xi: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y).abs() - xi).max(0.0))
        .sum()
}

/// Straight loops over `[C, H, W]` maps.
fn scl_oracle(maps: &[Tensor], delta: usize) -> f64 {
    let mut total = 0.0;
    for m in maps {
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        if h <= delta {
            continue;
        }
        for j in 0..h - delta {
            for ch in 0..c {
                for t in 0..w {
                    let a = m.get(&[ch, j, t]).unwrap();
                    let b = m.get(&[ch, j + delta, t]).unwrap();
                    total += (a - b).abs();
                }
            }
        }
    }
    total
}

fn random_map(shape: [usize; 3], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn reverse_regions(m: &Tensor) -> Tensor {
    let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let mut out = Vec::with_capacity(m.numel());
    for ch in 0..c {
        for j in 0..h {
            for t in 0..w {
                out.push(m.get(&[ch, h - 1 - j, t]).unwrap());
            }
        }
    }
    Tensor::new(m.shape().to_vec(), out).unwrap()
}

#[test]
fn worked_cases() {
    assert_eq!(tcl_value(&[10.0, 0.0], &[0.0, 0.0], 8.0).unwrap(), 2.0);
    let map = Tensor::new(vec![1, 3, 2], vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
    assert_eq!(scl_value(std::slice::from_ref(&map), 1).unwrap(), 6.0);
    assert_eq!(scl_value(&[map], 3).unwrap(), 0.0);
    assert_eq!(
        scl_value(&[Tensor::filled(&[4, 5, 7], 0.3)], 1).unwrap(),
        0.0
    );
    assert_eq!(scl_value(&[], 1).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tcl_matches_oracle_and_is_symmetric(
        pairs in prop::collection::vec((-200.0..200.0f64, -200.0..200.0f64), 1..40),
        xi in 0.0..20.0f64,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = tcl_value(&a, &b, xi).unwrap();
        prop_assert_eq!(ab, tcl_value(&b, &a, xi).unwrap());
        prop_assert!((ab - tcl_oracle(&a, &b, xi)).abs() <= 1e-9 * (1.0 + ab));
        prop_assert_eq!(tcl_value(&a, &a, xi).unwrap(), 0.0);
    }

    #[test]
    fn scl_matches_oracle(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..6, delta in 1usize..4) {
        let maps = vec![random_map([c, h, w], seed), random_map([2, h + 1, w], seed ^ 1)];
        let got = scl_value(&maps, delta).unwrap();
        prop_assert!((got - scl_oracle(&maps, delta)).abs() < 1e-9);
    }
}

#[test]
fn scl_is_reversal_invariant_on_4x6_maps() {
    for seed in 0..200 {
        for delta in 1..4 {
            let maps = [
                random_map([1, 4, 6], seed),
                random_map([3, 4, 6], seed + 1000),
            ];
            let flipped: Vec<Tensor> = maps.iter().map(reverse_regions).collect();
            let (a, b) = (
                scl_value(&maps, delta).unwrap(),
                scl_value(&flipped, delta).unwrap(),
            );
            assert!(
                (a - b).abs() < 1e-12,
                "seed {seed} delta {delta}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn prior_loss_is_non_negative_and_zero_means_flat() {
    let cfg = tiny_config();
    let net = Network::new(cfg.clone()).unwrap();
    let priors = PriorConfig::default();
    for seed in 0..20 {
        let params = general_position_params(&cfg, seed);
        let pair = stream_pair(&cfg, seed, (seed % 9) as usize);
        let (terms, grad) = prior_loss(&net, &params, &pair, &priors).unwrap();
        assert!(terms.total >= 0.0 && terms.temporal >= 0.0 && terms.spatial >= 0.0);
        let want = priors.lambda_s * terms.spatial + priors.lambda_t * terms.temporal;
        assert!((terms.total - want).abs() <= 1e-12 * want.max(1.0));
        if terms.total == 0.0 {
            assert!(grad.iter().all(|&g| g == 0.0));
        }
        assert_eq!(
            prior_loss_value(&net, &params, &pair, &priors).unwrap(),
            terms
        );
    }
}

#[test]
fn flat_features_and_zero_shift_give_zero_loss() {
    let cfg = tiny_config();
    let net = Network::new(cfg.clone()).unwrap();
    // Zero kernels with positive biases make every feature map constant.
    let mut params = vec![0.0; cfg.param_count()];
    for seg in cfg.layout() {
        if seg.name.ends_with(".bias") {
            params[seg.offset..seg.offset + seg.len()].fill(0.3);
        }
    }
    let pair = stream_pair(&cfg, 5, 0);
    let (terms, grad) = prior_loss(&net, &params, &pair, &PriorConfig::default()).unwrap();
    assert_eq!(
        (terms.total, terms.temporal, terms.spatial),
        (0.0, 0.0, 0.0)
    );
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn zero_lambdas_give_zero_loss_and_gradient() {
    let cfg = tiny_config();
    let net = Network::new(cfg.clone()).unwrap();
    let params = general_position_params(&cfg, 3);
    let pair = stream_pair(&cfg, 3, 17);
    let off = PriorConfig {
        lambda_s: 0.0,
        lambda_t: 0.0,
        ..PriorConfig::default()
    };
    let (terms, grad) = prior_loss(&net, &params, &pair, &off).unwrap();
    assert_eq!(terms.total, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}
