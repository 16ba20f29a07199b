#![allow(dead_code)]

use bitta_core::adapter::{AdapterConfig, Evaluation, Objective};
use bitta_core::net::{init_params, NetworkConfig};
use bitta_core::stmap::{pair_with_delta, StMapWindow, WindowOrigin, WindowPair};
use bitta_core::synth::{generate_stream, Stream, StreamParams};
use bitta_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smallest config with the full block structure: stem, four blocks, head.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        window_len: 16,
        regions: 16,
        channels: 3,
        stem_channels: 2,
        block_channels: vec![2, 2, 2, 2],
        // A zero offset keeps loss values near the gradient scale, so
        // finite differences are not swamped by rounding.
        hr_offset: 0.0,
        ..NetworkConfig::default()
    }
}

/// Initialized parameters with every bias nudged off zero, so that no ReLU
/// pre-activation sits exactly on the kink.
pub fn general_position_params(cfg: &NetworkConfig, seed: u64) -> Vec<f64> {
    let mut params = init_params(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for seg in cfg.layout() {
        if seg.name.ends_with(".bias") {
            for p in &mut params[seg.offset..seg.offset + seg.len()] {
                *p = r.random_range(-0.2..0.2);
            }
        }
    }
    params
}

pub fn random_window(cfg: &NetworkConfig, seed: u64) -> StMapWindow {
    let mut r = rng(seed);
    let n = cfg.window_len * cfg.regions * cfg.channels;
    StMapWindow {
        values: Tensor::new(
            vec![cfg.window_len, cfg.regions, cfg.channels],
            (0..n).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap(),
        origin: WindowOrigin {
            stream: seed,
            start: 0,
        },
        gt_hr: 70.0,
    }
}

pub fn small_stream(frames: usize, seed: u64) -> Stream {
    let params = StreamParams {
        duration_frames: frames,
        noise_sigma: 0.05,
        ..StreamParams::default()
    };
    generate_stream(&params, seed).unwrap()
}

/// Window pair cut from a generated stream, sized for `cfg`.
pub fn stream_pair(cfg: &NetworkConfig, seed: u64, delta: usize) -> WindowPair {
    let stream = small_stream(cfg.window_len + 80, seed);
    pair_with_delta(&stream, 60, cfg.window_len, cfg.regions, delta).unwrap()
}

/// Objective with gradient `a * (w - c_t) + s_t` and a scripted loss value
/// per instance. Both the adapter and [`reference_run`] see the same script.
pub struct Script {
    pub a: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub shifts: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

impl Script {
    pub fn random(dim: usize, steps: usize, seed: u64) -> Script {
        let mut r = rng(seed);
        let mut vecs = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..steps)
                .map(|_| (0..dim).map(|_| r.random_range(lo..hi)).collect())
                .collect()
        };
        let centers = vecs(-1.0, 1.0);
        let shifts = vecs(-3.0, 3.0);
        let mut r = rng(seed ^ 0xabc);
        Script {
            a: (0..dim).map(|_| r.random_range(0.1..2.0)).collect(),
            centers,
            shifts,
            // Spans the regimes where the trend weight 1/|L| is large, near
            // one, and small, plus exact zeros that hit the divisor floor.
            losses: (0..steps)
                .map(|i| match i % 7 {
                    0 => 0.0,
                    1 => r.random_range(1e-4..1e-2),
                    2 => r.random_range(5.0..50.0),
                    _ => r.random_range(0.05..2.0),
                })
                .collect(),
        }
    }

    pub fn grad(&self, step: usize, w: &[f64]) -> Vec<f64> {
        (0..w.len())
            .map(|i| self.a[i] * (w[i] - self.centers[step][i]) + self.shifts[step][i])
            .collect()
    }
}

/// The script at one instance, as seen by the adapter.
pub struct ScriptStep<'a> {
    pub script: &'a Script,
    pub step: usize,
}

impl Objective for ScriptStep<'_> {
    type Aux = ();

    fn evaluate(&mut self, params: &[f64]) -> bitta_core::Result<Evaluation<()>> {
        Ok(Evaluation {
            loss: self.script.losses[self.step],
            grad: self.script.grad(self.step, params),
            aux: (),
        })
    }
}

/// Straight-line scalar reimplementation of one adapter run: sharpness-aware
/// probe, loss-weighted trend, projection/backtracking on oscillation,
/// tanh anneal, SGD with momentum. Returns the parameters after each step.
pub fn reference_run(
    script: &Script,
    w0: &[f64],
    cfg: &AdapterConfig,
    steps: usize,
) -> Vec<Vec<f64>> {
    let n = w0.len();
    let mut w = w0.to_vec();
    let mut trend = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = (step + 1) as f64;
        let loss = script.losses[step];
        let mut g = script.grad(step, &w);
        if cfg.use_pa {
            let mut sq = 0.0;
            for gi in &g {
                sq += gi * gi;
            }
            let gn = sq.sqrt();
            if gn > 0.0 {
                let mut probe = w.clone();
                for i in 0..n {
                    probe[i] += cfg.rho * g[i] / gn;
                }
                g = script.grad(step, &probe);
            } else {
                g = vec![0.0; n];
            }
        }
        if g.iter().all(|&v| v == 0.0) {
            history.push(w.clone());
            continue;
        }
        let mut u = g.clone();
        if cfg.use_rs {
            let inv = 1.0 / loss.abs().max(1e-8);
            for i in 0..n {
                trend[i] = (trend[i] + inv * g[i]) / (1.0 + inv);
            }
            let lambda = (2.0 * t / cfg.omega).tanh();
            let mut tt = 0.0;
            let mut gt = 0.0;
            for i in 0..n {
                tt += trend[i] * trend[i];
                gt += g[i] * trend[i];
            }
            for i in 0..n {
                u[i] = if tt == 0.0 {
                    (1.0 - lambda) * g[i]
                } else if gt < 0.0 {
                    cfg.backtrack * (gt / tt * trend[i])
                } else {
                    (1.0 - lambda) * g[i] + lambda * trend[i]
                };
            }
        }
        for i in 0..n {
            buf[i] = cfg.momentum * buf[i] + u[i];
            w[i] -= cfg.learning_rate * buf[i];
        }
        history.push(w.clone());
    }
    history
}
