use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::PretrainConfig;
use crate::adapter::norm;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::net::{init_params, ModelCheckpoint, Network, NetworkConfig};
use crate::stmap::build_window;
use crate::synth::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean absolute error of the window-mean prediction over the first and
    /// last (up to) 100 steps, measured before each step's update.
    pub first_mae: f64,
    pub last_mae: f64,
    /// Per-step absolute error, in step order.
    pub step_mae: Vec<f64>,
}

fn check_source(net: &NetworkConfig, stream: &Stream) -> Result<()> {
    if stream.data.channels() != net.channels {
        return Err(Error::ConfigMismatch(format!(
            "network expects {} channels, stream {} has {}",
            net.channels,
            stream.manifest.seed,
            stream.data.channels()
        )));
    }
    Ok(())
}

/// Supervised training on source streams: mean squared error between the
/// predicted heart-rate vector and the window's mean ground truth, SGD with
/// momentum, windows visited in a seeded shuffled order each epoch.
pub fn pretrain(
    config: &PretrainConfig,
    network: &NetworkConfig,
    sources: &[Stream],
) -> Result<(ModelCheckpoint, PretrainReport)> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Empty("source streams"));
    }
    let net = Network::new(network.clone())?;
    let w = network.window_len;
    let mut windows = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        check_source(network, s)?;
        let frames = s.data.frames();
        if frames >= w {
            windows.extend(
                (0..=frames - w)
                    .step_by(config.stride)
                    .map(|start| (i, start)),
            );
        }
    }
    if windows.is_empty() {
        return Err(Error::Empty("source windows"));
    }

    let mut params = init_params(network, config.seed)?;
    let mut buf = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step_mae = Vec::with_capacity(windows.len() * config.epochs);
    for _ in 0..config.epochs {
        windows.shuffle(&mut rng);
        for &(i, start) in &windows {
            let window = build_window(&sources[i], start, w, network.regions)?;
            let mut graph = Graph::new();
            let bound = net.bind(&mut graph, &params)?;
            let out = net.forward(&mut graph, &bound, &window)?;
            let target = graph.constant(Tensor::filled(&[w], window.gt_hr));
            let diff = graph.sub(out.hr, target)?;
            let sq = graph.mul(diff, diff)?;
            let loss = graph.mean(sq)?;
            let hr = graph.value(out.hr).data();
            let pred = hr.iter().sum::<f64>() / w as f64;
            step_mae.push((pred - window.gt_hr).abs());

            let grads = graph.backward(loss)?;
            let mut g = bound.flat_gradient(&grads);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pretraining gradient"));
            }
            if config.clip_norm > 0.0 {
                let n = norm(&g);
                if n > config.clip_norm {
                    g.iter_mut().for_each(|v| *v *= config.clip_norm / n);
                }
            }
            for ((b, p), gi) in buf.iter_mut().zip(params.iter_mut()).zip(&g) {
                *b = config.momentum * *b + gi;
                *p -= config.learning_rate * *b;
            }
        }
    }

    let head = step_mae.len().min(100);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let report = PretrainReport {
        steps: step_mae.len(),
        first_mae: mean(&step_mae[..head]),
        last_mae: mean(&step_mae[step_mae.len() - head..]),
        step_mae,
    };
    let note = format!(
        "pretrained {} epoch(s), {} steps, seed {}, sources {:?}",
        config.epochs,
        report.steps,
        config.seed,
        sources.iter().map(|s| s.manifest.seed).collect::<Vec<_>>()
    );
    Ok((
        ModelCheckpoint {
            config: network.clone(),
            params,
            note,
        },
        report,
    ))
}
