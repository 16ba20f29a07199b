//! Small convolutional heart-rate regressor.
//!
//! The window `[W, H', C]` is transposed to `[C, H', W]` (channels, regions,
//! time) and passed through a stem convolution followed by `n` blocks of
//! `conv -> relu -> avg_pool`. Each block's pooled output is exposed as a
//! latent feature map for the spatial prior. The head is a convolution whose
//! kernel spans all channels and all remaining regions, giving one scalar
//! per remaining time step; that vector is linearly resampled back to `W`
//! and mapped to bpm as `hr_offset + hr_scale * head`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::framing;
use crate::stmap::StMapWindow;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "bitta-ckpt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Temporal window length `W`.
    pub window_len: usize,
    /// Resized spatial extent `H'`.
    pub regions: usize,
    pub channels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    /// Per-block pooling factors as `(temporal, spatial)`.
    pub pool: Vec<(usize, usize)>,
    /// Odd square kernel size used by the stem and every block.
    pub kernel: usize,
    pub hr_offset: f64,
    pub hr_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            window_len: 128,
            regions: 16,
            channels: 3,
            stem_channels: 8,
            block_channels: vec![8, 16, 32, 32],
            pool: vec![(2, 2); 4],
            kernel: 3,
            hr_offset: 80.0,
            hr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkConfig {
    pub fn full_scale() -> Self {
        NetworkConfig {
            window_len: 256,
            regions: 64,
            ..Self::default()
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.block_channels.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.pool.len() != self.block_channels.len() {
            return bad(format!(
                "{} pooling factors for {} blocks",
                self.pool.len(),
                self.block_channels.len()
            ));
        }
        if self.window_len == 0
            || self.regions == 0
            || self.channels == 0
            || self.stem_channels == 0
        {
            return bad("input extents and stem channels must be positive".into());
        }
        if self.block_channels.contains(&0) {
            return bad("block channels must be positive".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(self.hr_offset.is_finite() && self.hr_scale.is_finite()) {
            return bad("hr_offset and hr_scale must be finite".into());
        }
        let (mut w, mut h) = (self.window_len, self.regions);
        for (i, &(pw, ph)) in self.pool.iter().enumerate() {
            if pw == 0 || ph == 0 || w < pw || h < ph {
                return bad(format!(
                    "block {i}: pooling ({pw}, {ph}) on extents ({w}, {h}) would leave an empty axis"
                ));
            }
            w /= pw;
            h /= ph;
        }
        Ok(())
    }

    /// `(temporal, spatial)` extents of every block's feature map.
    pub fn feature_extents(&self) -> Vec<(usize, usize)> {
        let (mut w, mut h) = (self.window_len, self.regions);
        self.pool
            .iter()
            .map(|&(pw, ph)| {
                w /= pw;
                h /= ph;
                (w, h)
            })
            .collect()
    }

    pub fn layout(&self) -> Vec<Segment> {
        let k = self.kernel;
        let mut shapes = vec![
            (
                "stem.weight".to_string(),
                vec![self.stem_channels, self.channels, k, k],
            ),
            ("stem.bias".to_string(), vec![self.stem_channels]),
        ];
        let mut c_in = self.stem_channels;
        for (i, &c_out) in self.block_channels.iter().enumerate() {
            shapes.push((format!("block{i}.weight"), vec![c_out, c_in, k, k]));
            shapes.push((format!("block{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        let (_, h_last) = *self.feature_extents().last().expect("validated");
        shapes.push(("head.weight".to_string(), vec![1, c_in, h_last, 1]));
        shapes.push(("head.bias".to_string(), vec![1]));

        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name,
                    shape,
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }
}

/// Flat parameter vector laid out per [`NetworkConfig::layout`].
pub type Params = Vec<f64>;

/// Fan-in scaled uniform initialization: convolution weights are drawn from
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, head weights from
/// `U(-1 / sqrt(fan_in), 1 / sqrt(fan_in))`, biases start at zero.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(config.param_count());
    for seg in config.layout() {
        if seg.name.ends_with(".bias") {
            params.extend(std::iter::repeat_n(0.0, seg.len()));
            continue;
        }
        let fan_in: usize = seg.shape[1..].iter().product();
        let bound = if seg.name.starts_with("head") {
            1.0 / (fan_in as f64).sqrt()
        } else {
            (6.0 / fan_in as f64).sqrt()
        };
        params.extend((0..seg.len()).map(|_| rng.random_range(-bound..bound)));
    }
    Ok(params)
}

/// Parameter leaves of one graph, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Flattens the gradients of every parameter leaf in layout order.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.nodes
            .iter()
            .flat_map(|&id| {
                grads
                    .get(id)
                    .expect("leaves always receive a gradient")
                    .data()
                    .to_vec()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Length-`W` heart-rate vector, bpm.
    pub hr: NodeId,
    /// One `[C_i, H_i, W_i]` map per block.
    pub features: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layout: Vec<Segment>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Network { config, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(Segment::len).sum()
    }

    pub fn bind(&self, graph: &mut Graph, params: &[f64]) -> Result<BoundParams> {
        if params.len() != self.param_count() {
            return Err(Error::CountMismatch {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let nodes = self
            .layout
            .iter()
            .map(|seg| {
                let values = params[seg.offset..seg.offset + seg.len()].to_vec();
                graph.leaf(Tensor::from_parts(seg.shape.clone(), values))
            })
            .collect();
        Ok(BoundParams { nodes })
    }

    /// `[W, H', C]` window as a `[C, H', W]` constant.
    fn input(&self, graph: &mut Graph, window: &StMapWindow) -> Result<NodeId> {
        let cfg = &self.config;
        let expected = [cfg.window_len, cfg.regions, cfg.channels];
        if window.values.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: expected.to_vec(),
                rhs: window.values.shape().to_vec(),
            });
        }
        let (w, h, c) = (cfg.window_len, cfg.regions, cfg.channels);
        let src = window.values.data();
        let mut chw = vec![0.0; src.len()];
        for t in 0..w {
            for r in 0..h {
                for ch in 0..c {
                    chw[(ch * h + r) * w + t] = src[(t * h + r) * c + ch];
                }
            }
        }
        Ok(graph.constant(Tensor::from_parts(vec![c, h, w], chw)))
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        window: &StMapWindow,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let pad = cfg.kernel / 2;
        let p = &params.nodes;
        let x = self.input(graph, window)?;
        let stem = graph.conv2d(x, p[0], p[1], (1, 1), (pad, pad))?;
        let mut x = graph.relu(stem)?;
        let mut features = Vec::with_capacity(cfg.n_blocks());
        for (i, &(pool_t, pool_s)) in cfg.pool.iter().enumerate() {
            let conv = graph.conv2d(x, p[2 + 2 * i], p[3 + 2 * i], (1, 1), (pad, pad))?;
            let act = graph.relu(conv)?;
            x = graph.avg_pool(act, (pool_s, pool_t))?;
            features.push(x);
        }
        let n = p.len();
        let head = graph.conv2d(x, p[n - 2], p[n - 1], (1, 1), (0, 0))?;
        let steps = graph.value(head).numel();
        let head = graph.reshape(head, &[steps])?;
        let head = graph.interp1d(head, cfg.window_len)?;
        let scaled = graph.scale(head, cfg.hr_scale)?;
        let offset = graph.constant(Tensor::filled(&[cfg.window_len], cfg.hr_offset));
        let hr = graph.add(scaled, offset)?;
        Ok(ForwardOutput { hr, features })
    }

    /// Heart-rate vector for one window, without recording gradients for reuse.
    pub fn predict(&self, params: &[f64], window: &StMapWindow) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, params)?;
        let out = self.forward(&mut graph, &bound, window)?;
        Ok(graph.value(out.hr).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: NetworkConfig,
    pub params: Params,
    pub note: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    config: NetworkConfig,
    segments: Vec<Segment>,
    param_count: usize,
    note: String,
}

pub fn save_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<()> {
    checkpoint.config.validate()?;
    if checkpoint.params.len() != checkpoint.config.param_count() {
        return Err(Error::CountMismatch {
            expected: checkpoint.config.param_count(),
            found: checkpoint.params.len(),
        });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: checkpoint.config.clone(),
        segments: checkpoint.config.layout(),
        param_count: checkpoint.params.len(),
        note: checkpoint.note.clone(),
    };
    framing::write(path, &header, &framing::encode_f64(&checkpoint.params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let (header, payload): (CheckpointHeader, _) = framing::read(path, CHECKPOINT_FORMAT)?;
    if payload.len() % 8 != 0 || payload.len() / 8 != header.param_count {
        return Err(Error::CountMismatch {
            expected: header.param_count,
            found: payload.len() / 8,
        });
    }
    header.config.validate()?;
    let implied = header.config.param_count();
    if implied != header.param_count {
        return Err(Error::ConfigMismatch(format!(
            "config implies {implied} parameters, payload holds {}",
            header.param_count
        )));
    }
    Ok(ModelCheckpoint {
        config: header.config,
        params: framing::decode_f64(&payload),
        note: header.note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stmap::WindowOrigin;

    fn window(cfg: &NetworkConfig, seed: u64) -> StMapWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.window_len * cfg.regions * cfg.channels;
        StMapWindow {
            values: Tensor::new(
                vec![cfg.window_len, cfg.regions, cfg.channels],
                (0..n).map(|_| rng.random::<f64>()).collect(),
            )
            .unwrap(),
            origin: WindowOrigin {
                stream: 0,
                start: 0,
            },
            gt_hr: 70.0,
        }
    }

    #[test]
    fn default_param_count_by_hand() {
        // stem 3*8*9+8, blocks 8*8*9+8, 8*16*9+16, 16*32*9+32, 32*32*9+32,
        // head 32*1*1+1.
        let expected = 224 + 584 + 1168 + 4640 + 9248 + 33;
        assert_eq!(NetworkConfig::default().param_count(), expected);
        assert_eq!(expected, 15_897);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = NetworkConfig::default();
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        assert_ne!(a, init_params(&cfg, 2).unwrap());
        assert_eq!(a.len(), cfg.param_count());
    }

    #[test]
    fn default_extents_halve() {
        let cfg = NetworkConfig::default();
        let net = Network::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g, &params).unwrap();
        let out = net.forward(&mut g, &bound, &window(&cfg, 0)).unwrap();
        assert_eq!(g.value(out.hr).shape(), &[128]);
        let temporal: Vec<usize> = out
            .features
            .iter()
            .map(|&f| g.value(f).shape()[2])
            .collect();
        assert_eq!(temporal, vec![64, 32, 16, 8]);
        let spatial: Vec<usize> = out
            .features
            .iter()
            .map(|&f| g.value(f).shape()[1])
            .collect();
        assert_eq!(spatial, vec![8, 4, 2, 1]);
        assert_eq!(
            cfg.feature_extents(),
            vec![(64, 8), (32, 4), (16, 2), (8, 1)]
        );
    }

    #[test]
    fn zero_params_give_flat_output() {
        let cfg = NetworkConfig::default();
        let net = Network::new(cfg.clone()).unwrap();
        let hr = net
            .predict(&vec![0.0; cfg.param_count()], &window(&cfg, 3))
            .unwrap();
        assert!(hr.iter().all(|&v| v == cfg.hr_offset));
    }

    #[test]
    fn rejects_wrong_window_shape() {
        let cfg = NetworkConfig::default();
        let net = Network::new(cfg.clone()).unwrap();
        let small = NetworkConfig {
            window_len: 64,
            ..cfg.clone()
        };
        let params = init_params(&cfg, 0).unwrap();
        assert!(matches!(
            net.predict(&params, &window(&small, 0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pooling_below_one_rejected() {
        let cfg = NetworkConfig {
            regions: 8,
            ..NetworkConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::full_scale().validate().is_ok());
    }
}
