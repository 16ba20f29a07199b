use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, TtaConfig};
use super::metrics::{metrics, trailing_len, Metrics};
use crate::adapter::{AdapterConfig, AdapterState, Evaluation, Objective};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::net::{ModelCheckpoint, Network};
use crate::priors::{record_prior_loss, PriorConfig, PriorTerms};
use crate::stmap::{shifted_pair, WindowPair};
use crate::synth::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub index: usize,
    pub start: usize,
    pub delta: usize,
    /// Mean of the heart-rate vector under the pre-update weights.
    pub pred_hr: f64,
    pub gt_hr: f64,
    pub loss: f64,
    pub temporal: f64,
    pub spatial: f64,
    /// Adapter branch, `none` without adaptation, `error` for aborted steps.
    pub branch: String,
    pub lambda: f64,
    pub grad_norm: f64,
    pub pa_grad_norm: f64,
    pub final_grad_norm: f64,
}

impl InstanceRecord {
    pub fn abs_error(&self) -> f64 {
        (self.pred_hr - self.gt_hr).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub mode: Mode,
    pub records: Vec<InstanceRecord>,
    pub overall: Metrics,
    pub trailing: Metrics,
    pub trailing_count: usize,
    pub errors: u64,
}

impl Timeline {
    pub fn from_records(
        mode: Mode,
        records: Vec<InstanceRecord>,
        trailing_fraction: f64,
        errors: u64,
    ) -> Result<Self> {
        let preds: Vec<f64> = records.iter().map(|r| r.pred_hr).collect();
        let gts: Vec<f64> = records.iter().map(|r| r.gt_hr).collect();
        let overall = metrics(&preds, &gts)?;
        let k = trailing_len(records.len(), trailing_fraction);
        let from = records.len() - k;
        let trailing = metrics(&preds[from..], &gts[from..])?;
        Ok(Timeline {
            mode,
            records,
            overall,
            trailing,
            trailing_count: k,
            errors,
        })
    }

    pub fn abs_errors(&self) -> Vec<f64> {
        self.records.iter().map(InstanceRecord::abs_error).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TtaRun {
    pub timeline: Timeline,
    pub params: Vec<f64>,
    pub state: Option<AdapterState>,
}

/// Prior objective that keeps the heart-rate vector from its first
/// evaluation, which runs at the pre-update weights.
struct RecordingObjective<'a> {
    net: &'a Network,
    pair: &'a WindowPair,
    config: &'a PriorConfig,
    first_hr: Option<Vec<f64>>,
}

impl Objective for RecordingObjective<'_> {
    type Aux = PriorTerms;

    fn evaluate(&mut self, params: &[f64]) -> Result<Evaluation<PriorTerms>> {
        let mut graph = Graph::new();
        let (nodes, bound) =
            record_prior_loss(&mut graph, self.net, params, self.pair, self.config)?;
        if self.first_hr.is_none() {
            self.first_hr = Some(graph.value(nodes.hr_current).data().to_vec());
        }
        let terms = PriorTerms {
            total: graph.value(nodes.total).data()[0],
            temporal: graph.value(nodes.temporal).data()[0],
            spatial: graph.value(nodes.spatial).data()[0],
        };
        let grads = graph.backward(nodes.total)?;
        Ok(Evaluation {
            loss: terms.total,
            grad: bound.flat_gradient(&grads),
            aux: terms,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Window starts visited by a run, in temporal order. The first start
/// leaves room for the largest temporal shift.
pub fn instance_starts(
    frames: usize,
    window_len: usize,
    delta_max: usize,
    stride: usize,
    max: usize,
) -> Vec<usize> {
    if frames < window_len + delta_max {
        return Vec::new();
    }
    let it = (delta_max..=frames - window_len).step_by(stride.max(1));
    if max > 0 {
        it.take(max).collect()
    } else {
        it.collect()
    }
}

/// Streams the target once in temporal order. Every instance is predicted
/// with the current weights first and only then, unless the mode is
/// `no-adapt`, used for one adaptation step.
pub fn run_tta(
    tta: &TtaConfig,
    priors: &PriorConfig,
    adapter: &AdapterConfig,
    checkpoint: &ModelCheckpoint,
    target: &Stream,
) -> Result<TtaRun> {
    tta.validate()?;
    priors.validate()?;
    let cfg = &checkpoint.config;
    let net = Network::new(cfg.clone())?;
    if checkpoint.params.len() != net.param_count() {
        return Err(Error::CountMismatch {
            expected: net.param_count(),
            found: checkpoint.params.len(),
        });
    }
    if target.data.channels() != cfg.channels {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {} channels, target stream has {}",
            cfg.channels,
            target.data.channels()
        )));
    }
    let w = cfg.window_len;
    let starts = instance_starts(
        target.data.frames(),
        w,
        priors.delta_max,
        tta.stride_for(w),
        tta.max_instances,
    );
    if starts.is_empty() {
        return Err(Error::Empty("target instances"));
    }

    let mode = tta.mode;
    let mut params = checkpoint.params.clone();
    let mut state = if mode.adapts() {
        Some(AdapterState::new(mode.apply(adapter), params.len())?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tta.seed);
    let mut records = Vec::with_capacity(starts.len());
    for (index, &start) in starts.iter().enumerate() {
        let pair = shifted_pair(target, start, w, cfg.regions, priors.delta_max, &mut rng)?;
        let mut record = InstanceRecord {
            index,
            start,
            delta: pair.delta,
            pred_hr: f64::NAN,
            gt_hr: pair.current.gt_hr,
            loss: 0.0,
            temporal: 0.0,
            spatial: 0.0,
            branch: "none".to_string(),
            lambda: 0.0,
            grad_norm: 0.0,
            pa_grad_norm: 0.0,
            final_grad_norm: 0.0,
        };
        match state.as_mut() {
            None => record.pred_hr = mean(&net.predict(&params, &pair.current)?),
            Some(state) => {
                let mut objective = RecordingObjective {
                    net: &net,
                    pair: &pair,
                    config: priors,
                    first_hr: None,
                };
                let outcome = state.adapt_instance(&mut params, &mut objective);
                let hr = match objective.first_hr {
                    Some(hr) => hr,
                    None => net.predict(&params, &pair.current)?,
                };
                record.pred_hr = mean(&hr);
                match outcome {
                    Ok(step) => {
                        record.loss = step.loss;
                        record.temporal = step.aux.temporal;
                        record.spatial = step.aux.spatial;
                        record.branch = step.branch.as_str().to_string();
                        record.lambda = step.lambda;
                        record.grad_norm = step.grad_norm;
                        record.pa_grad_norm = step.pa_grad_norm;
                        record.final_grad_norm = step.final_grad_norm;
                    }
                    Err(Error::NonFinite(_)) => record.branch = "error".to_string(),
                    Err(e) => return Err(e),
                }
            }
        }
        records.push(record);
    }

    let errors = state.as_ref().map_or(0, |s| s.errors);
    let timeline = Timeline::from_records(mode, records, tta.trailing_fraction, errors)?;
    Ok(TtaRun {
        timeline,
        params,
        state,
    })
}
