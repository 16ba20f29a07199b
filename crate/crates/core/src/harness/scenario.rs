use super::ablate::{ablate, AblationReport};
use super::config::ExperimentConfig;
use super::pretrain::{pretrain, PretrainReport};
use crate::error::Result;
use crate::net::ModelCheckpoint;
use crate::synth::{generate_stream, Stream};

#[derive(Debug, Clone)]
pub struct ScenarioStreams {
    pub source: Stream,
    /// Target stream with the configured domain shift applied.
    pub target: Stream,
}

pub fn build_streams(cfg: &ExperimentConfig) -> Result<ScenarioStreams> {
    let source = generate_stream(&cfg.source.params, cfg.source.seed)?;
    let target = generate_stream(&cfg.target.params, cfg.target.seed)?
        .shifted(&cfg.shift.shift, cfg.shift.seed)?;
    Ok(ScenarioStreams { source, target })
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub checkpoint: ModelCheckpoint,
    pub pretrain: PretrainReport,
    pub ablation: AblationReport,
}

/// Generates both streams, pre-trains on the source, and ablates every mode
/// on the shifted target.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let streams = build_streams(cfg)?;
    let (checkpoint, report) = pretrain(
        &cfg.pretrain,
        &cfg.network,
        std::slice::from_ref(&streams.source),
    )?;
    let ablation = ablate(
        &cfg.tta,
        &cfg.priors,
        &cfg.adapter,
        &checkpoint,
        &streams.target,
    )?;
    Ok(ScenarioOutcome {
        checkpoint,
        pretrain: report,
        ablation,
    })
}
