//! Pre-training, streaming evaluation, metrics, and the ablation runner.

mod ablate;
mod config;
mod metrics;
mod pretrain;
mod report;
mod scenario;
mod tta;

pub use ablate::{ablate, AblationReport};
pub use config::{ExperimentConfig, Mode, PretrainConfig, ShiftSpec, StreamSpec, TtaConfig};
pub use metrics::{metrics, rolling_mae, trailing_len, Metrics};
pub use pretrain::{pretrain, PretrainReport};
pub use report::{
    ablation_table, parse_records_csv, records_csv, rolling_mae_svg, summary_text, write_timeline,
    RECORDS_HEADER,
};
pub use scenario::{build_streams, run_scenario, ScenarioOutcome, ScenarioStreams};
pub use tta::{instance_starts, run_tta, InstanceRecord, Timeline, TtaRun};
