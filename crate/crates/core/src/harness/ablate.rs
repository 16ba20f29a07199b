use std::path::Path;

use super::config::{Mode, TtaConfig};
use super::report::{ablation_table, rolling_mae_svg, write_text, write_timeline};
use super::tta::{run_tta, Timeline};
use crate::adapter::AdapterConfig;
use crate::error::Result;
use crate::net::ModelCheckpoint;
use crate::priors::PriorConfig;
use crate::synth::Stream;

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// One timeline per mode, in [`Mode::ALL`] order.
    pub timelines: Vec<Timeline>,
    pub rolling_window: usize,
}

impl AblationReport {
    pub fn get(&self, mode: Mode) -> Option<&Timeline> {
        self.timelines.iter().find(|t| t.mode == mode)
    }

    pub fn table(&self) -> String {
        ablation_table(&self.timelines)
    }

    pub fn svg(&self) -> String {
        rolling_mae_svg(&self.timelines, self.rolling_window)
    }

    /// `summary.txt`, `rolling_mae.svg`, and one subdirectory per mode.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for t in &self.timelines {
            write_timeline(&dir.join(t.mode.slug()), t)?;
        }
        write_text(&dir.join("summary.txt"), &self.table())?;
        write_text(&dir.join("rolling_mae.svg"), &self.svg())
    }
}

/// Runs every mode on the same checkpoint, target stream and seeds, one
/// worker thread per mode.
pub fn ablate(
    tta: &TtaConfig,
    priors: &PriorConfig,
    adapter: &AdapterConfig,
    checkpoint: &ModelCheckpoint,
    target: &Stream,
) -> Result<AblationReport> {
    let results: Vec<Result<Timeline>> = std::thread::scope(|scope| {
        let handles: Vec<_> = Mode::ALL
            .into_iter()
            .map(|mode| {
                let cfg = TtaConfig {
                    mode,
                    ..tta.clone()
                };
                scope.spawn(move || {
                    run_tta(&cfg, priors, adapter, checkpoint, target).map(|run| run.timeline)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    Ok(AblationReport {
        timelines: results.into_iter().collect::<Result<_>>()?,
        rolling_window: tta.rolling_window,
    })
}
