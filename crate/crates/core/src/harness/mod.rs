//! Experiment orchestration: configuration, training, evaluation sweeps,
//! metric files and plots.

pub mod config;
pub mod plots;
pub mod report;
pub mod run;
pub mod svg;

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub use config::ExperimentConfig;
pub use plots::{emit_plots, PlotInput, ProjectionDump};
pub use report::{compare_runs, Comparison, MetricsReport, MetricsRow, Phase};
pub use run::{run_experiment, ExperimentResult};

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
