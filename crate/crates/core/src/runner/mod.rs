//! Persistence, configuration, manifests and experiment sweeps.

mod checkpoint;
mod config;
mod manifest;
mod pipeline;
mod report;
mod sweep;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{
    apply_override, AttackSettings, LabConfig, MethodKind, ModelSettings, NpoSettings, RelearnSettings, RmuSettings,
    SweepSpec, UnlearnSettings,
};
pub use manifest::{output_root, sha256_bytes, sha256_file, RunManifest, ScheduleEntry, MANIFEST_FILE, OUT_ENV};
pub use pipeline::{forget_auc, pretrain, retrain};
pub use report::{emit_report, read_report, render_report, ReportFormat, ReportRow, REPORT_HEADER};
pub use sweep::{
    epoch_schedule, run_sweep, summarize, summary_csv, sweep_csv, Stat, SummaryRow, SweepRow, SWEEP_HEADER,
};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
