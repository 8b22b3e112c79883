//! File persistence: a NIfTI-1 subset for volumes, masks, series, and
//! displacement fields, plus CSV metric reports.

pub mod dataset;
pub mod metrics_csv;
pub mod nifti;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use metrics_csv::{read_metrics_csv, write_metrics_csv};
pub use nifti::{
    read_field, read_mask, read_nifti, read_series, read_volume, write_field, write_mask,
    write_series, write_volume, NiftiData,
};

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::IoFailure(format!("{}: {e}", path.display()))
}

/// Atomically write a UTF-8 text file (logs, JSON metadata).
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    atomic_write(path.as_ref(), text.as_bytes())
}

/// Write bytes to a sibling temp file and rename it into place, so readers
/// never observe a partially written file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(format!(".{}.part", std::process::id()));
    let tmp = PathBuf::from(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| io_context(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_context(path, e)
    })
}
