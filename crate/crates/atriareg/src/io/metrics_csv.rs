//! CSV persistence for per-phase evaluation rows.
//!
//! Numbers are printed with Rust's shortest round-trip float formatting
//! ('.' decimal separator, so 1.0 prints as `1`), which `f64::from_str`
//! parses back to the identical bits. Lines end in '\n'.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::metrics::PhaseEvaluation;

const HEADER: &str = "phase,dice,hausdorff_mm,gt_volume_ml,warped_volume_ml,mean_jacobian";

pub fn write_metrics_csv(evals: &[PhaseEvaluation], path: impl AsRef<Path>) -> Result<()> {
    if evals.is_empty() {
        return Err(Error::ConfigInvalid("no evaluation rows to write".into()));
    }
    let mut text = String::with_capacity(64 * (evals.len() + 1));
    text.push_str(HEADER);
    text.push('\n');
    for e in evals {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            e.phase, e.dice, e.hausdorff_mm, e.gt_volume_ml, e.warped_volume_ml, e.mean_jacobian
        )
        .expect("string writes are infallible");
    }
    atomic_write(path.as_ref(), text.as_bytes())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<PhaseEvaluation>> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(Error::IoFailure(format!(
                "{}: bad header {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::IoFailure(format!(
                "{}: line {}: {} fields",
                path.display(),
                n + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::IoFailure(format!("{}: line {}: bad {what}", path.display(), n + 2))
        };
        rows.push(PhaseEvaluation {
            phase: fields[0].parse().map_err(|_| bad("phase"))?,
            dice: fields[1].parse().map_err(|_| bad("dice"))?,
            hausdorff_mm: fields[2].parse().map_err(|_| bad("hausdorff_mm"))?,
            gt_volume_ml: fields[3].parse().map_err(|_| bad("gt_volume_ml"))?,
            warped_volume_ml: fields[4].parse().map_err(|_| bad("warped_volume_ml"))?,
            mean_jacobian: fields[5].parse().map_err(|_| bad("mean_jacobian"))?,
        });
    }
    if rows.is_empty() {
        return Err(Error::IoFailure(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}
