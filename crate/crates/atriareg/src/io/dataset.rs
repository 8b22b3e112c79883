//! Directory layout for multi-phase datasets: one file per phase with a
//! zero-padded index (`phase_00.nii`, `phase_01.nii`, ...), masks suffixed
//! `_mask`, displacement fields named `field_00.nii` onward. Readers accept
//! either plain or `.nii.gz` files.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::nifti::{
    read_field, read_mask, read_volume, write_field, write_mask, write_volume,
};
use crate::transform::DisplacementField;
use crate::volume::{CineSeries, Mask3, Volume3};

fn nii_name(stem: &str, gzip: bool) -> String {
    if gzip {
        format!("{stem}.nii.gz")
    } else {
        format!("{stem}.nii")
    }
}

pub fn phase_volume_path(dir: &Path, t: usize, gzip: bool) -> PathBuf {
    dir.join(nii_name(&format!("phase_{t:02}"), gzip))
}

pub fn phase_mask_path(dir: &Path, t: usize, gzip: bool) -> PathBuf {
    dir.join(nii_name(&format!("phase_{t:02}_mask"), gzip))
}

pub fn field_path(dir: &Path, t: usize, gzip: bool) -> PathBuf {
    dir.join(nii_name(&format!("field_{t:02}"), gzip))
}

/// Resolve the existing variant of a phase file, preferring uncompressed.
fn existing(make: impl Fn(bool) -> PathBuf) -> Option<PathBuf> {
    let plain = make(false);
    if plain.exists() {
        return Some(plain);
    }
    let gz = make(true);
    gz.exists().then_some(gz)
}

pub fn write_series_dir(series: &CineSeries, dir: &Path, gzip: bool) -> Result<()> {
    for (t, phase) in series.phases.iter().enumerate() {
        write_volume(phase, phase_volume_path(dir, t, gzip))?;
    }
    if let Some(masks) = &series.masks {
        for (t, mask) in masks.iter().enumerate() {
            write_mask(mask, phase_mask_path(dir, t, gzip))?;
        }
    }
    Ok(())
}

/// Load `phase_NN` volumes from a directory, with masks when every phase
/// has one. A mix of masked and unmasked phases is rejected.
pub fn read_series_dir(dir: &Path) -> Result<CineSeries> {
    let mut phases: Vec<Volume3> = Vec::new();
    let mut masks: Vec<Mask3> = Vec::new();
    loop {
        let t = phases.len();
        let Some(vol_path) = existing(|gz| phase_volume_path(dir, t, gz)) else {
            break;
        };
        phases.push(read_volume(&vol_path).map_err(|e| Error::AtPhase(t, Box::new(e)))?);
        if let Some(mask_path) = existing(|gz| phase_mask_path(dir, t, gz)) {
            if masks.len() != t {
                return Err(Error::IoFailure(format!(
                    "{}: phases 0..{t} have no masks but phase {t} does",
                    dir.display()
                )));
            }
            masks.push(read_mask(&mask_path).map_err(|e| Error::AtPhase(t, Box::new(e)))?);
        } else if !masks.is_empty() {
            return Err(Error::IoFailure(format!(
                "{}: mask missing for phase {t}",
                dir.display()
            )));
        }
    }
    if phases.is_empty() {
        return Err(Error::IoFailure(format!(
            "{}: no phase_00.nii or phase_00.nii.gz",
            dir.display()
        )));
    }
    let masks = (!masks.is_empty()).then_some(masks);
    CineSeries::new(phases, masks, 0)
}

pub fn write_fields_dir(fields: &[DisplacementField], dir: &Path, gzip: bool) -> Result<()> {
    for (t, field) in fields.iter().enumerate() {
        write_field(field, field_path(dir, t, gzip))?;
    }
    Ok(())
}

pub fn read_fields_dir(dir: &Path) -> Result<Vec<DisplacementField>> {
    let mut fields = Vec::new();
    while let Some(path) = existing(|gz| field_path(dir, fields.len(), gz)) {
        let t = fields.len();
        fields.push(read_field(&path).map_err(|e| Error::AtPhase(t, Box::new(e)))?);
    }
    if fields.is_empty() {
        return Err(Error::IoFailure(format!(
            "{}: no field_00.nii or field_00.nii.gz",
            dir.display()
        )));
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::FieldUnit;

    fn tiny_series(with_masks: bool) -> CineSeries {
        let phases: Vec<Volume3> = (0..3)
            .map(|t| {
                Volume3::from_fn([4, 4, 3], [1.72, 1.72, 2.0], [0.0; 3], |i, j, k| {
                    (t * 100 + i + 4 * j + 16 * k) as f64
                })
                .unwrap()
            })
            .collect();
        let masks = with_masks.then(|| {
            (0..3)
                .map(|t| {
                    Mask3::from_fn([4, 4, 3], [1.72, 1.72, 2.0], [0.0; 3], |i, _, _| i == t)
                        .unwrap()
                })
                .collect()
        });
        CineSeries::new(phases, masks, 0).unwrap()
    }

    #[test]
    fn series_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let series = tiny_series(true);
        write_series_dir(&series, dir.path(), false).unwrap();
        let back = read_series_dir(dir.path()).unwrap();
        assert_eq!(back.phase_count(), 3);
        assert_eq!(back.masks.as_ref().unwrap().len(), 3);
        for (a, b) in back.phases.iter().zip(&series.phases) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in back.masks.as_ref().unwrap().iter().zip(series.masks.as_ref().unwrap()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn maskless_series_reads_back_without_masks() {
        let dir = tempfile::tempdir().unwrap();
        write_series_dir(&tiny_series(false), dir.path(), true).unwrap();
        let back = read_series_dir(dir.path()).unwrap();
        assert_eq!(back.phase_count(), 3);
        assert!(back.masks.is_none());
    }

    #[test]
    fn partial_masks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let series = tiny_series(true);
        write_series_dir(&series, dir.path(), false).unwrap();
        std::fs::remove_file(phase_mask_path(dir.path(), 1, false)).unwrap();
        assert!(matches!(read_series_dir(dir.path()), Err(Error::IoFailure(_))));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_series_dir(dir.path()), Err(Error::IoFailure(_))));
        assert!(matches!(read_fields_dir(dir.path()), Err(Error::IoFailure(_))));
    }

    #[test]
    fn fields_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fields: Vec<DisplacementField> = (0..2)
            .map(|t| {
                DisplacementField::from_fn([4, 3, 3], [1.0; 3], [0.0; 3], |i, j, k| {
                    [t as f64 + i as f64, j as f64 * 0.5, k as f64 * 0.25]
                })
                .unwrap()
            })
            .collect();
        write_fields_dir(&fields, dir.path(), true).unwrap();
        let back = read_fields_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&fields) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.unit(), FieldUnit::Voxel);
        }
    }
}
