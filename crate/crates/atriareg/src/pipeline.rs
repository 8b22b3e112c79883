//! Preprocessing pipeline: crop around the reference segmentation,
//! stabilize bulk translation, normalize intensities, and restrict each
//! phase to a band around its wall contour. Registration consumes the
//! output directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{apply_mask, contour_band_mask, DEFAULT_BAND_RADIUS};
use crate::volume::{
    crop_center, crop_center_mask, mask_centroid, minmax_normalize, stabilize_centroid,
    CineSeries,
};

/// Provenance of a preprocessing run, written alongside the volumes so a
/// tracked field can be mapped back to original-grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    /// Crop window center: the reference-phase centroid rounded to voxels.
    pub crop_center: [i64; 3],
    pub crop_dims: [usize; 3],
    /// Integer stabilization shift applied to each phase, in voxels.
    pub shifts: Vec<[i64; 3]>,
    pub band_radius_voxels: f64,
}

#[derive(Debug)]
pub struct PreprocessedSeries {
    /// Band-masked normalized volumes plus the stabilized masks.
    pub series: CineSeries,
    pub record: PreprocessRecord,
}

/// Run the full preprocessing chain, in order: crop every phase and mask to
/// `crop_dims` around the reference mask centroid, shift each phase so the
/// centroids coincide to within half a voxel, min-max normalize each phase,
/// and zero everything outside the dilated contour band of each phase's
/// mask.
pub fn preprocess_series(series: &CineSeries, crop_dims: [usize; 3]) -> Result<PreprocessedSeries> {
    let masks = series.masks.as_ref().ok_or(Error::MissingMasks)?;
    let c = mask_centroid(&masks[series.reference_phase])?;
    let crop_at = [
        c[0].round() as i64,
        c[1].round() as i64,
        c[2].round() as i64,
    ];

    let mut cropped_phases = Vec::with_capacity(series.phase_count());
    let mut cropped_masks = Vec::with_capacity(series.phase_count());
    for t in 0..series.phase_count() {
        cropped_phases.push(crop_center(&series.phases[t], crop_at, crop_dims)?);
        cropped_masks.push(crop_center_mask(&masks[t], crop_at, crop_dims)?);
    }
    let cropped = CineSeries::new(cropped_phases, Some(cropped_masks), series.reference_phase)?;

    let (stable, shifts) = stabilize_centroid(&cropped)?;
    let stable_masks = stable.masks.as_ref().expect("stabilization keeps masks");

    let mut out_phases = Vec::with_capacity(stable.phase_count());
    for t in 0..stable.phase_count() {
        let normalized = minmax_normalize(&stable.phases[t])
            .map_err(|e| Error::AtPhase(t, Box::new(e)))?;
        let band = contour_band_mask(&stable_masks[t], DEFAULT_BAND_RADIUS);
        out_phases.push(apply_mask(&normalized, &band)?);
    }

    let record = PreprocessRecord {
        crop_center: crop_at,
        crop_dims,
        shifts,
        band_radius_voxels: DEFAULT_BAND_RADIUS,
    };
    let series = CineSeries::new(out_phases, Some(stable_masks.clone()), stable.reference_phase)?;
    Ok(PreprocessedSeries { series, record })
}
