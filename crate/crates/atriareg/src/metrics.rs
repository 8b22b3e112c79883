//! Tracking-quality metrics: Dice overlap, Hausdorff distance in physical
//! units, mask volumes, and per-phase evaluation rows.

use crate::error::{Error, Result};
use crate::morphology::extract_contour;
use crate::numeric::pairwise_sum;
use crate::registration::RegistrationResult;
use crate::transform::{jacobian_det_map, warp_mask, DEFAULT_MASK_THRESHOLD};
use crate::volume::{CineSeries, Mask3};

/// Evaluation of one tracked phase against its ground-truth segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEvaluation {
    pub phase: usize,
    pub dice: f64,
    pub hausdorff_mm: f64,
    pub gt_volume_ml: f64,
    pub warped_volume_ml: f64,
    pub mean_jacobian: f64,
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`.
pub fn dice(a: &Mask3, b: &Mask3) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::GeometryMismatch("dice mask geometries".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Physical-space squared distance between two voxel indices.
#[inline]
fn dist2_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let dx = (a[0] as f64 - b[0] as f64) * spacing[0];
    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
    let dz = (a[2] as f64 - b[2] as f64) * spacing[2];
    dx * dx + dy * dy + dz * dz
}

/// Directed Hausdorff (squared, mm) from boundary set `from` to `to`.
///
/// Uses the standard early-break: once a target voxel is found closer than
/// the current maximum, this source voxel cannot raise the maximum, so the
/// inner scan stops. The result is exactly the brute-force max-min.
fn directed_hausdorff_sq(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut max_sq = 0.0f64;
    for &a in from {
        let mut min_sq = f64::INFINITY;
        for &b in to {
            let d = dist2_mm(a, b, spacing);
            if d < min_sq {
                min_sq = d;
                if min_sq <= max_sq {
                    break;
                }
            }
        }
        if min_sq > max_sq {
            max_sq = min_sq;
        }
    }
    max_sq
}

/// Exact symmetric Hausdorff distance between the 6-connected boundaries of
/// two masks, scaled by voxel spacing, in mm.
pub fn hausdorff_mm(a: &Mask3, b: &Mask3) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::GeometryMismatch("hausdorff mask geometries".into()));
    }
    if a.set_count() == 0 || b.set_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let ba: Vec<[usize; 3]> = extract_contour(a).iter_set().collect();
    let bb: Vec<[usize; 3]> = extract_contour(b).iter_set().collect();
    let sp = a.spacing();
    let h = directed_hausdorff_sq(&ba, &bb, sp).max(directed_hausdorff_sq(&bb, &ba, sp));
    Ok(h.sqrt())
}

/// Percentile variant of the symmetric Hausdorff distance (e.g. 95.0).
///
/// Both directed distance sets are pooled and the percentile is taken over
/// the pool with nearest-rank semantics; 100.0 reproduces `hausdorff_mm`.
pub fn hausdorff_percentile_mm(a: &Mask3, b: &Mask3, percentile: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::ConfigInvalid(format!("percentile {percentile} outside [0, 100]")));
    }
    if !a.same_geometry(b) {
        return Err(Error::GeometryMismatch("hausdorff mask geometries".into()));
    }
    if a.set_count() == 0 || b.set_count() == 0 {
        return Err(Error::EmptyMask);
    }
    let ba: Vec<[usize; 3]> = extract_contour(a).iter_set().collect();
    let bb: Vec<[usize; 3]> = extract_contour(b).iter_set().collect();
    let sp = a.spacing();
    let min_to = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| dist2_mm(p, q, sp))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut pool = min_to(&ba, &bb);
    pool.extend(min_to(&bb, &ba));
    pool.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((percentile / 100.0) * pool.len() as f64).ceil() as usize;
    let idx = rank.max(1).min(pool.len()) - 1;
    Ok(pool[idx].sqrt())
}

/// Mask volume in millilitres: set voxels times voxel volume in mm cubed,
/// divided by 1000.
pub fn mask_volume_ml(m: &Mask3) -> f64 {
    let sp = m.spacing();
    m.set_count() as f64 * sp[0] * sp[1] * sp[2] / 1000.0
}

/// Warp the reference-phase segmentation through every recovered field and
/// score it against each phase's ground truth.
pub fn evaluate_tracking(
    series: &CineSeries,
    results: &[RegistrationResult],
) -> Result<Vec<PhaseEvaluation>> {
    let masks = series.masks.as_ref().ok_or(Error::MissingMasks)?;
    if results.len() != series.phase_count() {
        return Err(Error::ConfigInvalid(format!(
            "{} results for {} phases",
            results.len(),
            series.phase_count()
        )));
    }
    let reference = &masks[series.reference_phase];
    let mut rows = Vec::with_capacity(results.len());
    for (t, result) in results.iter().enumerate() {
        let row = (|| -> Result<PhaseEvaluation> {
            let warped = warp_mask(reference, &result.field, DEFAULT_MASK_THRESHOLD)?;
            let jac = jacobian_det_map(&result.field)?;
            let mut terms: Vec<f64> = Vec::with_capacity(warped.set_count());
            for [i, j, k] in warped.iter_set() {
                terms.push(jac.at(i, j, k));
            }
            if terms.is_empty() {
                return Err(Error::EmptyMask);
            }
            let mean_jacobian = pairwise_sum(&terms) / terms.len() as f64;
            Ok(PhaseEvaluation {
                phase: t,
                dice: dice(&warped, &masks[t])?,
                hausdorff_mm: hausdorff_mm(&warped, &masks[t])?,
                gt_volume_ml: mask_volume_ml(&masks[t]),
                warped_volume_ml: mask_volume_ml(&warped),
                mean_jacobian,
            })
        })()
        .map_err(|e| Error::AtPhase(t, Box::new(e)))?;
        rows.push(row);
    }
    Ok(rows)
}
