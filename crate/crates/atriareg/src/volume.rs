//! Dense 3D volumes, binary masks, and cine series.
//!
//! Voxel data is stored in x-fastest linear order to match the NIfTI
//! convention: `index = i + nx*(j + ny*k)`. All types are immutable after
//! construction; operations return new values.

use crate::error::{Error, Result};

/// Dense 3D scalar image with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
}

impl Volume3 {
    /// Build a volume, validating dimensions, spacing, and finiteness.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ConfigInvalid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::ConfigInvalid(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ConfigInvalid(format!(
                "data length {} != {}*{}*{}",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::NonFiniteData("volume origin".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("volume data".into()));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    /// Build a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn same_geometry(&self, other: &Volume3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn same_geometry_mask(&self, m: &Mask3) -> bool {
        self.dims == m.dims && self.spacing == m.spacing && self.origin == m.origin
    }

    /// Replace the data, keeping geometry. Length and finiteness are re-checked.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, data)
    }

    /// Shift the contents by an integer voxel offset; vacated voxels become 0.
    ///
    /// `output(x) = input(x - shift)`, so a positive shift moves content
    /// toward higher indices.
    pub fn translate(&self, shift: [i64; 3]) -> Volume3 {
        let [nx, ny, nz] = self.dims;
        let mut data = vec![0.0; self.data.len()];
        for k in 0..nz {
            let sk = k as i64 - shift[2];
            if sk < 0 || sk >= nz as i64 {
                continue;
            }
            for j in 0..ny {
                let sj = j as i64 - shift[1];
                if sj < 0 || sj >= ny as i64 {
                    continue;
                }
                for i in 0..nx {
                    let si = i as i64 - shift[0];
                    if si < 0 || si >= nx as i64 {
                        continue;
                    }
                    data[self.index(i, j, k)] = self.at(si as usize, sj as usize, sk as usize);
                }
            }
        }
        Volume3 { dims: self.dims, spacing: self.spacing, origin: self.origin, data }
    }
}

/// Dense binary volume sharing `Volume3` geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<bool>,
}

impl Mask3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ConfigInvalid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::ConfigInvalid(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ConfigInvalid(format!("mask length {} != {n}", data.len())));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::NonFiniteData("mask origin".into()));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.index(i, j, k)]
    }

    pub fn set_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_geometry(&self, other: &Mask3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    /// Iterate over set voxel coordinates in x-fastest order.
    pub fn iter_set(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        self.data.iter().enumerate().filter(|(_, &b)| b).map(move |(idx, _)| {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            [i, j, k]
        })
    }

    /// Shift set voxels by an integer offset; vacated voxels become unset.
    pub fn translate(&self, shift: [i64; 3]) -> Mask3 {
        let [nx, ny, nz] = self.dims;
        let mut data = vec![false; self.data.len()];
        for k in 0..nz {
            let sk = k as i64 - shift[2];
            if sk < 0 || sk >= nz as i64 {
                continue;
            }
            for j in 0..ny {
                let sj = j as i64 - shift[1];
                if sj < 0 || sj >= ny as i64 {
                    continue;
                }
                for i in 0..nx {
                    let si = i as i64 - shift[0];
                    if si < 0 || si >= nx as i64 {
                        continue;
                    }
                    data[self.index(i, j, k)] = self.at(si as usize, sj as usize, sk as usize);
                }
            }
        }
        Mask3 { dims: self.dims, spacing: self.spacing, origin: self.origin, data }
    }
}

/// Ordered multi-phase volume collection with shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CineSeries {
    pub phases: Vec<Volume3>,
    pub masks: Option<Vec<Mask3>>,
    pub reference_phase: usize,
}

impl CineSeries {
    pub fn new(phases: Vec<Volume3>, masks: Option<Vec<Mask3>>, reference_phase: usize) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::ConfigInvalid("series has no phases".into()));
        }
        if reference_phase >= phases.len() {
            return Err(Error::ConfigInvalid(format!(
                "reference phase {reference_phase} out of range 0..{}",
                phases.len()
            )));
        }
        for (t, p) in phases.iter().enumerate() {
            if !p.same_geometry(&phases[0]) {
                return Err(Error::GeometryMismatch(format!("phase {t} differs from phase 0")));
            }
        }
        if let Some(ms) = &masks {
            if ms.len() != phases.len() {
                return Err(Error::ConfigInvalid(format!(
                    "{} masks for {} phases",
                    ms.len(),
                    phases.len()
                )));
            }
            for (t, m) in ms.iter().enumerate() {
                if !phases[0].same_geometry_mask(m) {
                    return Err(Error::GeometryMismatch(format!("mask {t} differs from phase geometry")));
                }
            }
        }
        Ok(Self { phases, masks, reference_phase })
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }
}

/// Affinely rescale intensities to the exact range [0, 1].
pub fn minmax_normalize(v: &Volume3) -> Result<Volume3> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v.data() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi <= lo {
        return Err(Error::ConstantIntensity);
    }
    // Divide rather than multiply by a reciprocal so the extremes land on
    // exactly 0 and 1.
    let range = hi - lo;
    let data = v.data().iter().map(|&x| (x - lo) / range).collect();
    v.with_data(data)
}

fn crop_start(center: [i64; 3], size: [usize; 3]) -> [i64; 3] {
    [
        center[0] - (size[0] / 2) as i64,
        center[1] - (size[1] / 2) as i64,
        center[2] - (size[2] / 2) as i64,
    ]
}

/// Extract a `size` window centered at `center` (floor half-size anchor).
///
/// Out-of-range source voxels are zero-filled. The origin is updated so
/// physical coordinates are preserved.
pub fn crop_center(v: &Volume3, center: [i64; 3], size: [usize; 3]) -> Result<Volume3> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::ConfigInvalid(format!("zero crop size {size:?}")));
    }
    let start = crop_start(center, size);
    let [nx, ny, nz] = v.dims();
    let mut data = vec![0.0; size[0] * size[1] * size[2]];
    let mut idx = 0;
    for k in 0..size[2] {
        let sk = start[2] + k as i64;
        for j in 0..size[1] {
            let sj = start[1] + j as i64;
            for i in 0..size[0] {
                let si = start[0] + i as i64;
                if si >= 0 && si < nx as i64 && sj >= 0 && sj < ny as i64 && sk >= 0 && sk < nz as i64 {
                    data[idx] = v.at(si as usize, sj as usize, sk as usize);
                }
                idx += 1;
            }
        }
    }
    let sp = v.spacing();
    let origin = [
        v.origin()[0] + start[0] as f64 * sp[0],
        v.origin()[1] + start[1] as f64 * sp[1],
        v.origin()[2] + start[2] as f64 * sp[2],
    ];
    Volume3::new(size, sp, origin, data)
}

/// Mask counterpart of [`crop_center`]; out-of-range voxels are unset.
pub fn crop_center_mask(m: &Mask3, center: [i64; 3], size: [usize; 3]) -> Result<Mask3> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::ConfigInvalid(format!("zero crop size {size:?}")));
    }
    let start = crop_start(center, size);
    let [nx, ny, nz] = m.dims();
    let mut data = vec![false; size[0] * size[1] * size[2]];
    let mut idx = 0;
    for k in 0..size[2] {
        let sk = start[2] + k as i64;
        for j in 0..size[1] {
            let sj = start[1] + j as i64;
            for i in 0..size[0] {
                let si = start[0] + i as i64;
                if si >= 0 && si < nx as i64 && sj >= 0 && sj < ny as i64 && sk >= 0 && sk < nz as i64 {
                    data[idx] = m.at(si as usize, sj as usize, sk as usize);
                }
                idx += 1;
            }
        }
    }
    let sp = m.spacing();
    let origin = [
        m.origin()[0] + start[0] as f64 * sp[0],
        m.origin()[1] + start[1] as f64 * sp[1],
        m.origin()[2] + start[2] as f64 * sp[2],
    ];
    Mask3::new(size, sp, origin, data)
}

/// Arithmetic mean of set-voxel index coordinates.
pub fn mask_centroid(m: &Mask3) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for [i, j, k] in m.iter_set() {
        sum[0] += i as f64;
        sum[1] += j as f64;
        sum[2] += k as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = count as f64;
    Ok([sum[0] / n, sum[1] / n, sum[2] / n])
}

/// Translate every phase so its mask centroid coincides with the reference
/// phase's, using integer-voxel shifts (no resampling).
///
/// Returns the stabilized series and the per-phase shifts that were applied.
pub fn stabilize_centroid(series: &CineSeries) -> Result<(CineSeries, Vec<[i64; 3]>)> {
    let masks = series.masks.as_ref().ok_or(Error::MissingMasks)?;
    let c_ref = mask_centroid(&masks[series.reference_phase])?;
    let mut shifts = Vec::with_capacity(series.phase_count());
    let mut phases = Vec::with_capacity(series.phase_count());
    let mut out_masks = Vec::with_capacity(series.phase_count());
    for t in 0..series.phase_count() {
        let c_t = mask_centroid(&masks[t])?;
        let shift = [
            (c_ref[0] - c_t[0]).round() as i64,
            (c_ref[1] - c_t[1]).round() as i64,
            (c_ref[2] - c_t[2]).round() as i64,
        ];
        if shift == [0, 0, 0] {
            phases.push(series.phases[t].clone());
            out_masks.push(masks[t].clone());
        } else {
            phases.push(series.phases[t].translate(shift));
            out_masks.push(masks[t].translate(shift));
        }
        shifts.push(shift);
    }
    let stabilized = CineSeries::new(phases, Some(out_masks), series.reference_phase)?;
    Ok((stabilized, shifts))
}
