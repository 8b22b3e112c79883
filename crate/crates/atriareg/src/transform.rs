//! Displacement fields and the spatial transformer: trilinear warping of
//! volumes and masks, Jacobian determinant maps, and field unit plumbing.
//!
//! Fields use pull-back semantics on the fixed grid: the warped image at
//! voxel x is the moving image sampled at x + u(x). Displacements are in
//! voxel units internally; [`field_to_mm`] converts at export time.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Mask3, Volume3};

/// Binarization threshold applied after warping a mask (strict greater-than).
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Unit of the stored displacement components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldUnit {
    Voxel,
    Mm,
}

/// Dense per-voxel displacement vectors on a fixed-image grid.
///
/// Storage is component-major: all x components in x-fastest voxel order,
/// then all y, then all z. This matches the on-disk layout of a 4D vector
/// volume, so export is a plain cast.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    unit: FieldUnit,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        unit: FieldUnit,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ConfigInvalid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::ConfigInvalid(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != 3 * n {
            return Err(Error::ConfigInvalid(format!(
                "field component count {} != 3*{n}",
                data.len()
            )));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::NonFiniteData("field origin".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("field components".into()));
        }
        Ok(Self { dims, spacing, origin, unit, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, origin, FieldUnit::Voxel, vec![0.0; 3 * n])
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        let mut data = vec![0.0; 3 * n];
        let mut idx = 0;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let u = f(i, j, k);
                    data[idx] = u[0];
                    data[n + idx] = u[1];
                    data[2 * n + idx] = u[2];
                    idx += 1;
                }
            }
        }
        Self::new(dims, spacing, origin, FieldUnit::Voxel, data)
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

    pub fn unit(&self) -> FieldUnit {
        self.unit
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// All components, component-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One component plane in x-fastest voxel order.
    pub fn comp(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn vector_at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let n = self.voxel_count();
        let idx = self.index(i, j, k);
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    pub fn same_grid(&self, v: &Volume3) -> bool {
        self.dims == v.dims() && self.spacing == v.spacing()
    }

    /// Consume the field and hand back its raw component buffer.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mean Euclidean length of the displacement vectors.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.voxel_count();
        let mut sum = 0.0;
        for idx in 0..n {
            let ux = self.data[idx];
            let uy = self.data[n + idx];
            let uz = self.data[2 * n + idx];
            sum += (ux * ux + uy * uy + uz * uz).sqrt();
        }
        sum / n as f64
    }
}

/// The 8 corner intensities of the interpolation cell around a position,
/// with the in-cell fractions. Corner order is x-fastest, then y, then z.
struct CellSample {
    c: [f64; 8],
    fx: f64,
    fy: f64,
    fz: f64,
}

/// Locate and fetch the 2x2x2 cell for a fractional voxel position, or
/// `None` when the sample is defined as zero: non-finite positions (so a
/// diverging field surfaces as a bad loss instead of a panic) and positions
/// whose whole cell lies outside the volume. Bounds are checked in f64 so
/// arbitrarily large positions never reach the integer casts.
#[inline]
fn cell_sample(v: &Volume3, p: [f64; 3]) -> Option<CellSample> {
    if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
        return None;
    }
    let [nx, ny, nz] = v.dims();
    if p[0] < -1.0 || p[1] < -1.0 || p[2] < -1.0 {
        return None;
    }
    if p[0] >= nx as f64 || p[1] >= ny as f64 || p[2] >= nz as f64 {
        return None;
    }
    let (x0, fx) = split_floor(p[0]);
    let (y0, fy) = split_floor(p[1]);
    let (z0, fz) = split_floor(p[2]);
    let d = v.data();

    let c = if x0 >= 0
        && y0 >= 0
        && z0 >= 0
        && x0 + 1 < nx as i64
        && y0 + 1 < ny as i64
        && z0 + 1 < nz as i64
    {
        // Whole cell interior: one flat base index, fixed strides.
        let base = x0 as usize + nx * (y0 as usize + ny * z0 as usize);
        let sy = nx;
        let sz = nx * ny;
        [
            d[base],
            d[base + 1],
            d[base + sy],
            d[base + sy + 1],
            d[base + sz],
            d[base + sz + 1],
            d[base + sy + sz],
            d[base + sy + sz + 1],
        ]
    } else {
        // Cell straddles the border: corners outside read as zero.
        let fetch = |i: i64, j: i64, k: i64| -> f64 {
            if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
                0.0
            } else {
                v.at(i as usize, j as usize, k as usize)
            }
        };
        [
            fetch(x0, y0, z0),
            fetch(x0 + 1, y0, z0),
            fetch(x0, y0 + 1, z0),
            fetch(x0 + 1, y0 + 1, z0),
            fetch(x0, y0, z0 + 1),
            fetch(x0 + 1, y0, z0 + 1),
            fetch(x0, y0 + 1, z0 + 1),
            fetch(x0 + 1, y0 + 1, z0 + 1),
        ]
    };
    Some(CellSample { c, fx, fy, fz })
}

#[inline]
fn blend_value(s: &CellSample) -> f64 {
    let [c000, c100, c010, c110, c001, c101, c011, c111] = s.c;
    let (fx, fy, fz) = (s.fx, s.fy, s.fz);
    let gx = 1.0 - fx;
    let gy = 1.0 - fy;
    let gz = 1.0 - fz;
    c000 * gx * gy * gz
        + c100 * fx * gy * gz
        + c010 * gx * fy * gz
        + c110 * fx * fy * gz
        + c001 * gx * gy * fz
        + c101 * fx * gy * fz
        + c011 * gx * fy * fz
        + c111 * fx * fy * fz
}

/// Trilinear sample of `v` at a fractional voxel position, zero outside.
#[inline]
pub(crate) fn sample_trilinear(v: &Volume3, p: [f64; 3]) -> f64 {
    match cell_sample(v, p) {
        Some(s) => blend_value(&s),
        None => 0.0,
    }
}

/// Trilinear sample plus the exact spatial derivative of the interpolant.
/// The value is computed by the same blend as `sample_trilinear`, so both
/// samplers agree bitwise at every position.
///
/// The derivative is piecewise constant per cell in each axis; positions on
/// a cell boundary use the cell on the positive side (floor convention).
#[inline]
pub(crate) fn sample_trilinear_with_grad(v: &Volume3, p: [f64; 3]) -> (f64, [f64; 3]) {
    let s = match cell_sample(v, p) {
        Some(s) => s,
        None => return (0.0, [0.0; 3]),
    };
    let value = blend_value(&s);

    let [c000, c100, c010, c110, c001, c101, c011, c111] = s.c;
    let (fx, fy, fz) = (s.fx, s.fy, s.fz);
    let gx = 1.0 - fx;
    let gy = 1.0 - fy;
    let gz = 1.0 - fz;

    let dx = (c100 - c000) * gy * gz
        + (c110 - c010) * fy * gz
        + (c101 - c001) * gy * fz
        + (c111 - c011) * fy * fz;
    let dy = (c010 - c000) * gx * gz
        + (c110 - c100) * fx * gz
        + (c011 - c001) * gx * fz
        + (c111 - c101) * fx * fz;
    let dz = (c001 - c000) * gx * gy
        + (c101 - c100) * fx * gy
        + (c011 - c010) * gx * fy
        + (c111 - c110) * fx * fy;

    (value, [dx, dy, dz])
}

#[inline]
fn split_floor(x: f64) -> (i64, f64) {
    let f = x.floor();
    (f as i64, x - f)
}

/// Resample `moving` through the field: output(x) = moving(x + u(x)).
pub fn warp_trilinear(moving: &Volume3, field: &DisplacementField) -> Result<Volume3> {
    if !field.same_grid(moving) {
        return Err(Error::GeometryMismatch("warp field vs moving volume".into()));
    }
    let [nx, ny, _] = moving.dims();
    let n = field.voxel_count();
    let fd = field.data();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            let p = [
                i as f64 + fd[idx],
                j as f64 + fd[n + idx],
                k as f64 + fd[2 * n + idx],
            ];
            sample_trilinear(moving, p)
        })
        .collect();
    moving.with_data(data)
}

/// Warp a mask by warping its {0,1} indicator and re-binarizing.
///
/// Binarization is strict: a warped value of exactly `threshold` is unset.
pub fn warp_mask(mask: &Mask3, field: &DisplacementField, threshold: f64) -> Result<Mask3> {
    let indicator = Volume3::new(
        mask.dims(),
        mask.spacing(),
        mask.origin(),
        mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let warped = warp_trilinear(&indicator, field)?;
    Mask3::new(
        mask.dims(),
        mask.spacing(),
        mask.origin(),
        warped.data().iter().map(|&x| x > threshold).collect(),
    )
}

/// Determinant of the deformation gradient det(I + du/dx) per voxel.
///
/// Derivatives are central differences at interior voxels and one-sided at
/// the array borders, all in voxel units, so the map is unit-free.
pub fn jacobian_det_map(field: &DisplacementField) -> Result<Volume3> {
    let [nx, ny, nz] = field.dims();
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::TooSmall(format!("jacobian needs dims >= 3, got {:?}", field.dims())));
    }
    let n = field.voxel_count();
    let fd = field.data();

    // d/daxis of component plane `comp` at (i,j,k).
    let deriv = |comp: usize, axis: usize, i: usize, j: usize, k: usize| -> f64 {
        let plane = &fd[comp * n..(comp + 1) * n];
        let at = |i: usize, j: usize, k: usize| plane[i + nx * (j + ny * k)];
        let (pos, len) = match axis {
            0 => (i, nx),
            1 => (j, ny),
            _ => (k, nz),
        };
        let sample = |q: usize| match axis {
            0 => at(q, j, k),
            1 => at(i, q, k),
            _ => at(i, j, q),
        };
        if pos == 0 {
            sample(1) - sample(0)
        } else if pos == len - 1 {
            sample(len - 1) - sample(len - 2)
        } else {
            (sample(pos + 1) - sample(pos - 1)) * 0.5
        }
    };

    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            let mut g = [[0.0f64; 3]; 3];
            for (r, row) in g.iter_mut().enumerate() {
                for (c, entry) in row.iter_mut().enumerate() {
                    *entry = deriv(r, c, i, j, k);
                }
            }
            let a = 1.0 + g[0][0];
            let e = 1.0 + g[1][1];
            let i9 = 1.0 + g[2][2];
            a * (e * i9 - g[1][2] * g[2][1]) - g[0][1] * (g[1][0] * i9 - g[1][2] * g[2][0])
                + g[0][2] * (g[1][0] * g[2][1] - e * g[2][0])
        })
        .collect();

    Volume3::new(field.dims(), field.spacing(), field.origin(), data)
}

/// Add a constant integer shift to every displacement vector.
///
/// Used to move fields estimated in the centroid-stabilized frame back into
/// the un-stabilized frame before export. Voxel-unit fields only.
pub fn compose_with_shift(field: &DisplacementField, shift: [i64; 3]) -> DisplacementField {
    debug_assert_eq!(field.unit(), FieldUnit::Voxel);
    if shift == [0, 0, 0] {
        return field.clone();
    }
    let n = field.voxel_count();
    let mut data = field.data().to_vec();
    for c in 0..3 {
        let s = shift[c] as f64;
        for v in &mut data[c * n..(c + 1) * n] {
            *v += s;
        }
    }
    DisplacementField::new(field.dims(), field.spacing(), field.origin(), field.unit(), data)
        .expect("shifted field stays valid")
}

/// Convert a voxel-unit field to millimetres by componentwise spacing scale.
pub fn field_to_mm(field: &DisplacementField) -> DisplacementField {
    debug_assert_eq!(field.unit(), FieldUnit::Voxel, "field is already in mm");
    let n = field.voxel_count();
    let mut data = field.data().to_vec();
    for c in 0..3 {
        let s = field.spacing()[c];
        for v in &mut data[c * n..(c + 1) * n] {
            *v *= s;
        }
    }
    DisplacementField::new(field.dims(), field.spacing(), field.origin(), FieldUnit::Mm, data)
        .expect("scaled field stays valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_field(dims: [usize; 3], u: [f64; 3]) -> DisplacementField {
        DisplacementField::from_fn(dims, [1.0; 3], [0.0; 3], |_, _, _| u).unwrap()
    }

    fn ramp_x(dims: [usize; 3]) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], [0.0; 3], |i, _, _| i as f64).unwrap()
    }

    #[test]
    fn zero_field_warp_is_bitwise_identity() {
        let v = Volume3::from_fn([5, 4, 3], [1.0; 3], [0.0; 3], |i, j, k| {
            (i as f64) * 0.3 + (j as f64) * 1.7 - (k as f64) * 0.9
        })
        .unwrap();
        let f = DisplacementField::zeros(v.dims(), v.spacing(), v.origin()).unwrap();
        let w = warp_trilinear(&v, &f).unwrap();
        assert_eq!(w.data(), v.data());
    }

    #[test]
    fn half_voxel_shift_of_ramp_is_exact_interior() {
        let v = ramp_x([6, 3, 3]);
        let f = constant_field([6, 3, 3], [0.5, 0.0, 0.0]);
        let w = warp_trilinear(&v, &f).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..5 {
                    // Sample at i+0.5 of a linear ramp.
                    assert!((w.at(i, j, k) - (i as f64 + 0.5)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn midpoint_of_two_voxel_segment() {
        let v = Volume3::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0, 2.0]).unwrap();
        let f = constant_field([2, 1, 1], [0.5, 0.0, 0.0]);
        let w = warp_trilinear(&v, &f).unwrap();
        assert_eq!(w.at(0, 0, 0), 1.0);
    }

    #[test]
    fn integer_positions_reproduce_voxels() {
        let v = Volume3::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |i, j, k| {
            ((i * 31 + j * 17 + k * 7) % 13) as f64
        })
        .unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let s = sample_trilinear(&v, [i as f64, j as f64, k as f64]);
                    assert_eq!(s, v.at(i, j, k), "at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_samples_are_zero() {
        let v = Volume3::new([3, 3, 3], [1.0; 3], [0.0; 3], vec![5.0; 27]).unwrap();
        assert_eq!(sample_trilinear(&v, [-2.0, 1.0, 1.0]), 0.0);
        assert_eq!(sample_trilinear(&v, [1.0, 1.0, 7.5]), 0.0);
        assert_eq!(sample_trilinear(&v, [f64::NAN, 1.0, 1.0]), 0.0);
        // Half inside: blends with the zero padding.
        assert_eq!(sample_trilinear(&v, [-0.5, 1.0, 1.0]), 2.5);
    }

    #[test]
    fn sampler_gradient_matches_finite_differences() {
        let v = Volume3::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |i, j, k| {
            ((i * 7 + j * 3 + k * 11) % 17) as f64 * 0.25
        })
        .unwrap();
        // Probe points chosen strictly inside cells so the piecewise
        // derivative is smooth around each probe.
        let probes = [
            [1.3, 2.7, 3.4],
            [0.2, 0.6, 0.8],
            [4.5, 1.1, 2.9],
            [2.25, 3.75, 1.5],
        ];
        let eps = 1e-6;
        for p in probes {
            let (_, g) = sample_trilinear_with_grad(&v, p);
            for axis in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[axis] += eps;
                lo[axis] -= eps;
                let fd =
                    (sample_trilinear(&v, hi) - sample_trilinear(&v, lo)) / (2.0 * eps);
                assert!(
                    (g[axis] - fd).abs() < 1e-6,
                    "axis {axis} at {p:?}: exact {} vs fd {fd}",
                    g[axis]
                );
            }
        }
    }

    #[test]
    fn warp_is_linear_in_the_moving_image() {
        let m1 = Volume3::from_fn([5, 5, 5], [1.0; 3], [0.0; 3], |i, j, k| {
            (i + 2 * j + 3 * k) as f64
        })
        .unwrap();
        let m2 = Volume3::from_fn([5, 5, 5], [1.0; 3], [0.0; 3], |i, j, k| {
            ((i * j) as f64).sin() + k as f64
        })
        .unwrap();
        let f = DisplacementField::from_fn([5, 5, 5], [1.0; 3], [0.0; 3], |i, j, k| {
            [0.3 * (i as f64 * 0.7).cos(), -0.2 * (j as f64), 0.1 * (k as f64)]
        })
        .unwrap();
        let (a, b) = (2.5, -1.25);
        let combo = m1
            .with_data(
                m1.data()
                    .iter()
                    .zip(m2.data())
                    .map(|(&x, &y)| a * x + b * y)
                    .collect(),
            )
            .unwrap();
        let w_combo = warp_trilinear(&combo, &f).unwrap();
        let w1 = warp_trilinear(&m1, &f).unwrap();
        let w2 = warp_trilinear(&m2, &f).unwrap();
        for idx in 0..combo.len() {
            let expect = a * w1.data()[idx] + b * w2.data()[idx];
            let got = w_combo.data()[idx];
            let scale = expect.abs().max(1.0);
            assert!((got - expect).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn warp_mask_zero_field_identity() {
        let m = Mask3::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |i, j, k| i + j + k < 5).unwrap();
        let f = DisplacementField::zeros([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(warp_mask(&m, &f, DEFAULT_MASK_THRESHOLD).unwrap(), m);
    }

    #[test]
    fn warp_mask_unit_shift_pulls_from_positive_side() {
        // output(x) = mask(x + 1) in x: the block appears shifted by -1.
        let m = Mask3::from_fn([4, 4, 4], [1.0; 3], [0.0; 3], |i, _, _| (2..=3).contains(&i))
            .unwrap();
        let f = constant_field([4, 4, 4], [1.0, 0.0, 0.0]);
        let w = warp_mask(&m, &f, DEFAULT_MASK_THRESHOLD).unwrap();
        for k in 0..4usize {
            for j in 0..4usize {
                for i in 0..4usize {
                    let expect = i + 1 <= 3 && i + 1 >= 2;
                    assert_eq!(w.at(i, j, k), expect, "at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn warp_mask_half_voxel_interface_is_unset() {
        // Half-space i >= 2 warped by u = (0.5,0,0): the indicator sampled at
        // i + 0.5 is 0.5 exactly at i = 1, and strict > 0.5 leaves it unset.
        let m = Mask3::from_fn([6, 3, 3], [1.0; 3], [0.0; 3], |i, _, _| i >= 2).unwrap();
        let f = constant_field([6, 3, 3], [0.5, 0.0, 0.0]);
        let w = warp_mask(&m, &f, 0.5).unwrap();
        assert!(!w.at(1, 1, 1));
        for i in 2..5 {
            assert!(w.at(i, 1, 1), "at i={i}");
        }
        // The last layer samples half into the zero padding: 0.5, unset too.
        assert!(!w.at(5, 1, 1));
    }

    #[test]
    fn jacobian_zero_field_is_one() {
        let f = DisplacementField::zeros([4, 5, 3], [1.0; 3], [0.0; 3]).unwrap();
        let j = jacobian_det_map(&f).unwrap();
        assert!(j.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn jacobian_rejects_tiny_grids() {
        let f = DisplacementField::zeros([2, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(jacobian_det_map(&f), Err(Error::TooSmall(_))));
    }

    #[test]
    fn jacobian_of_axis_stretch() {
        let f = DisplacementField::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |i, _, _| {
            [0.1 * i as f64, 0.0, 0.0]
        })
        .unwrap();
        let j = jacobian_det_map(&f).unwrap();
        // Differences (central and one-sided alike) are exact on linear
        // fields, so the whole map is det(diag(1.1, 1, 1)).
        for &x in j.data() {
            assert!((x - 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_uniform_scaling() {
        let c = 2.5;
        let f = DisplacementField::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |i, j, k| {
            [
                0.05 * (i as f64 - c),
                0.05 * (j as f64 - c),
                0.05 * (k as f64 - c),
            ]
        })
        .unwrap();
        let j = jacobian_det_map(&f).unwrap();
        for &x in j.data() {
            assert!((x - 1.157625).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_shift_examples() {
        let f = constant_field([3, 3, 3], [1.0, 1.0, 0.0]);
        assert_eq!(compose_with_shift(&f, [0, 0, 0]), f);
        let z = DisplacementField::zeros([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let shifted = compose_with_shift(&z, [2, 0, 0]);
        assert_eq!(shifted.vector_at(1, 1, 1), [2.0, 0.0, 0.0]);
        let g = compose_with_shift(&f, [-1, 0, 3]);
        assert_eq!(g.vector_at(0, 2, 1), [0.0, 1.0, 3.0]);
    }

    #[test]
    fn mm_conversion_scales_by_spacing() {
        let sp = [1.72, 1.72, 2.0];
        let f = DisplacementField::from_fn([3, 3, 3], sp, [0.0; 3], |_, _, _| [1.0, 1.0, 1.0])
            .unwrap();
        let mm = field_to_mm(&f);
        assert_eq!(mm.unit(), FieldUnit::Mm);
        assert_eq!(mm.vector_at(1, 1, 1), [1.72, 1.72, 2.0]);

        let z = DisplacementField::zeros([3, 3, 3], sp, [0.0; 3]).unwrap();
        assert!(field_to_mm(&z).data().iter().all(|&x| x == 0.0));

        let two = DisplacementField::from_fn([3, 3, 3], sp, [0.0; 3], |_, _, _| [2.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(field_to_mm(&two).vector_at(0, 0, 0), [3.44, 0.0, 0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn affine_fields_have_exact_interior_jacobian(
                a in proptest::array::uniform9(-0.2f64..0.2),
                b in proptest::array::uniform3(-1.0f64..1.0),
            ) {
                let f = DisplacementField::from_fn([7, 7, 7], [1.0; 3], [0.0; 3], |i, j, k| {
                    let x = [i as f64, j as f64, k as f64];
                    [
                        a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + b[0],
                        a[3] * x[0] + a[4] * x[1] + a[5] * x[2] + b[1],
                        a[6] * x[0] + a[7] * x[1] + a[8] * x[2] + b[2],
                    ]
                }).unwrap();
                let m = [
                    [1.0 + a[0], a[1], a[2]],
                    [a[3], 1.0 + a[4], a[5]],
                    [a[6], a[7], 1.0 + a[8]],
                ];
                let want = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                let jm = jacobian_det_map(&f).unwrap();
                // Differences are exact on affine fields everywhere.
                for &x in jm.data() {
                    prop_assert!((x - want).abs() < 1e-9);
                }
            }

            #[test]
            fn constant_fields_have_unit_jacobian(u in proptest::array::uniform3(-3.0f64..3.0)) {
                let f = DisplacementField::from_fn([5, 5, 5], [1.0; 3], [0.0; 3], |_, _, _| u)
                    .unwrap();
                let jm = jacobian_det_map(&f).unwrap();
                for &x in jm.data() {
                    prop_assert!((x - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
