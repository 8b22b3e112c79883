//! The registration objective: intensity similarity, bending energy, and
//! their analytic gradients with respect to the displacement field.
//!
//! All derivative code here is matched against finite differences in the
//! tests; the optimizer depends on these gradients being exact (up to
//! floating rounding) rather than approximate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::transform::{
    sample_trilinear, sample_trilinear_with_grad, DisplacementField, FieldUnit,
};
use crate::volume::Volume3;

/// Regularizer of the correlation denominator, guarding division when one
/// of the images is constant.
const NCC_EPS: f64 = 1e-12;

/// One loss evaluation, split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub similarity: f64,
    pub bending: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Compose the total from its parts; the identity
    /// `total == similarity + lambda * bending` holds exactly as stored.
    pub fn new(similarity: f64, bending: f64, lambda: f64) -> Self {
        Self { similarity, bending, lambda, total: similarity + lambda * bending }
    }
}

/// Mean-squared error and its gradient with respect to the warped image.
///
/// Value is `(1/N) * sum((warped - fixed)^2)`, gradient `(2/N)(warped - fixed)`.
pub fn similarity_mse(warped: &Volume3, fixed: &Volume3) -> Result<(f64, Volume3)> {
    if !warped.same_geometry(fixed) {
        return Err(Error::GeometryMismatch("similarity warped vs fixed".into()));
    }
    let n = warped.len() as f64;
    let terms: Vec<f64> = warped
        .data()
        .par_iter()
        .zip(fixed.data().par_iter())
        .map(|(&w, &f)| (w - f) * (w - f))
        .collect();
    let value = pairwise_sum(&terms) / n;
    let scale = 2.0 / n;
    let grad = warped
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(&w, &f)| scale * (w - f))
        .collect();
    Ok((value, warped.with_data(grad)?))
}

/// Negative local normalized cross-correlation, offered as an alternative
/// similarity for data where intensities drift between phases.
///
/// Global (whole-volume) NCC over the crop; value is `1 - ncc^2` so the
/// best score is 0 like the MSE. Gradient is with respect to the warped
/// image.
pub fn similarity_ncc(warped: &Volume3, fixed: &Volume3) -> Result<(f64, Volume3)> {
    if !warped.same_geometry(fixed) {
        return Err(Error::GeometryMismatch("similarity warped vs fixed".into()));
    }
    let n = warped.len() as f64;
    let mean_w = pairwise_sum(warped.data()) / n;
    let mean_f = pairwise_sum(fixed.data()) / n;
    let centered: Vec<[f64; 3]> = warped
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(&w, &f)| {
            let (cw, cf) = (w - mean_w, f - mean_f);
            [cw * cf, cw * cw, cf * cf]
        })
        .collect();
    let wf = pairwise_sum(&centered.iter().map(|t| t[0]).collect::<Vec<_>>());
    let ww = pairwise_sum(&centered.iter().map(|t| t[1]).collect::<Vec<_>>());
    let ff = pairwise_sum(&centered.iter().map(|t| t[2]).collect::<Vec<_>>());
    let denom = ww * ff + NCC_EPS;
    let value = 1.0 - wf * wf / denom;
    // d(value)/dw_i = -(2 wf / denom) * cf_i + (2 wf^2 ww_coeff) ...
    // derivative of wf^2/(ww*ff): (2 wf cf_i * ww*ff - wf^2 * ff * 2 cw_i)/(ww*ff)^2,
    // then distribute the mean-centering (sums of cw and cf are zero, so the
    // mean terms vanish).
    let g1 = -2.0 * wf / denom;
    let g2 = 2.0 * wf * wf * ff / (denom * denom);
    let grad: Vec<f64> = warped
        .data()
        .iter()
        .zip(fixed.data())
        .map(|(&w, &f)| g1 * (f - mean_f) + g2 * (w - mean_w))
        .collect();
    Ok((value, warped.with_data(grad)?))
}

/// Indices of the stencil responses inside a per-voxel record: the three
/// straight second differences, then the three mixed ones.
const XX: usize = 0;
const YY: usize = 1;
const ZZ: usize = 2;
const XY: usize = 3;
const XZ: usize = 4;
const YZ: usize = 5;

/// Straight central second difference along stride `s`, zero where the
/// 3-point stencil does not fit (`c` is the coordinate along that axis).
#[inline]
fn straight(u: &[f64], idx: usize, s: usize, c: usize, n: usize) -> f64 {
    if c >= 1 && c + 1 < n {
        u[idx - s] - 2.0 * u[idx] + u[idx + s]
    } else {
        0.0
    }
}

/// Mixed second difference over strides `sa`, `sb`: the 4-point cross with
/// weight 1/4, zero where it does not fit in either axis.
#[inline]
fn cross(u: &[f64], idx: usize, sa: usize, sb: usize, a: usize, na: usize, b: usize, nb: usize) -> f64 {
    if a >= 1 && a + 1 < na && b >= 1 && b + 1 < nb {
        0.25 * (u[idx + sa + sb] - u[idx + sa - sb] - u[idx - sa + sb] + u[idx - sa - sb])
    } else {
        0.0
    }
}

/// All six stencil responses of one component plane at one voxel.
#[inline]
fn stencil_at(u: &[f64], dims: [usize; 3], idx: usize, i: usize, j: usize, k: usize) -> [f64; 6] {
    let [nx, ny, nz] = dims;
    let sx = 1usize;
    let sy = nx;
    let sz = nx * ny;
    [
        straight(u, idx, sx, i, nx),
        straight(u, idx, sy, j, ny),
        straight(u, idx, sz, k, nz),
        cross(u, idx, sx, sy, i, nx, j, ny),
        cross(u, idx, sx, sz, i, nx, k, nz),
        cross(u, idx, sy, sz, j, ny, k, nz),
    ]
}

/// Bending integrand at one voxel of one component:
/// `uxx^2 + uyy^2 + uzz^2 + 2(uxy^2 + uxz^2 + uyz^2)`.
#[inline]
fn quad_term(s: &[f64; 6]) -> f64 {
    s[XX] * s[XX]
        + s[YY] * s[YY]
        + s[ZZ] * s[ZZ]
        + 2.0 * (s[XY] * s[XY] + s[XZ] * s[XZ] + s[YZ] * s[YZ])
}

/// Resize `buf` without the zero-fill memset when it is already the right
/// length; every element is overwritten by the following pass anyway.
#[inline]
fn ensure_len(buf: &mut Vec<f64>, n: usize) {
    if buf.len() != n {
        buf.clear();
        buf.resize(n, 0.0);
    }
}

/// Sum of the bending integrand over one component plane. `terms` is the
/// reused reduction buffer; its previous contents are discarded.
fn bending_quad_sum(u: &[f64], dims: [usize; 3], terms: &mut Vec<f64>) -> f64 {
    let [nx, ny, _] = dims;
    let slab = nx * ny;
    ensure_len(terms, u.len());
    terms.par_chunks_mut(slab).enumerate().for_each(|(k, row)| {
        let mut idx = k * slab;
        for j in 0..ny {
            for i in 0..nx {
                row[j * nx + i] = quad_term(&stencil_at(u, dims, idx, i, j, k));
                idx += 1;
            }
        }
    });
    pairwise_sum(terms)
}

/// Accumulate `scale` times the adjoint of the bending stencils applied to
/// their own responses into `grad`, fused into one pass over `u`.
///
/// The stencils are symmetric, so the gradient at a voxel is the same
/// stencil applied to the zero-padded response planes, borders included
/// (border displacements appear in interior stencils). Two voxels in from
/// every border all referenced responses are unmasked and the composition
/// collapses to fixed kernels: the 5-point biharmonic per axis, and for each
/// mixed pair the autocorrelation of the cross stencil on even offsets.
/// Voxels nearer a border take the generic masked path.
fn accumulate_adjoint(u: &[f64], dims: [usize; 3], scale: f64, grad: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let sx = 1usize;
    let sy = nx;
    let sz = nx * ny;

    grad.par_chunks_mut(sz).enumerate().for_each(|(k, row)| {
        let in_z = k >= 2 && k + 2 < nz;
        for j in 0..ny {
            let in_yz = in_z && j >= 2 && j + 2 < ny;
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);

                let out = if in_yz && i >= 2 && i + 2 < nx {
                    let bi_x = u[idx - 2 * sx] - 4.0 * u[idx - sx] + 6.0 * u[idx]
                        - 4.0 * u[idx + sx]
                        + u[idx + 2 * sx];
                    let bi_y = u[idx - 2 * sy] - 4.0 * u[idx - sy] + 6.0 * u[idx]
                        - 4.0 * u[idx + sy]
                        + u[idx + 2 * sy];
                    let bi_z = u[idx - 2 * sz] - 4.0 * u[idx - sz] + 6.0 * u[idx]
                        - 4.0 * u[idx + sz]
                        + u[idx + 2 * sz];

                    let auto_cross = |sa: usize, sb: usize| -> f64 {
                        (u[idx + 2 * sa + 2 * sb]
                            + u[idx + 2 * sa - 2 * sb]
                            + u[idx - 2 * sa + 2 * sb]
                            + u[idx - 2 * sa - 2 * sb]
                            - 2.0
                                * (u[idx + 2 * sa]
                                    + u[idx - 2 * sa]
                                    + u[idx + 2 * sb]
                                    + u[idx - 2 * sb])
                            + 4.0 * u[idx])
                            / 16.0
                    };
                    let mixed = auto_cross(sx, sy) + auto_cross(sx, sz) + auto_cross(sy, sz);
                    bi_x + bi_y + bi_z + 2.0 * mixed
                } else {
                    let mut acc = -2.0
                        * (straight(u, idx, sx, i, nx)
                            + straight(u, idx, sy, j, ny)
                            + straight(u, idx, sz, k, nz));
                    if i >= 1 {
                        acc += straight(u, idx - sx, sx, i - 1, nx);
                    }
                    if i + 1 < nx {
                        acc += straight(u, idx + sx, sx, i + 1, nx);
                    }
                    if j >= 1 {
                        acc += straight(u, idx - sy, sy, j - 1, ny);
                    }
                    if j + 1 < ny {
                        acc += straight(u, idx + sy, sy, j + 1, ny);
                    }
                    if k >= 1 {
                        acc += straight(u, idx - sz, sz, k - 1, nz);
                    }
                    if k + 1 < nz {
                        acc += straight(u, idx + sz, sz, k + 1, nz);
                    }

                    // Mixed terms carry weight 2 in the energy.
                    let mut mixed = 0.0;
                    let mut add_cross =
                        |sa: usize, sb: usize, a: usize, na: usize, b: usize, nb: usize| {
                            if a >= 1 && b >= 1 {
                                mixed += 0.25 * cross(u, idx - sa - sb, sa, sb, a - 1, na, b - 1, nb);
                            }
                            if a >= 1 && b + 1 < nb {
                                mixed -= 0.25 * cross(u, idx - sa + sb, sa, sb, a - 1, na, b + 1, nb);
                            }
                            if a + 1 < na && b >= 1 {
                                mixed -= 0.25 * cross(u, idx + sa - sb, sa, sb, a + 1, na, b - 1, nb);
                            }
                            if a + 1 < na && b + 1 < nb {
                                mixed += 0.25 * cross(u, idx + sa + sb, sa, sb, a + 1, na, b + 1, nb);
                            }
                        };
                    add_cross(sx, sy, i, nx, j, ny);
                    add_cross(sx, sz, i, nx, k, nz);
                    add_cross(sy, sz, j, ny, k, nz);

                    acc + 2.0 * mixed
                };

                row[j * nx + i] += scale * out;
            }
        }
    });
}

/// Bending energy of the field and its exact gradient.
///
/// Value per voxel and component: `uxx^2 + uyy^2 + uzz^2 + 2(uxy^2 + uxz^2 +
/// uyz^2)` with central second differences on the unit voxel grid, averaged
/// over the voxel count. Terms whose stencil crosses the border contribute
/// zero. The gradient is the exact adjoint of the same discrete stencils.
pub fn bending_energy(field: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let dims = field.dims();
    let [nx, ny, nz] = dims;
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::TooSmall(format!("bending energy needs dims >= 3, got {dims:?}")));
    }
    let n = nx * ny * nz;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0f64; 3 * n];
    let mut terms = Vec::new();

    for c in 0..3 {
        let u = field.comp(c);
        value += bending_quad_sum(u, dims, &mut terms) * inv_n;
        accumulate_adjoint(u, dims, 2.0 * inv_n, &mut grad[c * n..(c + 1) * n]);
    }

    let grad_field =
        DisplacementField::new(dims, field.spacing(), field.origin(), FieldUnit::Voxel, grad)?;
    Ok((value, grad_field))
}

/// Which intensity term drives the registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Mse,
    Ncc,
}

/// Reusable buffers for the raw loss paths below. One instance per pyramid
/// level amortizes every per-evaluation allocation in the optimizer's inner
/// loop; buffers are sized lazily on first use.
pub(crate) struct EvalScratch {
    /// Reduction buffer, one term per voxel.
    terms: Vec<f64>,
    /// Warped moving intensities on the fixed grid.
    warped: Vec<f64>,
    /// Moving-image spatial gradient at each warped sample point.
    mgrad: Vec<[f64; 3]>,
}

impl EvalScratch {
    pub(crate) fn new() -> Self {
        Self { terms: Vec::new(), warped: Vec::new(), mgrad: Vec::new() }
    }
}

/// Warp the moving image by the component-major voxel-unit field `fd`,
/// values only.
fn warp_values_into(moving: &Volume3, fd: &[f64], warped: &mut Vec<f64>) {
    let [nx, ny, _] = moving.dims();
    let n = moving.len();
    let slab = nx * ny;
    ensure_len(warped, n);
    warped.par_chunks_mut(slab).enumerate().for_each(|(k, row)| {
        let mut idx = k * slab;
        for j in 0..ny {
            for i in 0..nx {
                let p =
                    [i as f64 + fd[idx], j as f64 + fd[n + idx], k as f64 + fd[2 * n + idx]];
                row[j * nx + i] = sample_trilinear(moving, p);
                idx += 1;
            }
        }
    });
}

/// Same warp, also keeping the sampler's exact per-cell derivative so the
/// similarity gradient can be chained onto the field.
fn warp_with_grad_into(
    moving: &Volume3,
    fd: &[f64],
    warped: &mut Vec<f64>,
    mgrad: &mut Vec<[f64; 3]>,
) {
    let [nx, ny, _] = moving.dims();
    let n = moving.len();
    let slab = nx * ny;
    ensure_len(warped, n);
    if mgrad.len() != n {
        mgrad.clear();
        mgrad.resize(n, [0.0; 3]);
    }
    warped
        .par_chunks_mut(slab)
        .zip(mgrad.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, (wrow, grow))| {
            let mut idx = k * slab;
            for j in 0..ny {
                for i in 0..nx {
                    let p =
                        [i as f64 + fd[idx], j as f64 + fd[n + idx], k as f64 + fd[2 * n + idx]];
                    let (w, g) = sample_trilinear_with_grad(moving, p);
                    wrow[j * nx + i] = w;
                    grow[j * nx + i] = g;
                    idx += 1;
                }
            }
        });
}

/// Whole-volume NCC sufficient statistics, shared by the value and gradient
/// paths so both see identical numbers.
struct NccStats {
    mean_w: f64,
    mean_f: f64,
    wf: f64,
    ww: f64,
    ff: f64,
}

fn ncc_stats(warped: &[f64], fixed: &[f64], terms: &mut Vec<f64>) -> NccStats {
    let n = warped.len() as f64;
    let mean_w = pairwise_sum(warped) / n;
    let mean_f = pairwise_sum(fixed) / n;
    ensure_len(terms, warped.len());

    let mut moment = |f: &(dyn Fn(f64, f64) -> f64 + Sync)| -> f64 {
        terms
            .par_iter_mut()
            .zip(warped.par_iter())
            .zip(fixed.par_iter())
            .for_each(|((t, &w), &x)| *t = f(w - mean_w, x - mean_f));
        pairwise_sum(terms)
    };
    let wf = moment(&|cw, cf| cw * cf);
    let ww = moment(&|cw, _| cw * cw);
    let ff = moment(&|_, cf| cf * cf);
    NccStats { mean_w, mean_f, wf, ww, ff }
}

/// Similarity value given the already-warped intensities.
fn similarity_value_raw(
    similarity: Similarity,
    warped: &[f64],
    fixed: &[f64],
    terms: &mut Vec<f64>,
) -> f64 {
    match similarity {
        Similarity::Mse => {
            ensure_len(terms, warped.len());
            terms
                .par_iter_mut()
                .zip(warped.par_iter())
                .zip(fixed.par_iter())
                .for_each(|((t, &w), &f)| *t = (w - f) * (w - f));
            pairwise_sum(terms) / warped.len() as f64
        }
        Similarity::Ncc => {
            let st = ncc_stats(warped, fixed, terms);
            let denom = st.ww * st.ff + NCC_EPS;
            1.0 - st.wf * st.wf / denom
        }
    }
}

/// Objective value at a raw field, no gradient. This is the line-search
/// fast path; geometry is the caller's responsibility. Divergence shows up
/// as a non-finite total rather than an error.
pub(crate) fn loss_value_raw(
    moving: &Volume3,
    fixed: &Volume3,
    fd: &[f64],
    lambda: f64,
    similarity: Similarity,
    scratch: &mut EvalScratch,
) -> LossBreakdown {
    let n = moving.len();
    debug_assert!(moving.same_geometry(fixed));
    debug_assert_eq!(fd.len(), 3 * n);

    warp_values_into(moving, fd, &mut scratch.warped);
    let sim = similarity_value_raw(similarity, &scratch.warped, fixed.data(), &mut scratch.terms);

    let inv_n = 1.0 / n as f64;
    let mut bend = 0.0;
    for c in 0..3 {
        bend += bending_quad_sum(&fd[c * n..(c + 1) * n], moving.dims(), &mut scratch.terms) * inv_n;
    }
    LossBreakdown::new(sim, bend, lambda)
}

/// Objective gradient at a raw field, written into `grad`; no values. The
/// optimizer calls this once per accepted iterate, whose value the line
/// search already computed.
pub(crate) fn loss_grad_only(
    moving: &Volume3,
    fixed: &Volume3,
    fd: &[f64],
    lambda: f64,
    similarity: Similarity,
    grad: &mut [f64],
    scratch: &mut EvalScratch,
) {
    let n = moving.len();
    debug_assert!(moving.same_geometry(fixed));
    debug_assert_eq!(fd.len(), 3 * n);
    debug_assert_eq!(grad.len(), 3 * n);

    warp_with_grad_into(moving, fd, &mut scratch.warped, &mut scratch.mgrad);
    let warped = &scratch.warped;
    let mgrad = &scratch.mgrad;
    let fx = fixed.data();

    // Similarity gradient chained through the sampler:
    // dS/du_c(x) = dS/dwarped(x) * dM/dxi_c at xi = x + u(x).
    match similarity {
        Similarity::Mse => {
            let scale = 2.0 / n as f64;
            grad.par_chunks_mut(n).enumerate().for_each(|(c, gc)| {
                for (idx, g) in gc.iter_mut().enumerate() {
                    *g = scale * (warped[idx] - fx[idx]) * mgrad[idx][c];
                }
            });
        }
        Similarity::Ncc => {
            let st = ncc_stats(warped, fx, &mut scratch.terms);
            let denom = st.ww * st.ff + NCC_EPS;
            let g1 = -2.0 * st.wf / denom;
            let g2 = 2.0 * st.wf * st.wf * st.ff / (denom * denom);
            grad.par_chunks_mut(n).enumerate().for_each(|(c, gc)| {
                for (idx, g) in gc.iter_mut().enumerate() {
                    let s = g1 * (fx[idx] - st.mean_f) + g2 * (warped[idx] - st.mean_w);
                    *g = s * mgrad[idx][c];
                }
            });
        }
    }

    let inv_n = 1.0 / n as f64;
    for c in 0..3 {
        accumulate_adjoint(
            &fd[c * n..(c + 1) * n],
            moving.dims(),
            lambda * 2.0 * inv_n,
            &mut grad[c * n..(c + 1) * n],
        );
    }
}

/// Objective value and gradient at a raw field. The breakdown is bitwise
/// the one `loss_value_raw` produces at the same point.
pub(crate) fn loss_grad_raw(
    moving: &Volume3,
    fixed: &Volume3,
    fd: &[f64],
    lambda: f64,
    similarity: Similarity,
    grad: &mut [f64],
    scratch: &mut EvalScratch,
) -> LossBreakdown {
    loss_grad_only(moving, fixed, fd, lambda, similarity, grad, scratch);
    loss_value_raw(moving, fixed, fd, lambda, similarity, scratch)
}

/// Full objective: similarity of the warped moving image against the fixed
/// image, plus `lambda` times the bending energy of the field. Returns the
/// breakdown and the gradient with respect to the field.
///
/// The similarity gradient reaches the field through the chain rule of the
/// trilinear sampler: `dS/du(x) = dS/dwarped(x) * dM/dxi` at `xi = x + u(x)`,
/// with the sampler's exact per-cell derivative.
pub fn total_loss(
    moving: &Volume3,
    fixed: &Volume3,
    field: &DisplacementField,
    lambda: f64,
    similarity: Similarity,
) -> Result<(LossBreakdown, DisplacementField)> {
    if !moving.same_geometry(fixed) {
        return Err(Error::GeometryMismatch("total_loss moving vs fixed".into()));
    }
    if !field.same_grid(moving) {
        return Err(Error::GeometryMismatch("total_loss field vs images".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::ConfigInvalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let [nx, ny, nz] = moving.dims();
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::TooSmall(format!(
            "bending energy needs dims >= 3, got {:?}",
            moving.dims()
        )));
    }

    let mut scratch = EvalScratch::new();
    let mut grad = vec![0.0f64; 3 * field.voxel_count()];
    let breakdown =
        loss_grad_raw(moving, fixed, field.data(), lambda, similarity, &mut grad, &mut scratch);
    let grad_field =
        DisplacementField::new(field.dims(), field.spacing(), field.origin(), FieldUnit::Voxel, grad)?;
    Ok((breakdown, grad_field))
}
