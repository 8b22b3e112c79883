//! Pairwise displacement-field optimization and the full-cycle tracker.
//!
//! A field is estimated per image pair by direct first-order optimization of
//! the warp + similarity + bending objective over a coarse-to-fine pyramid.
//! Adam-style steps are gated by a monotone backtracking rule: a step that
//! would raise the loss is rejected and retried at half the rate, so the
//! recorded loss trace never increases within a level.

use serde::{Deserialize, Serialize};

use crate::energy::{loss_grad_only, loss_grad_raw, loss_value_raw, EvalScratch, LossBreakdown, Similarity};
use crate::error::{Error, Result};
use crate::transform::{DisplacementField, FieldUnit};
use crate::volume::{CineSeries, Volume3};

/// Iterations the early-stop rule looks back over.
const STOP_WINDOW: usize = 10;

/// Line-search floor: give up on a level when the rate decays below this
/// fraction of its starting value.
const STALL_FACTOR: f64 = 1e-12;

/// Hyperparameters for a registration run.
///
/// `seed` is carried for config provenance and forward compatibility; the
/// optimizer itself is deterministic and does not draw random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub lambda: f64,
    /// Downsample factors, coarse to fine; strictly decreasing, ending at 1.
    pub levels: Vec<usize>,
    pub max_iters_per_level: usize,
    /// Adam step size in the voxel units of each pyramid level.
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Relative total-loss improvement over a 10-iteration window below
    /// which a level stops early.
    pub stop_rel_tol: f64,
    pub seed: u64,
    /// Seed each phase after the first with the previous phase's field.
    pub warm_start: bool,
    pub similarity: Similarity,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            levels: vec![4, 2, 1],
            max_iters_per_level: 300,
            step_size: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stop_rel_tol: 1e-5,
            seed: 0,
            warm_start: true,
            similarity: Similarity::Mse,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::ConfigInvalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.levels.is_empty() {
            return Err(Error::ConfigInvalid("levels must not be empty".into()));
        }
        if *self.levels.last().unwrap() != 1 {
            return Err(Error::ConfigInvalid(format!(
                "levels must end at factor 1, got {:?}",
                self.levels
            )));
        }
        if self.levels.windows(2).any(|w| w[0] <= w[1]) || self.levels.iter().any(|&f| f == 0) {
            return Err(Error::ConfigInvalid(format!(
                "levels must be strictly decreasing positive factors, got {:?}",
                self.levels
            )));
        }
        if self.max_iters_per_level == 0 {
            return Err(Error::ConfigInvalid("max_iters_per_level must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::ConfigInvalid(format!("step_size {} must be > 0", self.step_size)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigInvalid(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::ConfigInvalid(format!("adam_eps {} must be > 0", self.adam_eps)));
        }
        if !(self.stop_rel_tol >= 0.0) || !self.stop_rel_tol.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "stop_rel_tol {} must be >= 0",
                self.stop_rel_tol
            )));
        }
        Ok(())
    }
}

/// Outcome of one pairwise registration.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Accepted per-iteration losses, concatenated across levels.
    pub loss_trace: Vec<LossBreakdown>,
    /// Accepted iterations per level, coarse to fine.
    pub iterations_used: Vec<usize>,
    /// Whether the finest level terminated before exhausting its iteration
    /// budget (early-stop window or line-search floor).
    pub converged: bool,
}

fn ceil_div(n: usize, f: usize) -> usize {
    n.div_ceil(f)
}

/// Average-pool by `factor` with zero padding up to the next multiple, so
/// every output voxel divides by the full factor^3 block size.
pub fn downsample_volume(v: &Volume3, factor: usize) -> Volume3 {
    if factor == 1 {
        return v.clone();
    }
    let [nx, ny, nz] = v.dims();
    let dims = [ceil_div(nx, factor), ceil_div(ny, factor), ceil_div(nz, factor)];
    let inv = 1.0 / (factor * factor * factor) as f64;
    let sp = v.spacing();
    // The coarse voxel center sits mid-block in fine coordinates.
    let half = (factor as f64 - 1.0) / 2.0;
    let origin = [
        v.origin()[0] + half * sp[0],
        v.origin()[1] + half * sp[1],
        v.origin()[2] + half * sp[2],
    ];
    let spacing = [sp[0] * factor as f64, sp[1] * factor as f64, sp[2] * factor as f64];
    Volume3::from_fn(dims, spacing, origin, |ci, cj, ck| {
        let mut sum = 0.0;
        for dk in 0..factor {
            let k = ck * factor + dk;
            if k >= nz {
                continue;
            }
            for dj in 0..factor {
                let j = cj * factor + dj;
                if j >= ny {
                    continue;
                }
                for di in 0..factor {
                    let i = ci * factor + di;
                    if i >= nx {
                        continue;
                    }
                    sum += v.at(i, j, k);
                }
            }
        }
        sum * inv
    })
    .expect("pooled volume stays valid")
}

/// Restrict a fine displacement field to a coarser grid: average-pool each
/// component, then rescale displacements into the coarse voxel units.
fn restrict_field(data: &[f64], dims: [usize; 3], factor: usize) -> (Vec<f64>, [usize; 3]) {
    if factor == 1 {
        return (data.to_vec(), dims);
    }
    let [nx, ny, nz] = dims;
    let out_dims = [ceil_div(nx, factor), ceil_div(ny, factor), ceil_div(nz, factor)];
    let n_out = out_dims[0] * out_dims[1] * out_dims[2];
    let n_in = nx * ny * nz;
    let inv = 1.0 / (factor * factor * factor) as f64;
    let scale = 1.0 / factor as f64;
    let mut out = vec![0.0; 3 * n_out];
    for c in 0..3 {
        let plane = &data[c * n_in..(c + 1) * n_in];
        let mut idx = 0;
        for ck in 0..out_dims[2] {
            for cj in 0..out_dims[1] {
                for ci in 0..out_dims[0] {
                    let mut sum = 0.0;
                    for dk in 0..factor {
                        let k = ck * factor + dk;
                        if k >= nz {
                            continue;
                        }
                        for dj in 0..factor {
                            let j = cj * factor + dj;
                            if j >= ny {
                                continue;
                            }
                            for di in 0..factor {
                                let i = ci * factor + di;
                                if i >= nx {
                                    continue;
                                }
                                sum += plane[i + nx * (j + ny * k)];
                            }
                        }
                    }
                    out[c * n_out + idx] = sum * inv * scale;
                    idx += 1;
                }
            }
        }
    }
    (out, out_dims)
}

/// Trilinear sample of a scalar plane with clamp-to-edge boundary handling.
fn sample_plane_clamped(plane: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let clamp = |x: f64, n: usize| x.max(0.0).min((n - 1) as f64);
    let x = clamp(p[0], nx);
    let y = clamp(p[1], ny);
    let z = clamp(p[2], nz);
    let x0 = (x.floor() as usize).min(nx - 1);
    let y0 = (y.floor() as usize).min(ny - 1);
    let z0 = (z.floor() as usize).min(nz - 1);
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
    let at = |i: usize, j: usize, k: usize| plane[i + nx * (j + ny * k)];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Upsample a coarse field (factor `f_coarse`) onto the grid of a finer
/// level (factor `f_fine`), scaling displacement magnitudes by the
/// resolution ratio.
fn prolong_field(
    coarse: &[f64],
    coarse_dims: [usize; 3],
    f_coarse: usize,
    fine_dims: [usize; 3],
    f_fine: usize,
) -> Vec<f64> {
    let n_c = coarse_dims[0] * coarse_dims[1] * coarse_dims[2];
    let n_f = fine_dims[0] * fine_dims[1] * fine_dims[2];
    let ratio = f_fine as f64 / f_coarse as f64;
    let scale = f_coarse as f64 / f_fine as f64;
    let mut out = vec![0.0; 3 * n_f];
    for c in 0..3 {
        let plane = &coarse[c * n_c..(c + 1) * n_c];
        let mut idx = 0;
        for k in 0..fine_dims[2] {
            for j in 0..fine_dims[1] {
                for i in 0..fine_dims[0] {
                    // Align voxel centers between grids of different step.
                    let p = [
                        (i as f64 + 0.5) * ratio - 0.5,
                        (j as f64 + 0.5) * ratio - 0.5,
                        (k as f64 + 0.5) * ratio - 0.5,
                    ];
                    out[c * n_f + idx] = scale * sample_plane_clamped(plane, coarse_dims, p);
                    idx += 1;
                }
            }
        }
    }
    out
}

struct LevelImages {
    factor: usize,
    moving: Volume3,
    fixed: Volume3,
}

/// Estimate the displacement field registering `moving` onto `fixed`.
///
/// `init`, when given, seeds the coarsest level after restriction. The run
/// is fully deterministic for fixed inputs and configuration.
pub fn register_pair(
    moving: &Volume3,
    fixed: &Volume3,
    init: Option<&DisplacementField>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if !moving.same_geometry(fixed) {
        return Err(Error::GeometryMismatch("register moving vs fixed".into()));
    }
    if let Some(f) = init {
        if !f.same_grid(moving) {
            return Err(Error::GeometryMismatch("register init field vs images".into()));
        }
    }

    let pyramid: Vec<LevelImages> = cfg
        .levels
        .iter()
        .map(|&factor| LevelImages {
            factor,
            moving: downsample_volume(moving, factor),
            fixed: downsample_volume(fixed, factor),
        })
        .collect();

    let coarsest = &pyramid[0];
    let mut u: Vec<f64> = match init {
        Some(f) => restrict_field(f.data(), f.dims(), coarsest.factor).0,
        None => vec![0.0; 3 * coarsest.fixed.len()],
    };

    let mut loss_trace = Vec::new();
    let mut iterations_used = Vec::with_capacity(pyramid.len());
    let mut finest_stopped_early = false;

    for (li, level) in pyramid.iter().enumerate() {
        if li > 0 {
            let prev = &pyramid[li - 1];
            u = prolong_field(
                &u,
                prev.fixed.dims(),
                prev.factor,
                level.fixed.dims(),
                level.factor,
            );
        }

        let (accepted, stopped_early) = optimize_level(&mut u, level, cfg, &mut loss_trace)?;
        iterations_used.push(accepted);
        if li + 1 == pyramid.len() {
            finest_stopped_early = stopped_early;
        }
    }

    let finest = pyramid.last().unwrap();
    let field = DisplacementField::new(
        finest.fixed.dims(),
        finest.fixed.spacing(),
        finest.fixed.origin(),
        FieldUnit::Voxel,
        u,
    )
    .map_err(|_| Error::NonFiniteLoss)?;

    Ok(RegistrationResult { field, loss_trace, iterations_used, converged: finest_stopped_early })
}

/// Run Adam with monotone backtracking on one pyramid level. Returns the
/// number of accepted iterations and whether the level stopped before its
/// budget.
fn optimize_level(
    u: &mut Vec<f64>,
    level: &LevelImages,
    cfg: &RegistrationConfig,
    loss_trace: &mut Vec<LossBreakdown>,
) -> Result<(usize, bool)> {
    let dims = level.fixed.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::TooSmall(format!("bending energy needs dims >= 3, got {dims:?}")));
    }
    let nc = u.len();
    let mut scratch = EvalScratch::new();
    let mut grad = vec![0.0f64; nc];

    // Candidates during the line search only need the loss value; the
    // gradient is computed once per accepted iterate.
    let mut loss = loss_grad_raw(
        &level.moving,
        &level.fixed,
        u,
        cfg.lambda,
        cfg.similarity,
        &mut grad,
        &mut scratch,
    );
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let level_trace_start = loss_trace.len();
    loss_trace.push(loss);
    let mut accepted = 1usize;

    let mut m = vec![0.0f64; nc];
    let mut v = vec![0.0f64; nc];
    let mut dir = vec![0.0f64; nc];
    let mut cand = vec![0.0f64; nc];
    let mut beta1_pow = 1.0f64;
    let mut beta2_pow = 1.0f64;
    let lr0 = cfg.step_size;
    let mut lr = lr0;
    let mut stopped_early = false;

    while accepted < cfg.max_iters_per_level {
        // Early stop: relative improvement over the lookback window.
        if accepted > STOP_WINDOW {
            let here = loss_trace.len() - 1;
            let then = loss_trace[here - STOP_WINDOW].total;
            let now = loss_trace[here].total;
            if (then - now) <= cfg.stop_rel_tol * then.max(1e-12) {
                stopped_early = true;
                break;
            }
        }

        beta1_pow *= cfg.adam_beta1;
        beta2_pow *= cfg.adam_beta2;
        let bias1 = 1.0 - beta1_pow;
        let bias2 = 1.0 - beta2_pow;
        for ci in 0..nc {
            m[ci] = cfg.adam_beta1 * m[ci] + (1.0 - cfg.adam_beta1) * grad[ci];
            v[ci] = cfg.adam_beta2 * v[ci] + (1.0 - cfg.adam_beta2) * grad[ci] * grad[ci];
            let mhat = m[ci] / bias1;
            let vhat = v[ci] / bias2;
            dir[ci] = mhat / (vhat.sqrt() + cfg.adam_eps);
        }

        // Backtracking: shrink the rate until the step stops hurting. A
        // worse or non-finite candidate is rejected, not fatal.
        let mut accepted_step = false;
        while lr >= STALL_FACTOR * lr0 {
            for ci in 0..nc {
                cand[ci] = u[ci] - lr * dir[ci];
            }
            let cand_loss = loss_value_raw(
                &level.moving,
                &level.fixed,
                &cand,
                cfg.lambda,
                cfg.similarity,
                &mut scratch,
            );
            if cand_loss.total.is_finite() && cand_loss.total <= loss.total {
                std::mem::swap(u, &mut cand);
                loss = cand_loss;
                loss_grad_only(
                    &level.moving,
                    &level.fixed,
                    u,
                    cfg.lambda,
                    cfg.similarity,
                    &mut grad,
                    &mut scratch,
                );
                lr = (lr * 1.05).min(lr0);
                accepted_step = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted_step {
            // Line search hit the floor: no descent direction at any rate.
            stopped_early = true;
            break;
        }
        loss_trace.push(loss);
        accepted += 1;
    }

    debug_assert!(
        loss_trace[level_trace_start..]
            .windows(2)
            .all(|w| w[1].total <= w[0].total + 1e-9),
        "level trace must be non-increasing"
    );
    Ok((accepted, stopped_early))
}

/// Register the reference phase onto every phase of the series in order,
/// optionally warm-starting each phase from its predecessor's field.
pub fn track_cycle(series: &CineSeries, cfg: &RegistrationConfig) -> Result<Vec<RegistrationResult>> {
    cfg.validate()?;
    if series.masks.is_none() {
        return Err(Error::MissingMasks);
    }
    let moving = &series.phases[series.reference_phase];
    let mut results: Vec<RegistrationResult> = Vec::with_capacity(series.phase_count());
    for t in 0..series.phase_count() {
        let init = if cfg.warm_start && t >= 1 { results.last().map(|r| &r.field) } else { None };
        let result = register_pair(moving, &series.phases[t], init, cfg)
            .map_err(|e| Error::AtPhase(t, Box::new(e)))?;
        results.push(result);
    }
    Ok(results)
}
