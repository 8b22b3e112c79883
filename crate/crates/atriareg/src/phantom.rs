//! Synthetic cine series with analytic ground truth.
//!
//! A triaxial ellipsoid inflates and deflates over the cycle. Phase t is an
//! exact pull-forward of phase 0 under a radial scaling about the center, so
//! the matching pull-back displacement field is known in closed form and the
//! tracking pipeline can be scored against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::transform::DisplacementField;
use crate::volume::{CineSeries, Mask3, Volume3};

/// Geometry and dynamics of the synthetic series.
///
/// Defaults follow the acquisition this pipeline targets: a 96 by 96 by 36
/// grid at 1.72 x 1.72 x 2.0 mm over 20 cardiac phases, with the structure
/// at its smallest in phase 0 and largest at `peak_phase`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub phases: usize,
    /// Ellipsoid semi-axes at phase 0, in voxels.
    pub base_radii_voxels: [f64; 3],
    /// Ellipsoid center in voxel coordinates; the grid center when unset.
    pub center: Option<[f64; 3]>,
    /// Linear scale at the largest phase, > 1.
    pub peak_scale: f64,
    /// Phase index where the scale curve tops out.
    pub peak_phase: usize,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [96, 96, 36],
            spacing: [1.72, 1.72, 2.0],
            phases: 20,
            base_radii_voxels: [18.0, 15.0, 10.0],
            center: None,
            peak_scale: 1.25,
            peak_phase: 8,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::ConfigInvalid("phantom dims must be nonzero".into()));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::ConfigInvalid("phantom spacing must be positive".into()));
        }
        if self.phases == 0 {
            return Err(Error::ConfigInvalid("phantom needs at least one phase".into()));
        }
        if self.base_radii_voxels.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::ConfigInvalid("ellipsoid radii must be positive".into()));
        }
        if let Some(c) = self.center {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::ConfigInvalid("phantom center must be finite".into()));
            }
        }
        if !(self.peak_scale.is_finite() && self.peak_scale > 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "peak_scale {} must exceed 1",
                self.peak_scale
            )));
        }
        if self.peak_phase == 0 || self.peak_phase >= self.phases {
            return Err(Error::ConfigInvalid(format!(
                "peak_phase {} outside 1..{}",
                self.peak_phase, self.phases
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn resolved_center(&self) -> [f64; 3] {
        self.center.unwrap_or([
            self.dims[0] as f64 / 2.0,
            self.dims[1] as f64 / 2.0,
            self.dims[2] as f64 / 2.0,
        ])
    }
}

/// Per-phase linear scale factor:
///
/// ```text
/// s_t = 1 + (peak_scale - 1) * sin^2(pi * t / (2 * peak_phase))
/// ```
///
/// so s_0 = 1 (smallest volume), the curve rises smoothly to `peak_scale`
/// at `peak_phase`, and falls back toward 1 afterwards. sin^2 keeps it in
/// [1, peak_scale] for every phase.
pub fn scale_curve(cfg: &PhantomConfig) -> Vec<f64> {
    (0..cfg.phases)
        .map(|t| {
            let arg = std::f64::consts::PI * t as f64 / (2.0 * cfg.peak_phase as f64);
            1.0 + (cfg.peak_scale - 1.0) * arg.sin().powi(2)
        })
        .collect()
}

/// Smooth radial intensity at voxel position `p` for an ellipsoid with the
/// given center and semi-axes: 1 deep inside, 0 far outside, with a cosine
/// ramp over an approximately 2-voxel band centered on the surface. The
/// band uses the local first-order distance estimate (1 - rho) / |grad rho|
/// where rho is the ellipsoidal coordinate, so the 0.5 level set is exactly
/// the ellipsoid.
fn ellipsoid_intensity(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let mut rho_sq = 0.0;
    let mut grad_sq = 0.0;
    for c in 0..3 {
        let d = p[c] - center[c];
        rho_sq += (d / radii[c]).powi(2);
        grad_sq += (d / (radii[c] * radii[c])).powi(2);
    }
    let rho = rho_sq.sqrt();
    if rho <= f64::EPSILON {
        return 1.0;
    }
    let dist = (1.0 - rho) * rho / grad_sq.sqrt();
    if dist >= 1.0 {
        1.0
    } else if dist <= -1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::FRAC_PI_2 * dist).sin())
    }
}

/// Standard normal draws from a seeded stream (Box-Muller on ChaCha output).
struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u keeps the argument of ln strictly positive.
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * sin);
        r * cos
    }
}

/// Generate the series, its exact per-phase masks, and the analytic
/// pull-back displacement fields (voxel units).
///
/// Phase t scales the phase-0 anatomy by s_t about the center, so its
/// intensity at x is the phase-0 profile evaluated at c + (x - c) / s_t and
/// the field u_t(x) = (1/s_t - 1) * (x - c) carries phase-0 content onto
/// phase t under this crate's pull-back warp. Noise is drawn from one
/// seeded stream in phase-major, x-fastest order.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(CineSeries, Vec<DisplacementField>)> {
    cfg.validate()?;
    let center = cfg.resolved_center();
    let radii = cfg.base_radii_voxels;
    let curve = scale_curve(cfg);
    let [nx, ny, nz] = cfg.dims;
    let origin = [0.0; 3];

    let mut noise = GaussianSource::new(cfg.seed);
    let mut phases = Vec::with_capacity(cfg.phases);
    let mut masks = Vec::with_capacity(cfg.phases);
    let mut fields = Vec::with_capacity(cfg.phases);

    for &s in &curve {
        let inv = 1.0 / s;
        let mut data = Vec::with_capacity(nx * ny * nz);
        let mut inside = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    // Pull the voxel back to phase-0 coordinates and sample
                    // the reference profile there: phase t is then an exact
                    // pull-forward of phase 0. The mask tests the same
                    // pulled-back point against the base ellipsoid, which is
                    // the scaled-ellipsoid indicator computed with identical
                    // arithmetic, so mask == (noiseless intensity >= 0.5)
                    // holds exactly.
                    let pulled = [
                        center[0] + (i as f64 - center[0]) * inv,
                        center[1] + (j as f64 - center[1]) * inv,
                        center[2] + (k as f64 - center[2]) * inv,
                    ];
                    let clean = ellipsoid_intensity(pulled, center, radii);
                    inside.push(clean >= 0.5);
                    let mut v = clean;
                    if cfg.noise_sigma > 0.0 {
                        v += cfg.noise_sigma * noise.next();
                    }
                    data.push(v);
                }
            }
        }
        phases.push(Volume3::new(cfg.dims, cfg.spacing, origin, data)?);
        masks.push(Mask3::new(cfg.dims, cfg.spacing, origin, inside)?);

        let shrink = inv - 1.0;
        fields.push(DisplacementField::from_fn(cfg.dims, cfg.spacing, origin, |i, j, k| {
            [
                shrink * (i as f64 - center[0]),
                shrink * (j as f64 - center[1]),
                shrink * (k as f64 - center[2]),
            ]
        })?);
    }

    let series = CineSeries::new(phases, Some(masks), 0)?;
    Ok((series, fields))
}

/// Mean and maximum Euclidean norm of (estimated - truth) over the region,
/// in the fields' displacement unit.
pub fn endpoint_error(
    estimated: &DisplacementField,
    truth: &DisplacementField,
    region: &Mask3,
) -> Result<(f64, f64)> {
    if estimated.dims() != truth.dims()
        || estimated.spacing() != truth.spacing()
        || estimated.unit() != truth.unit()
    {
        return Err(Error::GeometryMismatch("endpoint error field grids".into()));
    }
    if estimated.dims() != region.dims() || estimated.spacing() != region.spacing() {
        return Err(Error::GeometryMismatch("endpoint error region grid".into()));
    }
    let n = estimated.voxel_count();
    let (ex, ey, ez) = (estimated.comp(0), estimated.comp(1), estimated.comp(2));
    let (tx, ty, tz) = (truth.comp(0), truth.comp(1), truth.comp(2));
    let mut norms = Vec::with_capacity(region.set_count());
    let mut max = 0.0f64;
    for idx in 0..n {
        if !region.data()[idx] {
            continue;
        }
        let dx = ex[idx] - tx[idx];
        let dy = ey[idx] - ty[idx];
        let dz = ez[idx] - tz[idx];
        let norm = (dx * dx + dy * dy + dz * dz).sqrt();
        max = max.max(norm);
        norms.push(norm);
    }
    if norms.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mean = pairwise_sum(&norms) / norms.len() as f64;
    Ok((mean, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::transform::{jacobian_det_map, warp_mask, DEFAULT_MASK_THRESHOLD};

    fn small_config() -> PhantomConfig {
        PhantomConfig {
            dims: [48, 48, 24],
            base_radii_voxels: [10.0, 8.0, 6.0],
            phases: 6,
            peak_phase: 3,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn scale_curve_endpoints() {
        let cfg = PhantomConfig::default();
        let curve = scale_curve(&cfg);
        assert_eq!(curve.len(), 20);
        assert_eq!(curve[0], 1.0);
        assert!((curve[8] - 1.25).abs() < 1e-12);
        let peak = curve.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(peak, curve[8]);
        assert!(curve.iter().all(|&s| (1.0..=1.25 + 1e-12).contains(&s)));
        // Rises monotonically to the peak, falls on the way back down.
        for t in 0..8 {
            assert!(curve[t] < curve[t + 1]);
        }
        for t in 8..15 {
            assert!(curve[t] > curve[t + 1]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let base = PhantomConfig::default();
        let cases = [
            PhantomConfig { peak_scale: 1.0, ..base.clone() },
            PhantomConfig { peak_scale: f64::NAN, ..base.clone() },
            PhantomConfig { noise_sigma: -0.1, ..base.clone() },
            PhantomConfig { peak_phase: 0, ..base.clone() },
            PhantomConfig { peak_phase: 20, ..base.clone() },
            PhantomConfig { base_radii_voxels: [0.0, 15.0, 10.0], ..base.clone() },
            PhantomConfig { spacing: [1.72, -1.72, 2.0], ..base.clone() },
            PhantomConfig { phases: 0, ..base.clone() },
        ];
        for cfg in &cases {
            assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn phase_zero_field_is_identically_zero() {
        let (_, fields) = generate_phantom(&small_config()).unwrap();
        assert!(fields[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_volume_ratio_matches_cubed_scale() {
        let (series, _) = generate_phantom(&PhantomConfig::default()).unwrap();
        let masks = series.masks.as_ref().unwrap();
        let v0 = masks[0].set_count() as f64;
        let vp = masks[8].set_count() as f64;
        let ratio = vp / v0;
        let expected = 1.25f64.powi(3);
        assert!(
            (ratio - expected).abs() / expected < 0.02,
            "voxelized volume ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_config();
        let (a, fa) = generate_phantom(&cfg).unwrap();
        let (b, fb) = generate_phantom(&cfg).unwrap();
        for (pa, pb) in a.phases.iter().zip(&b.phases) {
            assert_eq!(pa.data(), pb.data());
        }
        for (ma, mb) in a.masks.as_ref().unwrap().iter().zip(b.masks.as_ref().unwrap()) {
            assert_eq!(ma.data(), mb.data());
        }
        for (ua, ub) in fa.iter().zip(&fb) {
            assert_eq!(ua.data(), ub.data());
        }
    }

    #[test]
    fn zero_noise_ignores_the_seed() {
        let mut a_cfg = small_config();
        a_cfg.noise_sigma = 0.0;
        a_cfg.seed = 1;
        let mut b_cfg = a_cfg.clone();
        b_cfg.seed = 99;
        let (a, _) = generate_phantom(&a_cfg).unwrap();
        let (b, _) = generate_phantom(&b_cfg).unwrap();
        for (pa, pb) in a.phases.iter().zip(&b.phases) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn masks_are_the_half_intensity_level_set_without_noise() {
        let mut cfg = small_config();
        cfg.noise_sigma = 0.0;
        let (series, _) = generate_phantom(&cfg).unwrap();
        let masks = series.masks.as_ref().unwrap();
        for (vol, mask) in series.phases.iter().zip(masks) {
            for (v, &m) in vol.data().iter().zip(mask.data()) {
                assert_eq!(*v >= 0.5, m);
            }
        }
    }

    #[test]
    fn analytic_fields_carry_the_reference_mask_onto_each_phase() {
        let (series, fields) = generate_phantom(&PhantomConfig::default()).unwrap();
        let masks = series.masks.as_ref().unwrap();
        for (t, field) in fields.iter().enumerate() {
            let warped = warp_mask(&masks[0], field, DEFAULT_MASK_THRESHOLD).unwrap();
            let d = dice(&warped, &masks[t]).unwrap();
            assert!(d >= 0.97, "phase {t} dice {d}");
        }
    }

    #[test]
    fn analytic_field_jacobian_matches_scale() {
        let cfg = PhantomConfig::default();
        let (_, fields) = generate_phantom(&cfg).unwrap();
        let curve = scale_curve(&cfg);
        for (t, field) in fields.iter().enumerate() {
            let expected = (1.0 / curve[t]).powi(3);
            let jac = jacobian_det_map(field).unwrap();
            // The field is affine, so every finite-difference stencil is
            // exact; the 1% bound is pure headroom.
            let worst = jac
                .data()
                .iter()
                .map(|&d| (d - expected).abs() / expected)
                .fold(0.0f64, f64::max);
            assert!(worst < 0.01, "phase {t} worst relative error {worst}");
            assert!((jac.at(24, 24, 12) - expected).abs() / expected < 1e-12);
        }
    }

    #[test]
    fn endpoint_error_trivial_cases() {
        let dims = [6, 6, 6];
        let truth = DisplacementField::from_fn(dims, [1.0; 3], [0.0; 3], |i, j, k| {
            [i as f64 * 0.1, j as f64 * 0.2, k as f64 * 0.05]
        })
        .unwrap();
        let region = Mask3::from_fn(dims, [1.0; 3], [0.0; 3], |i, _, _| i > 0).unwrap();

        assert_eq!(endpoint_error(&truth, &truth, &region).unwrap(), (0.0, 0.0));

        let offset = DisplacementField::from_fn(dims, [1.0; 3], [0.0; 3], |i, j, k| {
            [i as f64 * 0.1 + 1.0, j as f64 * 0.2, k as f64 * 0.05]
        })
        .unwrap();
        let (mean, max) = endpoint_error(&offset, &truth, &region).unwrap();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((max - 1.0).abs() < 1e-12);

        let empty = Mask3::from_fn(dims, [1.0; 3], [0.0; 3], |_, _, _| false).unwrap();
        assert_eq!(endpoint_error(&truth, &truth, &empty), Err(Error::EmptyMask));
    }

    #[test]
    fn endpoint_error_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = [4, 4, 4];
        let mut arb_field = |amp: f64| {
            DisplacementField::from_fn(dims, [1.0; 3], [0.0; 3], |_, _, _| {
                [
                    rng.gen_range(-amp..amp),
                    rng.gen_range(-amp..amp),
                    rng.gen_range(-amp..amp),
                ]
            })
            .unwrap()
        };
        let est = arb_field(2.0);
        let truth = arb_field(2.0);
        let region = Mask3::from_fn(dims, [1.0; 3], [0.0; 3], |i, j, k| (i + j + k) % 2 == 0)
            .unwrap();

        let mut sum = 0.0;
        let mut max = 0.0f64;
        let mut count = 0usize;
        for [i, j, k] in region.iter_set() {
            let e = est.vector_at(i, j, k);
            let t = truth.vector_at(i, j, k);
            let norm =
                ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2) + (e[2] - t[2]).powi(2)).sqrt();
            sum += norm;
            max = max.max(norm);
            count += 1;
        }
        let (mean, got_max) = endpoint_error(&est, &truth, &region).unwrap();
        assert!((mean - sum / count as f64).abs() < 1e-12);
        assert_eq!(got_max, max);
    }

    #[test]
    fn config_survives_a_json_round_trip() {
        let cfg = PhantomConfig { seed: 42, noise_sigma: 0.05, ..PhantomConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PhantomConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let partial: PhantomConfig = serde_json::from_str(r#"{"phases": 10, "peak_phase": 4}"#).unwrap();
        assert_eq!(partial.phases, 10);
        assert_eq!(partial.dims, [96, 96, 36]);
        assert!(serde_json::from_str::<PhantomConfig>(r#"{"phase": 10}"#).is_err());
    }
}
