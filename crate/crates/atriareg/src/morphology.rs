//! Binary morphology on masks: boundary extraction, spherical dilation, and
//! intensity masking.

use crate::error::{Error, Result};
use crate::volume::{Mask3, Volume3};

/// Band radius in voxels used when masking intensities around a contour.
pub const DEFAULT_BAND_RADIUS: f64 = 2.0;

/// Keep the set voxels that touch the outside.
///
/// A voxel is kept when it is set and at least one of its six face neighbors
/// is unset or lies outside the array, so set voxels on the array border are
/// always part of the contour.
pub fn extract_contour(m: &Mask3) -> Mask3 {
    let [nx, ny, nz] = m.dims();
    Mask3::from_fn(m.dims(), m.spacing(), m.origin(), |i, j, k| {
        if !m.at(i, j, k) {
            return false;
        }
        let exposed = |di: i64, dj: i64, dk: i64| {
            let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
            if ni < 0 || nj < 0 || nk < 0 || ni >= nx as i64 || nj >= ny as i64 || nk >= nz as i64 {
                return true;
            }
            !m.at(ni as usize, nj as usize, nk as usize)
        };
        exposed(-1, 0, 0)
            || exposed(1, 0, 0)
            || exposed(0, -1, 0)
            || exposed(0, 1, 0)
            || exposed(0, 0, -1)
            || exposed(0, 0, 1)
    })
    .expect("geometry preserved")
}

/// Integer offsets inside the closed ball of the given radius, in index units.
fn ball_offsets(radius: f64) -> Vec<[i64; 3]> {
    let r = radius.max(0.0);
    let rmax = r.floor() as i64;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dk in -rmax..=rmax {
        for dj in -rmax..=rmax {
            for di in -rmax..=rmax {
                if ((di * di + dj * dj + dk * dk) as f64) <= r2 {
                    offsets.push([di, dj, dk]);
                }
            }
        }
    }
    offsets
}

/// Dilate with a closed spherical structuring element measured in voxel
/// index units (anisotropic spacing is deliberately ignored). Results are
/// clipped at the array bounds; negative radii behave like zero.
pub fn dilate_sphere(m: &Mask3, radius_voxels: f64) -> Mask3 {
    let offsets = ball_offsets(radius_voxels);
    let [nx, ny, nz] = m.dims();
    let mut out = vec![false; nx * ny * nz];
    for [i, j, k] in m.iter_set() {
        for &[di, dj, dk] in &offsets {
            let (pi, pj, pk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
            if pi < 0 || pj < 0 || pk < 0 || pi >= nx as i64 || pj >= ny as i64 || pk >= nz as i64 {
                continue;
            }
            out[pi as usize + nx * (pj as usize + ny * pk as usize)] = true;
        }
    }
    Mask3::new(m.dims(), m.spacing(), m.origin(), out).expect("geometry preserved")
}

/// Zero every voxel of `v` outside `m`.
pub fn apply_mask(v: &Volume3, m: &Mask3) -> Result<Volume3> {
    if !v.same_geometry_mask(m) {
        return Err(Error::GeometryMismatch("apply_mask volume vs mask".into()));
    }
    let data = v
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    v.with_data(data)
}

/// Extract the contour of `m` and dilate it: the band of voxels within
/// `radius_voxels` of the segmentation surface.
pub fn contour_band_mask(m: &Mask3, radius_voxels: f64) -> Mask3 {
    dilate_sphere(&extract_contour(m), radius_voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume3;

    fn empty(dims: [usize; 3]) -> Mask3 {
        Mask3::new(dims, [1.0; 3], [0.0; 3], vec![false; dims[0] * dims[1] * dims[2]]).unwrap()
    }

    fn single(dims: [usize; 3], p: [usize; 3]) -> Mask3 {
        Mask3::from_fn(dims, [1.0; 3], [0.0; 3], |i, j, k| [i, j, k] == p).unwrap()
    }

    fn solid_block(dims: [usize; 3], lo: usize, hi: usize) -> Mask3 {
        Mask3::from_fn(dims, [1.0; 3], [0.0; 3], |i, j, k| {
            (lo..=hi).contains(&i) && (lo..=hi).contains(&j) && (lo..=hi).contains(&k)
        })
        .unwrap()
    }

    #[test]
    fn contour_of_empty_is_empty() {
        assert_eq!(extract_contour(&empty([4, 4, 4])).set_count(), 0);
    }

    #[test]
    fn contour_of_single_voxel_is_itself() {
        let m = single([5, 5, 5], [2, 2, 2]);
        assert_eq!(extract_contour(&m), m);
    }

    #[test]
    fn contour_of_3x3x3_block_drops_only_center() {
        let m = solid_block([7, 7, 7], 2, 4);
        let c = extract_contour(&m);
        // Brute-force oracle over the 27 block voxels: only (3,3,3) has all
        // six face neighbors set.
        assert_eq!(c.set_count(), 26);
        assert!(!c.at(3, 3, 3));
        for [i, j, k] in m.iter_set() {
            if [i, j, k] != [3, 3, 3] {
                assert!(c.at(i, j, k), "({i},{j},{k}) should stay");
            }
        }
    }

    #[test]
    fn array_border_counts_as_outside() {
        // A fully set array is all border-exposed except its interior.
        let m = Mask3::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![true; 64]).unwrap();
        let c = extract_contour(&m);
        assert_eq!(c.set_count(), 64 - 8);
        assert!(!c.at(1, 1, 1));
        assert!(c.at(0, 1, 1));
    }

    #[test]
    fn ball_offset_counts() {
        // Independent enumeration of |d|^2 <= r^2 lattice points.
        let count = |r2: i64| {
            let mut n = 0;
            for dk in -3i64..=3 {
                for dj in -3i64..=3 {
                    for di in -3i64..=3 {
                        if di * di + dj * dj + dk * dk <= r2 {
                            n += 1;
                        }
                    }
                }
            }
            n
        };
        assert_eq!(count(0), 1);
        assert_eq!(count(1), 7);
        // 1 center + 6 at d^2=1 + 12 at d^2=2 + 8 at d^2=3 + 6 at d^2=4.
        assert_eq!(count(4), 33);
        assert_eq!(ball_offsets(0.0).len(), 1);
        assert_eq!(ball_offsets(1.0).len(), 7);
        assert_eq!(ball_offsets(2.0).len(), 33);
    }

    #[test]
    fn dilate_radius_zero_is_identity() {
        let m = single([5, 5, 5], [1, 2, 3]);
        assert_eq!(dilate_sphere(&m, 0.0), m);
    }

    #[test]
    fn dilate_single_voxel_radius_one() {
        let m = single([7, 7, 7], [3, 3, 3]);
        let d = dilate_sphere(&m, 1.0);
        assert_eq!(d.set_count(), 7);
        assert!(d.at(3, 3, 3) && d.at(2, 3, 3) && d.at(4, 3, 3));
        assert!(d.at(3, 2, 3) && d.at(3, 4, 3) && d.at(3, 3, 2) && d.at(3, 3, 4));
        assert!(!d.at(2, 2, 3));
    }

    #[test]
    fn dilate_single_voxel_radius_two() {
        let m = single([9, 9, 9], [4, 4, 4]);
        let d = dilate_sphere(&m, 2.0);
        assert_eq!(d.set_count(), 33);
        // Membership matches the |d|^2 <= 4 ball exactly.
        for k in 0..9usize {
            for j in 0..9usize {
                for i in 0..9usize {
                    let dd = (i as i64 - 4).pow(2) + (j as i64 - 4).pow(2) + (k as i64 - 4).pow(2);
                    assert_eq!(d.at(i, j, k), dd <= 4, "offset^2 {dd} at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn dilate_clips_at_bounds() {
        let m = single([3, 3, 3], [0, 0, 0]);
        let d = dilate_sphere(&m, 1.0);
        // Only the center and the three in-bounds face neighbors survive.
        assert_eq!(d.set_count(), 4);
    }

    #[test]
    fn apply_mask_full_and_empty() {
        let v = Volume3::from_fn([3, 3, 3], [1.0; 3], [0.0; 3], |i, j, k| (i + j + k) as f64).unwrap();
        let full = Mask3::new([3, 3, 3], [1.0; 3], [0.0; 3], vec![true; 27]).unwrap();
        assert_eq!(apply_mask(&v, &full).unwrap().data(), v.data());
        let none = empty([3, 3, 3]);
        assert!(apply_mask(&v, &none).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn apply_mask_block_sum() {
        let v = Volume3::new([4, 4, 4], [1.0; 3], [0.0; 3], vec![1.0; 64]).unwrap();
        let m = solid_block([4, 4, 4], 1, 2);
        let out = apply_mask(&v, &m).unwrap();
        assert_eq!(out.data().iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn apply_mask_rejects_geometry_mismatch() {
        let v = Volume3::new([3, 3, 3], [1.0; 3], [0.0; 3], vec![0.0; 27]).unwrap();
        let m = empty([3, 3, 4]);
        assert!(matches!(apply_mask(&v, &m), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn band_of_empty_is_empty() {
        assert_eq!(contour_band_mask(&empty([6, 6, 6]), 2.0).set_count(), 0);
    }

    #[test]
    fn band_of_single_voxel_is_ball() {
        let m = single([9, 9, 9], [4, 4, 4]);
        let band = contour_band_mask(&m, 2.0);
        assert_eq!(band, dilate_sphere(&m, 2.0));
        assert_eq!(band.set_count(), 33);
    }

    #[test]
    fn band_of_solid_block_spares_the_core() {
        // 9^3 block occupying [1,9] of an 11^3 array; its contour is the
        // outer shell of the block, so the band is everything within
        // distance 2 of that shell.
        let m = solid_block([11, 11, 11], 1, 9);
        let band = contour_band_mask(&m, 2.0);
        let contour = extract_contour(&m);
        let surface: Vec<[usize; 3]> = contour.iter_set().collect();
        for k in 0..11usize {
            for j in 0..11usize {
                for i in 0..11usize {
                    let min_d2 = surface
                        .iter()
                        .map(|&[si, sj, sk]| {
                            (i as i64 - si as i64).pow(2)
                                + (j as i64 - sj as i64).pow(2)
                                + (k as i64 - sk as i64).pow(2)
                        })
                        .min()
                        .unwrap();
                    assert_eq!(band.at(i, j, k), min_d2 <= 4, "at ({i},{j},{k})");
                }
            }
        }
        // The 3^3 core sits 3 voxels from the surface and stays unset.
        for k in 4..=6usize {
            for j in 4..=6usize {
                for i in 4..=6usize {
                    assert!(!band.at(i, j, k));
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mask() -> impl Strategy<Value = Mask3> {
            (2usize..7, 2usize..7, 2usize..7).prop_flat_map(|(nx, ny, nz)| {
                proptest::collection::vec(proptest::bool::weighted(0.3), nx * ny * nz)
                    .prop_map(move |data| Mask3::new([nx, ny, nz], [1.0; 3], [0.0; 3], data).unwrap())
            })
        }

        fn subset(a: &Mask3, b: &Mask3) -> bool {
            a.data().iter().zip(b.data()).all(|(&x, &y)| !x || y)
        }

        proptest! {
            #[test]
            fn contour_is_subset(m in arb_mask()) {
                prop_assert!(subset(&extract_contour(&m), &m));
            }

            #[test]
            fn dilation_contains_input(m in arb_mask(), r in 0.0f64..3.0) {
                prop_assert!(subset(&m, &dilate_sphere(&m, r)));
            }

            #[test]
            fn dilation_monotone_in_radius(m in arb_mask(), r1 in 0.0f64..2.0, dr in 0.0f64..2.0) {
                let small = dilate_sphere(&m, r1);
                let big = dilate_sphere(&m, r1 + dr);
                prop_assert!(subset(&small, &big));
            }

            #[test]
            fn dilation_monotone_in_mask(m in arb_mask(), r in 0.0f64..2.5) {
                // Drop some voxels to build a strict subset.
                let smaller = Mask3::from_fn(m.dims(), m.spacing(), m.origin(), |i, j, k| {
                    m.at(i, j, k) && (i + j + k) % 2 == 0
                }).unwrap();
                prop_assert!(subset(&dilate_sphere(&smaller, r), &dilate_sphere(&m, r)));
            }

            #[test]
            fn zero_dilation_composes_away(m in arb_mask(), r in 0.0f64..2.5) {
                let lhs = dilate_sphere(&dilate_sphere(&m, 0.0), r);
                prop_assert_eq!(lhs, dilate_sphere(&m, r));
            }

            #[test]
            fn band_stays_within_radius_of_contour(m in arb_mask(), r in 0.0f64..2.5) {
                let band = contour_band_mask(&m, r);
                let surface: Vec<[usize; 3]> = extract_contour(&m).iter_set().collect();
                for [i, j, k] in band.iter_set() {
                    let min_d2 = surface.iter().map(|&[si, sj, sk]| {
                        (i as i64 - si as i64).pow(2)
                            + (j as i64 - sj as i64).pow(2)
                            + (k as i64 - sk as i64).pow(2)
                    }).min();
                    match min_d2 {
                        Some(d2) => prop_assert!((d2 as f64) <= r * r + 1e-9),
                        None => prop_assert!(false, "band nonempty but contour empty"),
                    }
                }
            }
        }
    }
}
