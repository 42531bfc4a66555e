use super::{Grid, Volume3D};
use crate::registration::RigidTransform;

// Slack for index-space round-off at the grid border.
const EDGE_EPS: f64 = 1e-9;

/// Trilinear sample at a continuous voxel index, `None` outside the grid.
pub fn trilinear_at(vol: &Volume3D, idx: [f64; 3]) -> Option<f64> {
    let dims = vol.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let mut x = idx[a];
        if !(x >= -EDGE_EPS && x <= hi + EDGE_EPS) {
            return None;
        }
        x = x.clamp(0.0, hi);
        let f = x.floor();
        let mut b = f as usize;
        let mut t = x - f;
        if b + 1 > dims[a] - 1 {
            // exactly on the last plane (or a singleton axis)
            b = dims[a] - 1;
            t = 0.0;
        }
        base[a] = b;
        frac[a] = t;
    }
    let [i, j, k] = base;
    let [fx, fy, fz] = frac;
    let i1 = (i + 1).min(dims[0] - 1);
    let j1 = (j + 1).min(dims[1] - 1);
    let k1 = (k + 1).min(dims[2] - 1);
    let v = |a, b, c| vol.get(a, b, c) as f64;

    let c00 = v(i, j, k) * (1.0 - fx) + v(i1, j, k) * fx;
    let c10 = v(i, j1, k) * (1.0 - fx) + v(i1, j1, k) * fx;
    let c01 = v(i, j, k1) * (1.0 - fx) + v(i1, j, k1) * fx;
    let c11 = v(i, j1, k1) * (1.0 - fx) + v(i1, j1, k1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

/// Resamples `vol` onto `target`.
///
/// Each target voxel centre `p` is sampled at `target_to_source.apply(p)` in
/// the source's mm space. To pull a CT onto an MR grid given the CT-to-MR
/// transform, pass its inverse. Samples outside the source take the unit's
/// fill value (-1000 HU for CT).
pub fn resample_trilinear(vol: &Volume3D, target_to_source: &RigidTransform, target: &Grid) -> Volume3D {
    let fill = vol.unit().fill_value();
    let src = vol.grid();
    Volume3D::from_fn(*target, vol.unit(), |i, j, k| {
        let p = target_to_source.apply(target.center(i, j, k));
        match trilinear_at(vol, src.to_index_space(p)) {
            Some(v) => v as f32,
            None => fill,
        }
    })
    .expect("target grid validated by caller")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn ramp(dims: [usize; 3], spacing: [f64; 3]) -> Volume3D {
        let g = Grid::new(dims, spacing, [0.0; 3]).unwrap();
        Volume3D::from_fn(g, Unit::Hu, |i, _, _| (i as f64 * spacing[0]) as f32).unwrap()
    }

    #[test]
    fn identity_onto_same_grid_is_identity() {
        let g = Grid::new([5, 4, 3], [0.7, 1.1, 2.0], [3.0, -2.0, 1.0]).unwrap();
        let vol = Volume3D::from_fn(g, Unit::Hu, |i, j, k| (i * 100 + j * 10 + k) as f32 - 50.0).unwrap();
        let out = resample_trilinear(&vol, &RigidTransform::identity(), &g);
        assert_eq!(out.values(), vol.values());
    }

    #[test]
    fn half_voxel_shift_of_linear_ramp_is_exact() {
        let vol = ramp([8, 3, 3], [2.0, 1.0, 1.0]);
        let xf = RigidTransform::from_translation([1.0, 0.0, 0.0]);
        let out = resample_trilinear(&vol, &xf, vol.grid());
        for i in 0..7 {
            let expect = i as f64 * 2.0 + 1.0;
            assert!((out.get(i, 1, 1) as f64 - expect).abs() < 1e-5 * expect.max(1.0));
        }
        // last plane samples beyond the source
        assert_eq!(out.get(7, 1, 1), -1000.0);
    }

    #[test]
    fn everything_outside_is_air() {
        let vol = ramp([4, 4, 4], [1.0; 3]);
        let xf = RigidTransform::from_translation([100.0, 0.0, 0.0]);
        let out = resample_trilinear(&vol, &xf, vol.grid());
        assert!(out.values().iter().all(|&v| v == -1000.0));
    }

    #[test]
    fn affine_fields_are_reproduced_at_interior_points() {
        let g = Grid::new([9, 8, 7], [0.9, 1.3, 0.6], [-2.0, 1.0, 4.0]).unwrap();
        let f = |p: [f64; 3]| 3.0 * p[0] - 2.0 * p[1] + 0.5 * p[2] + 7.0;
        let vol = Volume3D::from_fn(g, Unit::Mr, |i, j, k| f(g.center(i, j, k)) as f32).unwrap();
        let xf = RigidTransform::from_axis_angle([0.2, 0.3, 1.0], 7f64.to_radians(), [0.3, -0.4, 0.2]);
        let target = Grid::new([6, 6, 6], [0.8; 3], [0.0, 2.5, 5.0]).unwrap();
        let out = resample_trilinear(&vol, &xf, &target);
        let mut checked = 0;
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let p = xf.apply(target.center(i, j, k));
                    if trilinear_at(&vol, g.to_index_space(p)).is_some() {
                        let expect = f(p);
                        let got = out.get(i, j, k) as f64;
                        assert!((got - expect).abs() <= 1e-5 * expect.abs().max(1.0), "{got} vs {expect}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn singleton_axes_sample_the_only_plane() {
        let g = Grid::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::new(g, Unit::Mr, vec![0.0, 10.0, 20.0]).unwrap();
        assert_eq!(trilinear_at(&vol, [1.5, 0.0, 0.0]), Some(15.0));
        assert_eq!(trilinear_at(&vol, [1.0, 0.5, 0.0]), None);
    }
}
