use super::{Grid, Volume3D};
use crate::error::{Error, Result};

// Origins must sit on a common lattice to within this many voxels.
const LATTICE_TOL: f64 = 1e-4;

/// Crops two volumes with equal spacing to the index box where both grids
/// overlap. Both outputs share one grid.
pub fn crop_to_overlap(a: &Volume3D, b: &Volume3D) -> Result<(Volume3D, Volume3D)> {
    let (ga, gb) = (a.grid(), b.grid());
    for ax in 0..3 {
        if (ga.spacing[ax] - gb.spacing[ax]).abs() > 1e-9 * ga.spacing[ax] {
            return Err(Error::GridMismatch(format!(
                "spacing differs: {:?} vs {:?}",
                ga.spacing, gb.spacing
            )));
        }
    }

    // index range [lo, hi) in a's index space
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let shift = (gb.origin[ax] - ga.origin[ax]) / ga.spacing[ax];
        let off = shift.round();
        if (shift - off).abs() > LATTICE_TOL {
            return Err(Error::GridMismatch(format!(
                "origins are not a whole number of voxels apart on axis {ax}"
            )));
        }
        let off = off as i64;
        let start = off.max(0);
        let end = (ga.dims[ax] as i64).min(off + gb.dims[ax] as i64);
        if end <= start {
            return Err(Error::EmptyOverlap);
        }
        lo[ax] = start as usize;
        hi[ax] = end as usize;
    }

    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let origin = ga.center(lo[0], lo[1], lo[2]);
    let out = Grid::new(dims, ga.spacing, origin)?;
    Ok((sub_box(a, &out), sub_box(b, &out)))
}

fn sub_box(vol: &Volume3D, out: &Grid) -> Volume3D {
    let g = vol.grid();
    let start: Vec<usize> = (0..3)
        .map(|ax| ((out.origin[ax] - g.origin[ax]) / g.spacing[ax]).round() as usize)
        .collect();
    Volume3D::from_fn(*out, vol.unit(), |i, j, k| {
        vol.get(start[0] + i, start[1] + j, start[2] + k)
    })
    .expect("validated grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn vol(dims: [usize; 3], origin: [f64; 3], spacing: f64) -> Volume3D {
        let g = Grid::new(dims, [spacing; 3], origin).unwrap();
        // value encodes the mm x/y/z so matching positions are checkable
        Volume3D::from_fn(g, Unit::Mr, |i, j, k| {
            let p = g.center(i, j, k);
            (p[0] * 10000.0 + p[1] * 100.0 + p[2]) as f32
        })
        .unwrap()
    }

    #[test]
    fn identical_grids_are_unchanged() {
        let a = vol([4, 5, 6], [1.0, 2.0, 3.0], 1.0);
        let (ca, cb) = crop_to_overlap(&a, &a).unwrap();
        assert_eq!(ca, a);
        assert_eq!(cb, a);
    }

    #[test]
    fn offset_grids_keep_matching_positions() {
        let a = vol([10, 3, 3], [0.0; 3], 0.5);
        let b = vol([10, 3, 3], [1.0, 0.0, 0.0], 0.5); // two voxels along x
        let (ca, cb) = crop_to_overlap(&a, &b).unwrap();
        assert_eq!(ca.dims(), [8, 3, 3]);
        assert_eq!(ca.grid(), cb.grid());
        assert_eq!(ca.grid().origin, [1.0, 0.0, 0.0]);
        assert_eq!(ca.values(), cb.values());
        assert_eq!(ca.get(0, 0, 0), a.get(2, 0, 0));
        assert_eq!(cb.get(0, 0, 0), b.get(0, 0, 0));
    }

    #[test]
    fn disjoint_grids_error() {
        let a = vol([4, 4, 4], [0.0; 3], 1.0);
        let b = vol([4, 4, 4], [10.0, 0.0, 0.0], 1.0);
        assert!(matches!(crop_to_overlap(&a, &b), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn different_spacing_errors() {
        let a = vol([4, 4, 4], [0.0; 3], 1.0);
        let b = vol([4, 4, 4], [0.0; 3], 0.5);
        assert!(matches!(crop_to_overlap(&a, &b), Err(Error::GridMismatch(_))));
    }
}
