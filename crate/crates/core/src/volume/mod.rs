//! Voxel volumes on a regular grid with physical spacing.

mod crop;
mod io;
mod points;
mod resample;

pub use crop::crop_to_overlap;
pub use io::{load_volume, save_volume, volume_paths};
pub use points::{extract_point_cloud, percentile, tissue_support, CloudMode};
pub use resample::{resample_trilinear, trilinear_at};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point3;

/// Lowest HU value kept on load.
pub const HU_MIN: f32 = -1024.0;
/// Highest HU value kept on load.
pub const HU_MAX: f32 = 3071.0;
/// HU of air, used as the fill value outside a CT.
pub const HU_AIR: f32 = -1000.0;

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    /// CT Hounsfield units.
    #[serde(rename = "HU")]
    Hu,
    /// MR signal intensity, arbitrary scale.
    #[serde(rename = "MR")]
    Mr,
    /// 0/1 mask.
    #[serde(rename = "mask")]
    Mask,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Hu => "HU",
            Unit::Mr => "MR",
            Unit::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        match s {
            "HU" => Some(Unit::Hu),
            "MR" => Some(Unit::Mr),
            "mask" => Some(Unit::Mask),
            _ => None,
        }
    }

    /// Value used for samples that fall outside the source grid.
    pub fn fill_value(self) -> f32 {
        match self {
            Unit::Hu => HU_AIR,
            Unit::Mr | Unit::Mask => 0.0,
        }
    }
}

/// Grid geometry: voxel counts, spacing in mm and the mm position of voxel
/// (0, 0, 0). Values are stored x-fastest, then y, then z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Grid> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims {:?} must all be >= 1", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing {:?} must all be finite and > 0",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {:?} is not finite", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Centre of voxel (i, j, k) in mm.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a mm position.
    #[inline]
    pub fn to_index_space(&self, p: Point3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Geometric centre of the grid in mm.
    pub fn middle(&self) -> Point3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    unit: Unit,
    values: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, unit: Unit, values: Vec<f32>) -> Result<Volume3D> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for dims {:?}",
                values.len(),
                grid.dims
            )));
        }
        Ok(Volume3D { grid, unit, values })
    }

    pub fn filled(grid: Grid, unit: Unit, value: f32) -> Result<Volume3D> {
        Volume3D::new(grid, unit, vec![value; grid.len()])
    }

    pub fn from_fn(
        grid: Grid,
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Volume3D> {
        grid.validate()?;
        let mut values = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    values.push(f(i, j, k));
                }
            }
        }
        Volume3D::new(grid, unit, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.grid.index(i, j, k);
        self.values[idx] = v;
    }

    /// Clamps values into the 12-bit CT range. Only meaningful for HU data.
    pub fn clamp_hu(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(HU_MIN, HU_MAX);
        }
    }

    /// Voxels strictly above `t`.
    pub fn threshold_mask(&self, t: f32) -> Mask3D {
        Mask3D {
            grid: self.grid,
            values: self.values.iter().map(|&v| v > t).collect(),
        }
    }

    /// Voxels strictly below `t`.
    pub fn below_mask(&self, t: f32) -> Mask3D {
        Mask3D {
            grid: self.grid,
            values: self.values.iter().map(|&v| v < t).collect(),
        }
    }
}

/// Mask voxel is true iff the volume value is strictly greater than `t`.
pub fn threshold_mask(vol: &Volume3D, t: f32) -> Mask3D {
    vol.threshold_mask(t)
}

/// Boolean volume sharing the grid of the volume it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    grid: Grid,
    values: Vec<bool>,
}

impl Mask3D {
    pub fn new(grid: Grid, values: Vec<bool>) -> Result<Mask3D> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} mask values for dims {:?}",
                values.len(),
                grid.dims
            )));
        }
        Ok(Mask3D { grid, values })
    }

    pub fn empty(grid: Grid) -> Mask3D {
        Mask3D {
            grid,
            values: vec![false; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [bool] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &Mask3D) -> bool {
        self.grid == other.grid && self.values.iter().zip(&other.values).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Mask3D) -> usize {
        self.values.iter().zip(&other.values).filter(|(&a, &b)| a && b).count()
    }

    /// Stores the mask as a 0/1 volume.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            grid: self.grid,
            unit: Unit::Mask,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_volume(vol: &Volume3D) -> Mask3D {
        vol.threshold_mask(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: [usize; 3]) -> Grid {
        Grid::new(n, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume3D::new(grid([2, 2, 2]), Unit::Hu, vec![0.0; 7]).is_err());
    }

    #[test]
    fn voxel_centers_follow_origin_and_spacing() {
        let g = Grid::new([4, 4, 4], [2.0, 0.5, 1.0], [10.0, -1.0, 0.0]).unwrap();
        assert_eq!(g.center(1, 2, 3), [12.0, 0.0, 3.0]);
        let idx = g.index(3, 1, 2);
        assert_eq!(g.ijk(idx), [3, 1, 2]);
    }

    #[test]
    fn threshold_below_everything_is_empty() {
        let v = Volume3D::filled(grid([3, 3, 3]), Unit::Hu, 100.0).unwrap();
        assert_eq!(threshold_mask(&v, 200.0).count(), 0);
    }

    #[test]
    fn threshold_straddling_and_strict_tie() {
        let v = Volume3D::new(grid([3, 1, 1]), Unit::Hu, vec![100.0, 300.0, 200.0]).unwrap();
        assert_eq!(threshold_mask(&v, 200.0).values(), &[false, true, false]);
    }

    #[test]
    fn threshold_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid([16, 16, 16]);
        let v = Volume3D::from_fn(g, Unit::Hu, |_, _, _| rng.random_range(-1000.0..1500.0)).unwrap();
        let m = threshold_mask(&v, 200.0);
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    assert_eq!(m.get(i, j, k), v.get(i, j, k) > 200.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(values in proptest::collection::vec(-1000.0f32..2000.0, 27),
                                 t1 in -1000.0f32..2000.0, dt in 0.0f32..500.0) {
            let v = Volume3D::new(grid([3, 3, 3]), Unit::Hu, values).unwrap();
            let lo = threshold_mask(&v, t1);
            let hi = threshold_mask(&v, t1 + dt);
            prop_assert!(hi.is_subset_of(&lo));
        }
    }
}
