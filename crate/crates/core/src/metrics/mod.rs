//! Evaluation of a synthetic CT against the real CT.

mod isosurface;
mod mc_tables;
mod report;
mod surface;

pub use isosurface::{marching_cubes, TriMesh};
pub use report::{aggregate_report, write_error_map_pgm, Report, ERROR_WINDOW_HU};
pub use surface::{surface_distance, SurfaceDistance};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask3D, Unit, Volume3D};

/// Cortical bone threshold (HU) for segmentation and the isosurface.
pub const BONE_HU: f32 = 200.0;
/// Real-CT voxels above this count as tissue for the overall MAE.
pub const TISSUE_HU: f32 = -200.0;

/// One subject's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub subject: String,
    pub mae_overall_hu: f64,
    pub mae_bone_hu: f64,
    pub dice_bone: f64,
    /// Mean distance from synthetic-CT surface vertices to the real-CT surface.
    pub msd_sct_to_ct_mm: f64,
    /// Mean distance from real-CT surface vertices to the synthetic-CT surface.
    pub msd_ct_to_sct_mm: f64,
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.mae_overall_hu,
            self.mae_bone_hu,
            self.dice_bone,
            self.msd_sct_to_ct_mm,
            self.msd_ct_to_sct_mm,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.dice_bone > 1.0 {
            return Err(Error::Config(format!("metrics out of range for {}: {vals:?}", self.subject)));
        }
        Ok(())
    }
}

/// Mean of |a − b| over the voxels of `region`.
pub fn mae(a: &Volume3D, b: &Volume3D, region: &Mask3D) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "mae volumes")?;
    a.grid().ensure_same(region.grid(), "mae region")?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.values().iter().zip(b.values()).zip(region.values()) {
        if m {
            sum += (x as f64 - y as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("mae region"));
    }
    Ok(sum / n as f64)
}

/// 2|A∩B| / (|A| + |B|); 1 when both masks are empty.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "dice masks")?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / (na + nb) as f64)
}

/// Signed voxelwise difference a − b.
pub fn error_map(a: &Volume3D, b: &Volume3D) -> Result<Volume3D> {
    a.grid().ensure_same(b.grid(), "error map")?;
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    Volume3D::new(*a.grid(), Unit::Hu, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bone_hu: f32,
    pub tissue_hu: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bone_hu: BONE_HU,
            tissue_hu: TISSUE_HU,
        }
    }
}

/// All five metrics of a synthetic CT against its real CT.
///
/// The overall MAE covers real-CT tissue (> `tissue_hu`), the bone MAE the
/// real-CT bone mask (> `bone_hu`). Surface distances compare `bone_hu`
/// isosurfaces vertex to vertex in both directions.
pub fn evaluate(subject: &str, ct: &Volume3D, sct: &Volume3D, opts: &EvalOptions) -> Result<MetricsRow> {
    ct.grid().ensure_same(sct.grid(), "evaluate")?;
    let tissue = ct.threshold_mask(opts.tissue_hu);
    let bone_ct = ct.threshold_mask(opts.bone_hu);
    let bone_sct = sct.threshold_mask(opts.bone_hu);

    let mesh_ct = marching_cubes(ct, opts.bone_hu as f64);
    let mesh_sct = marching_cubes(sct, opts.bone_hu as f64);
    let sct_to_ct = surface_distance(&mesh_sct, &mesh_ct)?;
    let ct_to_sct = surface_distance(&mesh_ct, &mesh_sct)?;

    Ok(MetricsRow {
        subject: subject.to_string(),
        mae_overall_hu: mae(ct, sct, &tissue)?,
        mae_bone_hu: mae(ct, sct, &bone_ct)?,
        dice_bone: dice(&bone_ct, &bone_sct)?,
        msd_sct_to_ct_mm: sct_to_ct.mean,
        msd_ct_to_sct_mm: ct_to_sct.mean,
    })
}
