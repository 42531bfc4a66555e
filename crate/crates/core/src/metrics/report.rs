//! Cohort tables and error-map export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MetricsRow;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Error maps are windowed to ±500 HU before 8-bit quantisation.
pub const ERROR_WINDOW_HU: f32 = 500.0;

const CSV_HEADER: &str = "subject,mae_overall_hu,mae_bone_hu,dice_bone,msd_sct_to_ct_mm,msd_ct_to_sct_mm";

/// Per-subject rows plus their column means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// Unweighted column means over the rows.
pub fn aggregate_report(rows: &[MetricsRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("report rows"));
    }
    let n = rows.len() as f64;
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = MetricsRow {
        subject: "mean".to_string(),
        mae_overall_hu: col(|r| r.mae_overall_hu),
        mae_bone_hu: col(|r| r.mae_bone_hu),
        dice_bone: col(|r| r.dice_bone),
        msd_sct_to_ct_mm: col(|r| r.msd_sct_to_ct_mm),
        msd_ct_to_sct_mm: col(|r| r.msd_ct_to_sct_mm),
    };
    Ok(Report {
        rows: rows.to_vec(),
        mean,
    })
}

impl Report {
    /// Table layout: one decimal for HU, two for Dice and mm, final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn format_row(r: &MetricsRow) -> String {
    format!(
        "{},{:.1},{:.1},{:.2},{:.2},{:.2}",
        r.subject, r.mae_overall_hu, r.mae_bone_hu, r.dice_bone, r.msd_sct_to_ct_mm, r.msd_ct_to_sct_mm
    )
}

/// Writes one binary PGM per sagittal (x) slice of a signed error map,
/// mapping [-500, 500] HU onto [0, 255]. Rows run along z, columns along y.
pub fn write_error_map_pgm(map: &Volume3D, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [nx, ny, nz] = map.dims();
    let mut written = Vec::with_capacity(nx);
    for i in 0..nx {
        let mut bytes = format!("P5\n{ny} {nz}\n255\n").into_bytes();
        for k in 0..nz {
            for j in 0..ny {
                bytes.push(window_to_u8(map.get(i, j, k)));
            }
        }
        let path = dir.join(format!("error_x{i:03}.pgm"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn window_to_u8(v: f32) -> u8 {
    let w = ERROR_WINDOW_HU;
    let t = (v.clamp(-w, w) + w) / (2.0 * w);
    (t * 255.0).round() as u8
}
