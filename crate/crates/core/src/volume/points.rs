//! Point clouds of bone candidates for registration.

use std::collections::VecDeque;

use super::{Grid, Mask3D, Volume3D};
use crate::error::{Error, Result};
use crate::Point3;

/// CT bone threshold for cloud extraction.
pub const CT_BONE_HU: f32 = 200.0;
/// Fraction of the robust MR maximum below which a voxel counts as a void.
pub const MR_VOID_FRACTION: f32 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudMode {
    /// CT voxels above 200 HU.
    HighCt,
    /// MR signal voids inside the body.
    LowMr,
}

/// Linear-interpolated percentile (`q` in [0, 100]) of the values.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t) as f32
}

/// Centres (mm) of the selected voxels.
///
/// `HighCt` keeps voxels above 200 HU. `LowMr` keeps voxels darker than 10%
/// of the 99th-percentile intensity that lie inside [`tissue_support`].
pub fn extract_point_cloud(vol: &Volume3D, mode: CloudMode) -> Result<Vec<Point3>> {
    let mask = match mode {
        CloudMode::HighCt => vol.threshold_mask(CT_BONE_HU),
        CloudMode::LowMr => {
            let cut = MR_VOID_FRACTION * percentile(vol.values(), 99.0);
            let support = tissue_support(vol);
            let mut dark = vol.below_mask(cut);
            for (d, &s) in dark.values_mut().iter_mut().zip(support.values()) {
                *d &= s;
            }
            dark
        }
    };
    mask_centers(&mask)
}

fn mask_centers(mask: &Mask3D) -> Result<Vec<Point3>> {
    let g = mask.grid();
    let pts: Vec<Point3> = mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(idx, _)| {
            let [i, j, k] = g.ijk(idx);
            g.center(i, j, k)
        })
        .collect();
    if pts.is_empty() {
        Err(Error::EmptyPointCloud)
    } else {
        Ok(pts)
    }
}

/// Body interior of an MR volume: the largest 6-connected component brighter
/// than 10% of the 99th percentile, with enclosed holes (bone and tendon
/// voids) filled plane by plane along every axis.
pub fn tissue_support(mr: &Volume3D) -> Mask3D {
    let cut = MR_VOID_FRACTION * percentile(mr.values(), 99.0);
    let bright = mr.threshold_mask(cut);
    let body = largest_component(&bright);
    fill_planar_holes(&body)
}

fn neighbors6(g: &Grid, idx: usize, out: &mut Vec<usize>) {
    out.clear();
    let [i, j, k] = g.ijk(idx);
    let [nx, ny, nz] = g.dims;
    if i > 0 {
        out.push(idx - 1);
    }
    if i + 1 < nx {
        out.push(idx + 1);
    }
    if j > 0 {
        out.push(idx - nx);
    }
    if j + 1 < ny {
        out.push(idx + nx);
    }
    if k > 0 {
        out.push(idx - nx * ny);
    }
    if k + 1 < nz {
        out.push(idx + nx * ny);
    }
}

fn largest_component(mask: &Mask3D) -> Mask3D {
    let g = *mask.grid();
    let mut label = vec![0u32; g.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let mut nb = Vec::with_capacity(6);
    for start in 0..g.len() {
        if !mask.values()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            neighbors6(&g, idx, &mut nb);
            for &n in &nb {
                if mask.values()[n] && label[n] == 0 {
                    label[n] = next;
                    queue.push_back(n);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let values = label.iter().map(|&l| l != 0 && l == best.0).collect();
    Mask3D::new(g, values).expect("same grid")
}

/// Fills background regions that cannot reach the border of their 2D plane,
/// for planes normal to each of the three axes.
fn fill_planar_holes(mask: &Mask3D) -> Mask3D {
    let g = *mask.grid();
    let mut out = mask.values().to_vec();
    for normal in 0..3 {
        let (u, v) = match normal {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (nu, nv) = (g.dims[u], g.dims[v]);
        let mut outside = vec![false; nu * nv];
        let mut queue = VecDeque::new();
        for plane in 0..g.dims[normal] {
            let at = |a: usize, b: usize| {
                let mut ijk = [0usize; 3];
                ijk[normal] = plane;
                ijk[u] = a;
                ijk[v] = b;
                g.index(ijk[0], ijk[1], ijk[2])
            };
            outside.iter_mut().for_each(|o| *o = false);
            for a in 0..nu {
                for b in 0..nv {
                    let border = a == 0 || b == 0 || a + 1 == nu || b + 1 == nv;
                    if border && !mask.values()[at(a, b)] {
                        outside[a * nv + b] = true;
                        queue.push_back((a, b));
                    }
                }
            }
            while let Some((a, b)) = queue.pop_front() {
                let mut visit = |a2: usize, b2: usize| {
                    let p = a2 * nv + b2;
                    if !outside[p] && !mask.values()[at(a2, b2)] {
                        outside[p] = true;
                        queue.push_back((a2, b2));
                    }
                };
                if a > 0 {
                    visit(a - 1, b);
                }
                if a + 1 < nu {
                    visit(a + 1, b);
                }
                if b > 0 {
                    visit(a, b - 1);
                }
                if b + 1 < nv {
                    visit(a, b + 1);
                }
            }
            for a in 0..nu {
                for b in 0..nv {
                    if !outside[a * nv + b] {
                        out[at(a, b)] = true;
                    }
                }
            }
        }
    }
    Mask3D::new(g, out).expect("same grid")
}
