use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PhantomSpec, TissueClass};
use crate::error::{Error, Result};
use crate::volume::Grid;
use crate::Point3;

/// Required clearance (mm) between a bone or tendon and the skin.
const SKIN_MARGIN: f64 = 1.5;
const MAX_ATTEMPTS: usize = 200;

/// A long bone running roughly along y: cortical tube with capped ends around
/// a trabecular core. The centreline is tilted and bows quadratically; the
/// radius tapers and flares towards one end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoneGeometry {
    /// (x, z) of the centreline half-way along the bone, before bowing, mm.
    pub center_xz: [f64; 2],
    /// (x, z) centreline drift per mm of y.
    pub tilt: [f64; 2],
    pub radius: f64,
    pub cortex: f64,
    /// First and last y (mm) covered by the bone.
    pub y_range: [f64; 2],
    /// Mid-shaft (x, z) displacement of the centreline, mm.
    pub bow: [f64; 2],
    /// Relative radius change from one end to the other (conical taper).
    pub taper: f64,
    /// Relative radius increase at the flared end.
    pub flare: f64,
    /// +1 flares towards high y, −1 towards low y.
    pub flare_end: f64,
}

impl BoneGeometry {
    fn s(&self, y: f64) -> f64 {
        let [y0, y1] = self.y_range;
        (2.0 * (y - 0.5 * (y0 + y1)) / (y1 - y0)).clamp(-1.0, 1.0)
    }

    pub fn centerline(&self, y: f64) -> [f64; 2] {
        let [y0, y1] = self.y_range;
        let dy = y.clamp(y0, y1) - 0.5 * (y0 + y1);
        let w = 1.0 - self.s(y).powi(2);
        [0, 1].map(|a| self.center_xz[a] + self.tilt[a] * dy + self.bow[a] * w)
    }

    pub fn radius_at(&self, y: f64) -> f64 {
        let s = self.s(y);
        let u = ((self.flare_end * s - 0.2) / 0.8).max(0.0);
        self.radius * (1.0 + 0.5 * self.taper * s) * (1.0 + self.flare * u * u)
    }

    pub fn max_radius(&self) -> f64 {
        self.radius * (1.0 + 0.5 * self.taper.abs()) * (1.0 + self.flare)
    }

    fn classify(&self, p: Point3) -> Option<TissueClass> {
        let [y0, y1] = self.y_range;
        let y = p[1];
        if y < y0 || y > y1 {
            return None;
        }
        let c = self.centerline(y);
        let d = ((p[0] - c[0]).powi(2) + (p[2] - c[1]).powi(2)).sqrt();
        let r = self.radius_at(y);
        if d > r {
            return None;
        }
        let shell = d > r - self.cortex || y - y0 < self.cortex || y1 - y < self.cortex;
        Some(if shell {
            TissueClass::CorticalBone
        } else {
            TissueClass::TrabecularBone
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TendonAnchor {
    /// Fixed (x, z) along the whole arm.
    Free { center_xz: [f64; 2] },
    /// Runs alongside bone `bone` at polar angle `angle` (rad), `gap` mm off
    /// its surface.
    Bone { bone: usize, angle: f64, gap: f64 },
}

/// A tendon cord spanning the full y extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TendonGeometry {
    pub radius: f64,
    pub anchor: TendonAnchor,
}

impl TendonGeometry {
    pub fn center(&self, y: f64, bones: &[BoneGeometry]) -> [f64; 2] {
        match self.anchor {
            TendonAnchor::Free { center_xz } => center_xz,
            TendonAnchor::Bone { bone, angle, gap } => {
                let b = &bones[bone];
                let yc = y.clamp(b.y_range[0], b.y_range[1]);
                let c = b.centerline(yc);
                let d = b.radius_at(yc) + self.radius + gap;
                [c[0] + d * angle.cos(), c[1] + d * angle.sin()]
            }
        }
    }

    pub fn is_adjacent_to_bone(&self) -> bool {
        matches!(self.anchor, TendonAnchor::Bone { .. })
    }
}

/// Everything needed to label a voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    /// Soft-tissue ellipse in the x–z cross-section, constant along y.
    pub ellipse_center_xz: [f64; 2],
    pub ellipse_axes_xz: [f64; 2],
    pub bones: Vec<BoneGeometry>,
    pub tendons: Vec<TendonGeometry>,
}

impl PhantomGeometry {
    /// Draws geometries until one passes [`PhantomGeometry::validate`].
    pub fn sample<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<PhantomGeometry> {
        let grid = spec.grid()?;
        for _ in 0..MAX_ATTEMPTS {
            let g = Self::draw(spec, &grid, rng);
            if g.validate(&grid).is_ok() {
                return Ok(g);
            }
        }
        Err(Error::Geometry(format!(
            "no valid geometry after {MAX_ATTEMPTS} draws for dims {:?}",
            spec.dims
        )))
    }

    fn draw<R: Rng>(spec: &PhantomSpec, grid: &Grid, rng: &mut R) -> PhantomGeometry {
        let ext = [0, 1, 2].map(|a| (grid.dims[a] - 1) as f64 * grid.spacing[a]);
        let mid = grid.middle();
        let ellipse_center_xz = [mid[0] + rng.random_range(-1.0..1.0), mid[2] + rng.random_range(-1.0..1.0)];
        let ellipse_axes_xz = [ext[0] * rng.random_range(0.36..0.42), ext[2] * rng.random_range(0.34..0.40)];

        let mut bones = Vec::with_capacity(2);
        for side in [-1.0, 1.0] {
            let y0 = rng.random_range(10.0..14.0) / 64.0 * ext[1];
            let y1 = ext[1] - rng.random_range(10.0..14.0) / 64.0 * ext[1];
            bones.push(BoneGeometry {
                center_xz: [
                    ellipse_center_xz[0] + side * rng.random_range(7.5..10.0),
                    ellipse_center_xz[1] + rng.random_range(-1.5..1.5),
                ],
                // the bones splay apart in z so neither can slide along its own axis
                tilt: [rng.random_range(-0.08..0.08), side * rng.random_range(0.15..0.3)],
                radius: rng.random_range(3.6..4.8),
                cortex: rng.random_range(1.5..2.2),
                y_range: [y0, y1],
                bow: [0, 1].map(|_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.random_range(1.5..3.0)
                }),
                taper: rng.random_range(-0.3..0.3),
                flare: rng.random_range(0.3..0.5),
                flare_end: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            });
        }

        let count = rng.random_range(spec.min_tendons..=spec.max_tendons);
        let mut tendons = Vec::with_capacity(count);
        tendons.push(TendonGeometry {
            radius: rng.random_range(1.0..1.6),
            anchor: TendonAnchor::Bone {
                bone: rng.random_range(0..bones.len()),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
                gap: rng.random_range(0.0..0.8),
            },
        });
        while tendons.len() < count {
            let radius = rng.random_range(1.0..1.6);
            let [ax, az] = ellipse_axes_xz.map(|a| a - radius - SKIN_MARGIN - 0.5);
            let c = [
                ellipse_center_xz[0] + rng.random_range(-ax..ax),
                ellipse_center_xz[1] + rng.random_range(-az..az),
            ];
            let clear = bones.iter().all(|b| {
                let mut y = b.y_range[0];
                while y <= b.y_range[1] {
                    let p = b.centerline(y);
                    if ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt() <= b.radius_at(y) + radius + 3.0 {
                        return false;
                    }
                    y += 1.0;
                }
                true
            });
            let prior_clear = tendons.iter().all(|t| match t.anchor {
                TendonAnchor::Free { center_xz } => {
                    ((c[0] - center_xz[0]).powi(2) + (c[1] - center_xz[1]).powi(2)).sqrt() > t.radius + radius + 1.0
                }
                TendonAnchor::Bone { .. } => true,
            });
            if clear && prior_clear {
                tendons.push(TendonGeometry {
                    radius,
                    anchor: TendonAnchor::Free { center_xz: c },
                });
            }
        }
        PhantomGeometry {
            ellipse_center_xz,
            ellipse_axes_xz,
            bones,
            tendons,
        }
    }

    fn inside_ellipse(&self, x: f64, z: f64, margin: f64) -> bool {
        let [ax, az] = self.ellipse_axes_xz.map(|a| a - margin);
        if ax <= 0.0 || az <= 0.0 {
            return false;
        }
        let u = (x - self.ellipse_center_xz[0]) / ax;
        let v = (z - self.ellipse_center_xz[1]) / az;
        u * u + v * v <= 1.0
    }

    /// Bones and tendons lie inside the soft tissue, the soft tissue inside
    /// the field of view, and the two bones do not touch.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let ext = [0, 1, 2].map(|a| (grid.dims[a] - 1) as f64 * grid.spacing[a]);
        let [cx, cz] = self.ellipse_center_xz;
        let [ax, az] = self.ellipse_axes_xz;
        if !(ax > 0.0 && az > 0.0 && cx - ax >= 1.0 && cx + ax <= ext[0] - 1.0 && cz - az >= 1.0 && cz + az <= ext[2] - 1.0)
        {
            return Err(Error::Geometry("soft-tissue ellipse leaves the field of view".into()));
        }
        let ring = |c: [f64; 2], r: f64| {
            (0..32).map(move |i| {
                let a = i as f64 * std::f64::consts::TAU / 32.0;
                (c[0] + r * a.cos(), c[1] + r * a.sin())
            })
        };
        for (bi, b) in self.bones.iter().enumerate() {
            let [y0, y1] = b.y_range;
            if !(b.radius > 0.0 && b.cortex > 0.0 && b.cortex < b.radius && y0 >= 0.0 && y1 <= ext[1] && y1 - y0 > 2.0 * b.cortex) {
                return Err(Error::Geometry(format!("bone {bi} has invalid dimensions")));
            }
            let mut y = y0;
            while y <= y1 {
                if ring(b.centerline(y), b.radius_at(y)).any(|(x, z)| !self.inside_ellipse(x, z, SKIN_MARGIN)) {
                    return Err(Error::Geometry(format!("bone {bi} extends outside the soft tissue at y = {y:.1}")));
                }
                for other in &self.bones[bi + 1..] {
                    if y >= other.y_range[0] && y <= other.y_range[1] {
                        let (p, q) = (b.centerline(y), other.centerline(y));
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                        if d < b.radius_at(y) + other.radius_at(y) + 1.0 {
                            return Err(Error::Geometry("bones overlap".into()));
                        }
                    }
                }
                y += 0.5;
            }
        }
        for (ti, t) in self.tendons.iter().enumerate() {
            if let TendonAnchor::Bone { bone, .. } = t.anchor {
                if bone >= self.bones.len() {
                    return Err(Error::Geometry(format!("tendon {ti} anchored to missing bone {bone}")));
                }
            }
            let mut y = 0.0;
            while y <= ext[1] {
                if ring(t.center(y, &self.bones), t.radius).any(|(x, z)| !self.inside_ellipse(x, z, SKIN_MARGIN)) {
                    return Err(Error::Geometry(format!("tendon {ti} extends outside the soft tissue")));
                }
                y += 1.0;
            }
        }
        Ok(())
    }

    /// Tissue at a point; bone wins over tendon, tendon over soft tissue.
    pub fn classify(&self, p: Point3) -> TissueClass {
        for b in &self.bones {
            if let Some(c) = b.classify(p) {
                return c;
            }
        }
        for t in &self.tendons {
            let c = t.center(p[1], &self.bones);
            if (p[0] - c[0]).powi(2) + (p[2] - c[1]).powi(2) <= t.radius * t.radius {
                return TissueClass::Tendon;
            }
        }
        if self.inside_ellipse(p[0], p[2], 0.0) {
            TissueClass::SoftTissue
        } else {
            TissueClass::Air
        }
    }
}
