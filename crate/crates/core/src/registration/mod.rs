//! Rigid CT-to-MR registration by iterative closest point.

mod icp;
mod kdtree;

pub use icp::{icp_register, kabsch_fit, nearest_correspondences, Correspondence, IcpOptions, IcpResult};
pub use kdtree::KdTree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point3;

/// `p ↦ R·p + t` in mm. Maps CT coordinates into MR coordinates when it
/// comes out of [`icp_register`] with the CT cloud as source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Row-major rotation.
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> RigidTransform {
        RigidTransform {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> RigidTransform {
        RigidTransform {
            t,
            ..RigidTransform::identity()
        }
    }

    /// Rotation by `angle` radians about `axis` (any length), then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> RigidTransform {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let cc = 1.0 - c;
        RigidTransform {
            r: [
                [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
                [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
                [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
            ],
            t,
        }
    }

    /// Rotation about the z axis by `degrees`.
    pub fn rz_degrees(degrees: f64) -> RigidTransform {
        RigidTransform::from_axis_angle([0.0, 0.0, 1.0], degrees.to_radians(), [0.0; 3])
    }

    /// Same rotation, pivoting about `center` instead of the origin, followed
    /// by a translation of `shift`.
    pub fn about_center(self, center: Point3, shift: [f64; 3]) -> RigidTransform {
        let rc = mat_vec(&self.r, center);
        RigidTransform {
            r: self.r,
            t: [
                center[0] - rc[0] + shift[0],
                center[1] - rc[1] + shift[1],
                center[2] - rc[2] + shift[2],
            ],
        }
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        let q = mat_vec(&self.r, p);
        [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
        }
        let rt = mat_vec(&self.r, other.t);
        RigidTransform {
            r,
            t: [rt[0] + self.t[0], rt[1] + self.t[1], rt[2] + self.t[2]],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.r[j][i];
            }
        }
        let t = mat_vec(&rt, self.t);
        RigidTransform {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.r[0][0] + self.r[1][1] + self.r[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest deviation of `RᵀR` from the identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.r[k][i] * self.r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst.max((det3(&self.r) - 1.0).abs())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.r.iter().flatten().chain(&self.t).all(|v| v.is_finite());
        if !finite || self.orthonormality_error() > 1e-6 {
            return Err(Error::Config(format!("not a rigid transform: {self:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<RigidTransform> {
        let xf: RigidTransform = serde_json::from_str(s)?;
        xf.validate()?;
        Ok(xf)
    }
}

/// `R·p + t`.
pub fn apply_rigid(xf: &RigidTransform, p: Point3) -> Point3 {
    xf.apply(p)
}

#[inline]
fn mat_vec(r: &[[f64; 3]; 3], p: Point3) -> Point3 {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[inline]
pub(crate) fn dist2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn apply_examples() {
        let id = RigidTransform::identity();
        assert_eq!(apply_rigid(&id, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let tx = RigidTransform::from_translation([1.0, 0.0, 0.0]);
        assert_eq!(apply_rigid(&tx, [0.0; 3]), [1.0, 0.0, 0.0]);
        let q = apply_rigid(&RigidTransform::rz_degrees(90.0), [1.0, 0.0, 0.0]);
        assert!(q[0].abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn compose_and_inverse() {
        let a = RigidTransform::from_axis_angle([1.0, 2.0, 0.5], 0.3, [1.0, -2.0, 4.0]);
        let b = RigidTransform::from_axis_angle([0.0, 1.0, 1.0], -0.7, [0.5, 0.5, 0.0]);
        let p = [3.0, -1.0, 2.0];
        let ab = a.compose(&b).apply(p);
        let seq = a.apply(b.apply(p));
        for i in 0..3 {
            assert!((ab[i] - seq[i]).abs() < 1e-12);
        }
        let back = a.inverse().apply(a.apply(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
        assert!((a.rotation_angle() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn json_layout_is_row_major() {
        let xf = RigidTransform::rz_degrees(90.0).about_center([0.0; 3], [1.0, 2.0, 3.0]);
        let v: serde_json::Value = serde_json::from_str(&xf.to_json()).unwrap();
        assert_eq!(v["t"], serde_json::json!([1.0, 2.0, 3.0]));
        assert!((v["R"][0][1].as_f64().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(RigidTransform::from_json(&xf.to_json()).unwrap(), xf);
        assert!(RigidTransform::from_json(r#"{"R": [[2,0,0],[0,1,0],[0,0,1]], "t": [0,0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn preserves_pairwise_distances(
            axis in (-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0),
            angle in -3.1f64..3.1,
            t in (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0),
            a in (-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0),
            b in (-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0),
        ) {
            let xf = RigidTransform::from_axis_angle([axis.0, axis.1, axis.2], angle, [t.0, t.1, t.2]);
            let (a, b) = ([a.0, a.1, a.2], [b.0, b.1, b.2]);
            let before = dist2(a, b).sqrt();
            let after = dist2(xf.apply(a), xf.apply(b)).sqrt();
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
            prop_assert!(xf.orthonormality_error() < 1e-12);
        }
    }
}
