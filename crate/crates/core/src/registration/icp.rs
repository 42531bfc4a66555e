use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{KdTree, RigidTransform};
use crate::error::{Error, Result};
use crate::Point3;

/// Nearest destination point for one source point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
}

/// For every source point, its nearest destination point. Equidistant
/// candidates resolve to the smaller destination index.
pub fn nearest_correspondences(src: &[Point3], dst: &[Point3]) -> Result<Vec<Correspondence>> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyInput("correspondence point list"));
    }
    let tree = KdTree::build(dst);
    Ok(correspond_with(&tree, src))
}

fn correspond_with(tree: &KdTree, src: &[Point3]) -> Vec<Correspondence> {
    src.iter()
        .enumerate()
        .map(|(i, &p)| {
            let (j, d2) = tree.nearest(p).expect("non-empty tree");
            Correspondence {
                src: i,
                dst: j,
                distance: d2.sqrt(),
            }
        })
        .collect()
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (Kabsch).
/// Reflections are excluded by flipping the weakest singular direction.
pub fn kabsch_fit(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("{} source vs {} destination points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} pairs, need at least 3", src.len())));
    }
    let n = src.len() as f64;
    let centroid = |pts: &[Point3]| {
        let mut c = Vector3::zeros();
        for p in pts {
            c += Vector3::new(p[0], p[1], p[2]);
        }
        c / n
    };
    let cs = centroid(src);
    let cd = centroid(dst);

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let s = Vector3::new(s[0], s[1], s[2]) - cs;
        let d = Vector3::new(d[0], d[1], d[2]) - cd;
        cov += s * d.transpose();
        scatter += s * s.transpose();
    }

    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::Degenerate("source points are coincident or collinear".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let t = cd - r * cs;

    let xf = RigidTransform {
        r: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        t: [t[0], t[1], t[2]],
    };
    if xf.r.iter().flatten().chain(&xf.t).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite fit".into()));
    }
    Ok(xf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpOptions {
    pub max_iterations: usize,
    /// Stop once one iteration lowers the RMS residual by less than this (mm).
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            max_iterations: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS distance (mm) of the final fit over its correspondences.
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMS nearest-neighbour distance at the start of each iteration.
    pub residuals: Vec<f64>,
}

/// Registers `src` onto `dst`, starting from the identity.
///
/// Each iteration pairs every transformed source point with its nearest
/// destination point, then refits the transform from the original source
/// points to those partners. Converged when an iteration's refit improves
/// the RMS residual by less than `opts.tol`.
pub fn icp_register(src: &[Point3], dst: &[Point3], opts: &IcpOptions) -> Result<IcpResult> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::EmptyInput("ICP needs at least 3 points per cloud"));
    }
    if opts.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be >= 1".into()));
    }
    let tree = KdTree::build(dst);
    let mut xf = RigidTransform::identity();
    let mut residuals = Vec::new();
    let mut moved = vec![[0.0; 3]; src.len()];
    let mut partners = vec![[0.0; 3]; src.len()];
    let mut rms_fit = f64::INFINITY;
    let mut converged = false;

    for _ in 0..opts.max_iterations {
        for (m, &p) in moved.iter_mut().zip(src) {
            *m = xf.apply(p);
        }
        let pairs = correspond_with(&tree, &moved);
        let rms_now = rms(pairs.iter().map(|c| c.distance * c.distance));
        residuals.push(rms_now);
        for (slot, c) in partners.iter_mut().zip(&pairs) {
            *slot = dst[c.dst];
        }

        let next = kabsch_fit(src, &partners)?;
        rms_fit = rms(src.iter().zip(&partners).map(|(&s, &d)| super::dist2(next.apply(s), d)));
        // the refit can only match or beat the current pose on these pairs
        if rms_fit > rms_now {
            rms_fit = rms_now;
        } else {
            xf = next;
        }
        if rms_now - rms_fit < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        transform: xf,
        rms_residual: rms_fit,
        iterations: residuals.len(),
        converged,
        residuals,
    })
}

fn rms(d2: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = d2.fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    (sum / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64, scale: f64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random::<f64>() * scale, rng.random::<f64>() * scale, rng.random::<f64>() * scale])
            .collect()
    }

    fn brute_force(src: &[Point3], dst: &[Point3]) -> Vec<(usize, usize)> {
        src.iter()
            .enumerate()
            .map(|(i, &p)| {
                let mut best = (0usize, f64::INFINITY);
                for (j, &q) in dst.iter().enumerate() {
                    let d = super::super::dist2(p, q);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                (i, best.0)
            })
            .collect()
    }

    #[test]
    fn self_correspondence() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let c = nearest_correspondences(&pts, &pts).unwrap();
        assert_eq!(c[0], Correspondence { src: 0, dst: 0, distance: 0.0 });
        assert_eq!(c[1], Correspondence { src: 1, dst: 1, distance: 0.0 });
    }

    #[test]
    fn correspondences_match_exhaustive_search() {
        let src = random_points(200, 1, 10.0);
        let dst = random_points(200, 2, 10.0);
        let got: Vec<(usize, usize)> = nearest_correspondences(&src, &dst)
            .unwrap()
            .iter()
            .map(|c| (c.src, c.dst))
            .collect();
        assert_eq!(got, brute_force(&src, &dst));
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_index() {
        let dst = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let c = nearest_correspondences(&[[0.0; 3]], &dst).unwrap();
        assert_eq!(c[0].dst, 0);
        let dst = vec![[-1.0, 0.0, 0.0], [5.0, 5.0, 5.0], [1.0, 0.0, 0.0]];
        let c = nearest_correspondences(&[[0.0; 3]], &dst).unwrap();
        assert_eq!(c[0].dst, 0);
    }

    #[test]
    fn empty_lists_error() {
        assert!(nearest_correspondences(&[], &[[0.0; 3]]).is_err());
        assert!(nearest_correspondences(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn kabsch_identity_and_translation() {
        let src = random_points(20, 3, 5.0);
        let xf = kabsch_fit(&src, &src).unwrap();
        assert!(xf.rotation_angle() < 1e-7);
        assert!(xf.t.iter().all(|v| v.abs() < 1e-9));

        let dst: Vec<Point3> = src.iter().map(|p| [p[0] + 5.0, p[1], p[2]]).collect();
        let xf = kabsch_fit(&src, &dst).unwrap();
        assert!(xf.rotation_angle() < 1e-7);
        assert!((xf.t[0] - 5.0).abs() < 1e-9 && xf.t[1].abs() < 1e-9 && xf.t[2].abs() < 1e-9);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let src = random_points(50, 4, 10.0);
        let truth = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 30f64.to_radians(), [1.0, 2.0, 3.0]);
        let dst: Vec<Point3> = src.iter().map(|&p| truth.apply(p)).collect();
        let xf = kabsch_fit(&src, &dst).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((xf.r[i][j] - truth.r[i][j]).abs() < 1e-6);
            }
            assert!((xf.t[i] - truth.t[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kabsch_never_returns_a_reflection() {
        let src = random_points(30, 5, 4.0);
        // mirrored and noisy destination
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dst: Vec<Point3> = src
            .iter()
            .map(|p| [-p[0] + rng.random::<f64>(), p[1] + rng.random::<f64>(), p[2]])
            .collect();
        let xf = kabsch_fit(&src, &dst).unwrap();
        assert!(xf.orthonormality_error() < 1e-6);
    }

    #[test]
    fn kabsch_rejects_degenerate_input() {
        let line = vec![[0.0; 3], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0]];
        assert!(matches!(kabsch_fit(&line, &line), Err(Error::Degenerate(_))));
        let same = vec![[1.0; 3]; 5];
        assert!(matches!(kabsch_fit(&same, &same), Err(Error::Degenerate(_))));
        assert!(kabsch_fit(&line[..2], &line[..2]).is_err());
    }

    #[test]
    fn icp_on_identical_clouds_stops_immediately() {
        let pts = random_points(100, 7, 10.0);
        let res = icp_register(&pts, &pts, &IcpOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.rms_residual, 0.0);
        assert!(res.transform.rotation_angle() < 1e-7);
    }

    #[test]
    fn icp_reports_non_convergence() {
        let src = random_points(300, 8, 10.0);
        let truth = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.1, [0.5, 0.2, 0.0]);
        let dst: Vec<Point3> = src.iter().map(|&p| truth.apply(p)).collect();
        let opts = IcpOptions {
            max_iterations: 1,
            tol: 0.0,
        };
        let res = icp_register(&src, &dst, &opts).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.rms_residual <= res.residuals[0]);
    }

    #[test]
    fn icp_residuals_never_increase() {
        let src = random_points(400, 9, 20.0);
        let truth = RigidTransform::from_axis_angle([0.3, 0.1, 1.0], 0.12, [1.0, -0.5, 0.3]);
        let dst: Vec<Point3> = src.iter().map(|&p| truth.apply(p)).collect();
        let res = icp_register(&src, &dst, &IcpOptions::default()).unwrap();
        for w in res.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", res.residuals);
        }
        assert!(res.rms_residual <= *res.residuals.last().unwrap() + 1e-12);
    }
}
