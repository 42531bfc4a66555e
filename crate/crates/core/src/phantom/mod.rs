//! Procedural lower-arm phantoms: paired three-echo MR and CT volumes with
//! two long bones, tendons and a soft-tissue envelope.
//!
//! Tissue parameters are synthetic stand-ins chosen to reproduce the contrast
//! relationships that matter: cortical bone and tendons are dark on every
//! echo, and only bone exceeds 200 HU on CT.

mod geometry;
mod io;

pub use geometry::{BoneGeometry, PhantomGeometry, TendonAnchor, TendonGeometry};
pub use io::{load_phantom_set, subject_id, write_phantom_set, PhantomManifest, SubjectData, SubjectEntry};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::RigidTransform;
use crate::volume::{resample_trilinear, Grid, Mask3D, Unit, Volume3D, HU_MAX, HU_MIN};

/// Echo times (ms) of the three MR channels.
pub const ECHO_TIMES_MS: [f64; 3] = [2.1, 3.25, 4.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueClass {
    Air = 0,
    SoftTissue = 1,
    CorticalBone = 2,
    TrabecularBone = 3,
    Tendon = 4,
}

impl TissueClass {
    pub const ALL: [TissueClass; 5] = [
        TissueClass::Air,
        TissueClass::SoftTissue,
        TissueClass::CorticalBone,
        TissueClass::TrabecularBone,
        TissueClass::Tendon,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    /// Proton density, unitless.
    pub rho: f64,
    pub t2star_ms: f64,
    pub hu: f64,
}

impl TissueParams {
    /// Mono-exponential echo signal before noise.
    pub fn signal(&self, te_ms: f64) -> f64 {
        if self.rho == 0.0 {
            return 0.0;
        }
        self.rho * (-te_ms / self.t2star_ms).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub air: TissueParams,
    pub soft_tissue: TissueParams,
    pub cortical_bone: TissueParams,
    pub trabecular_bone: TissueParams,
    pub tendon: TissueParams,
    /// Half-range of the trabecular HU texture.
    pub trabecular_texture_hu: f64,
    /// Relative proton-density swing that accompanies the texture (denser
    /// trabeculae, less marrow signal).
    pub trabecular_texture_rho: f64,
    /// Lattice spacing (mm) of the band-limited texture.
    pub texture_scale_mm: f64,
}

impl Default for TissueModel {
    fn default() -> Self {
        let p = |rho, t2star_ms, hu| TissueParams { rho, t2star_ms, hu };
        TissueModel {
            air: p(0.0, 1.0, -1000.0),
            soft_tissue: p(1.0, 30.0, 40.0),
            cortical_bone: p(0.1, 0.4, 1200.0),
            trabecular_bone: p(0.6, 15.0, 300.0),
            tendon: p(0.15, 0.8, 80.0),
            trabecular_texture_hu: 150.0,
            trabecular_texture_rho: 0.5,
            texture_scale_mm: 3.0,
        }
    }
}

impl TissueModel {
    pub fn params(&self, class: TissueClass) -> &TissueParams {
        match class {
            TissueClass::Air => &self.air,
            TissueClass::SoftTissue => &self.soft_tissue,
            TissueClass::CorticalBone => &self.cortical_bone,
            TissueClass::TrabecularBone => &self.trabecular_bone,
            TissueClass::Tendon => &self.tendon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tissue model: {m}")));
        if self.cortical_bone.t2star_ms > 1.0 || self.tendon.t2star_ms > 1.0 {
            return bad("cortical bone and tendon need T2* <= 1 ms");
        }
        if self.air.rho != 0.0 {
            return bad("air must have zero proton density");
        }
        if !(self.cortical_bone.hu > 200.0 && 200.0 > self.tendon.hu) {
            return bad("need cortical HU > 200 > tendon HU");
        }
        let all = TissueClass::ALL.map(|c| *self.params(c));
        if all.iter().any(|p| p.rho < 0.0 || p.t2star_ms <= 0.0) {
            return bad("densities must be non-negative and T2* positive");
        }
        if !(self.texture_scale_mm > 0.0 && (0.0..1.0).contains(&self.trabecular_texture_rho)) {
            return bad("texture scale must be positive and rho swing in [0, 1)");
        }
        Ok(())
    }
}

/// Phantom generation settings. Missing JSON fields take the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// MR noise σ as a fraction of the first-echo soft-tissue signal.
    pub mr_noise: f64,
    pub ct_noise_hu: f64,
    pub min_tendons: usize,
    pub max_tendons: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [64, 64, 48],
            spacing: [1.0; 3],
            mr_noise: 0.02,
            ct_noise_hu: 20.0,
            min_tendons: 2,
            max_tendons: 4,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        // sagittal slices span (y, z)
        if self.dims[1] % 8 != 0 || self.dims[2] % 8 != 0 {
            return Err(Error::Config(format!(
                "sagittal plane {}x{} must be divisible by 8",
                self.dims[1], self.dims[2]
            )));
        }
        if self.dims.iter().any(|&d| d < 24) {
            return Err(Error::Config(format!("phantom dims {:?} too small", self.dims)));
        }
        if !(self.mr_noise >= 0.0 && self.ct_noise_hu >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.min_tendons < 1 || self.min_tendons > self.max_tendons {
            return Err(Error::Config("need 1 <= min_tendons <= max_tendons".into()));
        }
        Ok(())
    }

    /// The spec of subject `index` in a set: same settings, derived seed.
    pub fn for_subject(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed.wrapping_mul(1000).wrapping_add(index as u64),
            ..*self
        }
    }
}

/// One generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub mr: [Volume3D; 3],
    pub ct: Volume3D,
    /// Tissue class code per voxel (see [`TissueClass::code`]).
    pub classes: Vec<u8>,
    pub geometry: PhantomGeometry,
}

impl Phantom {
    pub fn grid(&self) -> &Grid {
        self.ct.grid()
    }

    pub fn label(&self, class: TissueClass) -> Mask3D {
        let code = class.code();
        Mask3D::new(*self.grid(), self.classes.iter().map(|&c| c == code).collect()).expect("sized")
    }

    /// Class codes as a volume, for writing to disk.
    pub fn label_volume(&self) -> Volume3D {
        Volume3D::new(*self.grid(), Unit::Mask, self.classes.iter().map(|&c| c as f32).collect()).expect("sized")
    }
}

/// Band-limited value noise in [−1, 1]: uniform random values on a coarse
/// lattice, blended with smoothstep weights.
struct ValueNoise {
    dims: [usize; 3],
    scale: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(extent_mm: [f64; 3], scale: f64, rng: &mut ChaCha8Rng) -> ValueNoise {
        let dims = extent_mm.map(|e| (e / scale).ceil() as usize + 2);
        let values = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ValueNoise { dims, scale, values }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut w = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] / self.scale).max(0.0);
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            let f = (u - i as f64).clamp(0.0, 1.0);
            base[a] = i;
            w[a] = f * f * (3.0 - 2.0 * f);
        }
        let idx = |i: usize, j: usize, k: usize| i + self.dims[0] * (j + self.dims[1] * k);
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let wt = (if di == 1 { w[0] } else { 1.0 - w[0] })
                        * (if dj == 1 { w[1] } else { 1.0 - w[1] })
                        * (if dk == 1 { w[2] } else { 1.0 - w[2] });
                    acc += wt * self.values[idx(base[0] + di, base[1] + dj, base[2] + dk)];
                }
            }
        }
        acc
    }
}

/// Samples a geometry from the spec's seed and renders it.
pub fn generate_phantom(spec: &PhantomSpec, tissues: &TissueModel) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = PhantomGeometry::sample(spec, &mut rng)?;
    render(spec, tissues, geometry, &mut rng)
}

/// Renders an explicit geometry; fails if a bone leaves the soft tissue.
pub fn generate_with_geometry(spec: &PhantomSpec, tissues: &TissueModel, geometry: PhantomGeometry) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    render(spec, tissues, geometry, &mut rng)
}

fn render(spec: &PhantomSpec, tissues: &TissueModel, geometry: PhantomGeometry, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    tissues.validate()?;
    let grid = spec.grid()?;
    geometry.validate(&grid)?;

    let extent = [0, 1, 2].map(|a| grid.dims[a] as f64 * grid.spacing[a]);
    let texture = ValueNoise::new(extent, tissues.texture_scale_mm, rng);

    let n = grid.len();
    let mut classes = vec![0u8; n];
    let mut tex = vec![0.0f64; n];
    for (idx, (c, t)) in classes.iter_mut().zip(tex.iter_mut()).enumerate() {
        let [i, j, k] = grid.ijk(idx);
        let p = grid.center(i, j, k);
        let class = geometry.classify(p);
        *c = class.code();
        if class == TissueClass::TrabecularBone {
            *t = texture.at(p);
        }
    }

    let mr_sigma = spec.mr_noise * tissues.soft_tissue.signal(ECHO_TIMES_MS[0]);
    let mr_noise = Normal::new(0.0, mr_sigma.max(f64::MIN_POSITIVE)).expect("finite σ");
    let ct_noise = Normal::new(0.0, spec.ct_noise_hu.max(f64::MIN_POSITIVE)).expect("finite σ");

    let class_of = |code: u8| TissueClass::ALL[code as usize];
    let mut mr = Vec::with_capacity(3);
    for &te in &ECHO_TIMES_MS {
        let mut values = Vec::with_capacity(n);
        for (&c, &t) in classes.iter().zip(&tex) {
            let class = class_of(c);
            let mut params = *tissues.params(class);
            if class == TissueClass::TrabecularBone {
                params.rho *= 1.0 - tissues.trabecular_texture_rho * t;
            }
            let noise = if spec.mr_noise > 0.0 { mr_noise.sample(rng) } else { 0.0 };
            values.push((params.signal(te) + noise) as f32);
        }
        mr.push(Volume3D::new(grid, Unit::Mr, values)?);
    }
    let mut ct_values = Vec::with_capacity(n);
    for (&c, &t) in classes.iter().zip(&tex) {
        let class = class_of(c);
        let mut hu = tissues.params(class).hu;
        if class == TissueClass::TrabecularBone {
            hu += tissues.trabecular_texture_hu * t;
        }
        let noise = if spec.ct_noise_hu > 0.0 { ct_noise.sample(rng) } else { 0.0 };
        ct_values.push(((hu + noise) as f32).clamp(HU_MIN, HU_MAX));
    }
    let ct = Volume3D::new(grid, Unit::Hu, ct_values)?;
    let mr: [Volume3D; 3] = mr.try_into().expect("three echoes");
    Ok(Phantom {
        mr,
        ct,
        classes,
        geometry,
    })
}

/// `out(p) = ct(xf(p))` on the same grid; voxels mapped outside read as air.
pub fn perturb_pose(ct: &Volume3D, xf: &RigidTransform) -> Volume3D {
    resample_trilinear(ct, xf, ct.grid())
}

/// A random rigid transform about the grid centre: rotation angle uniform in
/// [0, `max_deg`] about a random axis, centre displacement uniform in the
/// ball of radius `max_shift_mm`.
pub fn random_pose<R: Rng>(grid: &Grid, max_deg: f64, max_shift_mm: f64, rng: &mut R) -> RigidTransform {
    let unit = |rng: &mut R| loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = v.iter().map(|a| a * a).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            break (v, n2.sqrt());
        }
    };
    let (axis, _) = unit(rng);
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    let (dir, len) = unit(rng);
    let radius = max_shift_mm * len;
    let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
    let shift = dir.map(|d| d / norm * radius);
    RigidTransform::from_axis_angle(axis, angle, [0.0; 3]).about_center(grid.middle(), shift)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_tissues_are_valid() {
        TissueModel::default().validate().unwrap();
        let mut t = TissueModel::default();
        t.tendon.hu = 250.0;
        assert!(t.validate().is_err());
        let mut t = TissueModel::default();
        t.cortical_bone.t2star_ms = 2.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PhantomSpec {
            dims: [64, 60, 48],
            ..PhantomSpec::default()
        }
        .validate()
        .is_err());
        assert!(PhantomSpec {
            min_tendons: 5,
            ..PhantomSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_phantom(&spec(3), &TissueModel::default()).unwrap();
        let b = generate_phantom(&spec(3), &TissueModel::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&spec(4), &TissueModel::default()).unwrap();
        assert_ne!(a.ct, c.ct);
    }

    #[test]
    fn contrast_relationships() {
        let t = TissueModel::default();
        for seed in 0..3 {
            let p = generate_phantom(&spec(seed), &t).unwrap();
            let cortical = p.label(TissueClass::CorticalBone);
            let tendon = p.label(TissueClass::Tendon);
            assert!(cortical.count() > 1000 && tendon.count() > 100);

            let soft_rho = t.soft_tissue.rho;
            let mean_over = |v: &Volume3D, m: &Mask3D| {
                let s: f64 = v.values().iter().zip(m.values()).filter(|(_, &b)| b).map(|(&x, _)| x as f64).sum();
                s / m.count() as f64
            };
            assert!(mean_over(&p.mr[0], &cortical) < 0.05 * soft_rho);
            assert!(mean_over(&p.mr[0], &tendon) < 0.05 * soft_rho);

            let bone = p.ct.threshold_mask(200.0);
            assert!(cortical.is_subset_of(&bone));
            assert_eq!(bone.intersection_count(&tendon), 0);
            assert_eq!(bone.intersection_count(&p.label(TissueClass::SoftTissue)), 0);
        }
    }

    #[test]
    fn labels_partition_the_volume() {
        let p = generate_phantom(&spec(7), &TissueModel::default()).unwrap();
        let total: usize = TissueClass::ALL.iter().map(|&c| p.label(c).count()).sum();
        assert_eq!(total, p.grid().len());
    }

    #[test]
    fn noise_free_echoes_decay() {
        let s = PhantomSpec {
            mr_noise: 0.0,
            ct_noise_hu: 0.0,
            ..spec(1)
        };
        let p = generate_phantom(&s, &TissueModel::default()).unwrap();
        for idx in 0..p.grid().len() {
            let e = [0, 1, 2].map(|e| p.mr[e].values()[idx]);
            assert!(e[0] >= e[1] && e[1] >= e[2]);
        }
    }

    #[test]
    fn identity_pose_is_exact_and_poses_compose() {
        let p = generate_phantom(&spec(2), &TissueModel::default()).unwrap();
        assert_eq!(perturb_pose(&p.ct, &RigidTransform::identity()), p.ct);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_pose(p.grid(), 4.0, 2.0, &mut rng);
        let b = random_pose(p.grid(), 4.0, 2.0, &mut rng);
        let g = *p.grid();
        // mean |twice − once| away from the field-of-view edge
        let compare = |vol: &Volume3D| {
            let twice = perturb_pose(&perturb_pose(vol, &a), &b);
            let once = perturb_pose(vol, &a.compose(&b));
            let mut diffs = Vec::new();
            for k in 8..g.dims[2] - 8 {
                for j in 8..g.dims[1] - 8 {
                    for i in 8..g.dims[0] - 8 {
                        diffs.push((twice.get(i, j, k) - once.get(i, j, k)).abs() as f64);
                    }
                }
            }
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            diffs.sort_by(f64::total_cmp);
            (mean, diffs[diffs.len() / 2])
        };
        // band-limited field: double interpolation stays within 2 HU
        let smooth = Volume3D::from_fn(g, Unit::Hu, |i, j, k| {
            (400.0 * (i as f64 / 7.0).sin() * (j as f64 / 9.0).cos() + 300.0 * (k as f64 / 6.0).sin()) as f32
        })
        .unwrap();
        let (mean, _) = compare(&smooth);
        assert!(mean < 2.0, "{mean}");
        // step edges of the phantom blur twice; the bulk still agrees
        let (_, median) = compare(&p.ct);
        assert!(median < 10.0, "{median}");
    }

    #[test]
    fn random_pose_respects_bounds() {
        let g = spec(0).grid().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let xf = random_pose(&g, 10.0, 5.0, &mut rng);
            assert!(xf.rotation_angle().to_degrees() <= 10.0 + 1e-9);
            let c = g.middle();
            let d = xf.apply(c);
            let shift = ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2) + (d[2] - c[2]).powi(2)).sqrt();
            assert!(shift <= 5.0 + 1e-9);
        }
    }
}
