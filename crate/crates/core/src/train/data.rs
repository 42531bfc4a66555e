use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{percentile, Volume3D, HU_AIR};

/// Background value of a normalized MR slice.
pub const MR_FILL: f32 = 0.0;
/// Background value of a normalized CT slice (−1000 HU).
pub const CT_FILL: f32 = 0.0;
/// Normalized CT above which a pixel counts as tissue (−500 HU).
pub const TISSUE_UNIT: f32 = 0.25;

const UNIT_MAX: f32 = 2.0;

/// HU → network units: (HU + 1000) / 2000, clipped to [0, 2].
pub fn ct_to_unit(hu: f32) -> f32 {
    ((hu - HU_AIR) / 2000.0).clamp(0.0, UNIT_MAX)
}

/// Network units → HU.
pub fn ct_from_unit(u: f32) -> f32 {
    u * 2000.0 + HU_AIR
}

/// Per-echo scaling: each echo is divided by its own 99th percentile and
/// clipped to [0, 2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrNormalizer {
    pub scale: [f32; 3],
}

impl MrNormalizer {
    pub fn fit(mr: &[Volume3D; 3]) -> Result<MrNormalizer> {
        let mut scale = [0.0; 3];
        for (e, vol) in mr.iter().enumerate() {
            let p = percentile(vol.values(), 99.0);
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::NonFinite(format!("MR echo {} has 99th percentile {p}", e + 1)));
            }
            scale[e] = p;
        }
        Ok(MrNormalizer { scale })
    }

    pub fn apply(&self, echo: usize, v: f32) -> f32 {
        (v / self.scale[echo]).clamp(0.0, UNIT_MAX)
    }

    /// Normalized 3-channel sagittal plane at x index `x`, (y, z) row-major.
    pub fn sagittal(&self, mr: &[Volume3D; 3], x: usize) -> Vec<f32> {
        let [_, ny, nz] = mr[0].dims();
        let mut out = Vec::with_capacity(3 * ny * nz);
        for (e, vol) in mr.iter().enumerate() {
            for y in 0..ny {
                for z in 0..nz {
                    out.push(self.apply(e, vol.get(x, y, z)));
                }
            }
        }
        out
    }
}

/// One sagittal training sample: rows are y, columns z.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    /// Sagittal (x) index within its volume.
    pub index: usize,
    pub height: usize,
    pub width: usize,
    /// Three echo planes.
    pub mr: Vec<f32>,
    pub ct: Vec<f32>,
}

impl SlicePair {
    /// False for slices whose CT is air throughout.
    pub fn has_tissue(&self) -> bool {
        self.ct.iter().any(|&v| v > TISSUE_UNIT)
    }
}

fn check_grids(mr: &[Volume3D; 3], ct: Option<&Volume3D>) -> Result<()> {
    for (e, v) in mr.iter().enumerate().skip(1) {
        mr[0].grid().ensure_same(v.grid(), &format!("MR echo {}", e + 1))?;
    }
    if let Some(ct) = ct {
        mr[0].grid().ensure_same(ct.grid(), "MR and CT")?;
    }
    Ok(())
}

/// Every sagittal slice of a subject, normalized.
pub fn extract_sagittal_slices(mr: &[Volume3D; 3], ct: &Volume3D) -> Result<Vec<SlicePair>> {
    check_grids(mr, Some(ct))?;
    let norm = MrNormalizer::fit(mr)?;
    let [nx, ny, nz] = ct.dims();
    Ok((0..nx)
        .map(|x| {
            let mut plane = Vec::with_capacity(ny * nz);
            for y in 0..ny {
                for z in 0..nz {
                    plane.push(ct_to_unit(ct.get(x, y, z)));
                }
            }
            SlicePair {
                index: x,
                height: ny,
                width: nz,
                mr: norm.sagittal(mr, x),
                ct: plane,
            }
        })
        .collect())
}

pub(crate) fn check_mr(mr: &[Volume3D; 3]) -> Result<()> {
    check_grids(mr, None)
}

/// Translates an `h`×`w` plane by `dx` columns and `dy` rows, filling the
/// vacated pixels.
pub fn shift_plane(plane: &[f32], h: usize, w: usize, dx: i64, dy: i64, fill: f32) -> Vec<f32> {
    let mut out = vec![fill; h * w];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx >= 0 && sx < w as i64 {
                out[(y * w as i64 + x) as usize] = plane[(sy * w as i64 + sx) as usize];
            }
        }
    }
    out
}

/// Applies one random integer shift in [−max_shift, max_shift]² to every MR
/// channel and the CT alike. Returns the shifted planes and (dx, dy).
pub fn augment_shift<R: Rng>(
    mr: &[f32],
    ct: &[f32],
    h: usize,
    w: usize,
    rng: &mut R,
    max_shift: usize,
) -> (Vec<f32>, Vec<f32>, (i64, i64)) {
    let m = max_shift as i64;
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    let p = h * w;
    if p == 0 {
        return (mr.to_vec(), ct.to_vec(), (dx, dy));
    }
    let mut out_mr = Vec::with_capacity(mr.len());
    for c in mr.chunks(p) {
        out_mr.extend(shift_plane(c, h, w, dx, dy, MR_FILL));
    }
    (out_mr, shift_plane(ct, h, w, dx, dy, CT_FILL), (dx, dy))
}

/// Subject indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subjects: usize,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Each fold partitions the subjects; the test sets partition them too.
    pub fn validate(&self) -> Result<()> {
        let n = self.subjects;
        let mut tested = vec![0usize; n];
        for (k, f) in self.folds.iter().enumerate() {
            let mut seen = vec![false; n];
            for &i in f.train.iter().chain(&f.val).chain(&f.test) {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("fold {k} repeats or overruns subject {i}")));
                }
            }
            if seen.contains(&false) || f.train.is_empty() || f.val.is_empty() || f.test.is_empty() {
                return Err(Error::Config(format!("fold {k} does not partition the {n} subjects")));
            }
            for &i in &f.test {
                tested[i] += 1;
            }
        }
        if tested.iter().any(|&c| c != 1) {
            return Err(Error::Config("test sets do not cover every subject exactly once".into()));
        }
        Ok(())
    }
}

/// Seeded k-fold plan. Test sets are consecutive chunks of a shuffled subject
/// order; the remaining subjects split train:val as 4:2 (rounded, at least one
/// each). With 9 subjects and k = 3 this is exactly 4 train / 2 val / 3 test.
pub fn make_folds(subjects: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || subjects < k {
        return Err(Error::Config(format!("cannot make {k} folds from {subjects} subjects")));
    }
    let largest_test = subjects.div_ceil(k);
    if subjects - largest_test < 2 {
        return Err(Error::Config(format!(
            "{subjects} subjects leave fewer than 2 for training and validation in a {k}-fold plan"
        )));
    }
    let mut order: Vec<usize> = (0..subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = subjects / k + usize::from(f < subjects % k);
        let test: Vec<usize> = order[start..start + len].to_vec();
        let rest: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        let n_val = ((rest.len() as f64 / 3.0).round() as usize).clamp(1, rest.len() - 1);
        let (train, val) = rest.split_at(rest.len() - n_val);
        folds.push(Fold {
            train: train.to_vec(),
            val: val.to_vec(),
            test,
        });
        start += len;
    }
    let plan = FoldPlan { subjects, folds };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid, Unit};

    #[test]
    fn ct_mapping() {
        assert!((ct_to_unit(200.0) - 0.6).abs() < 1e-7);
        assert_eq!(ct_to_unit(-1024.0), 0.0);
        assert_eq!(ct_to_unit(3071.0), 2.0);
        for hu in [-1000.0f32, -432.5, 0.0, 40.0, 1200.0, 2999.0] {
            assert!((ct_from_unit(ct_to_unit(hu)) - hu).abs() < 1e-4, "{hu}");
        }
    }

    fn volumes() -> ([Volume3D; 3], Volume3D) {
        let g = Grid::new([5, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let mr = [1.0f32, 0.5, 0.25].map(|s| Volume3D::from_fn(g, Unit::Mr, |i, j, k| s * (1 + i + j + k) as f32).unwrap());
        let ct = Volume3D::from_fn(g, Unit::Hu, |i, _, _| if i == 0 { -1000.0 } else { 40.0 }).unwrap();
        (mr, ct)
    }

    #[test]
    fn slices_per_sagittal_index() {
        let (mr, ct) = volumes();
        let s = extract_sagittal_slices(&mr, &ct).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!((s[2].index, s[2].height, s[2].width), (2, 8, 8));
        assert_eq!(s[2].mr.len(), 3 * 64);
        assert!(!s[0].has_tissue());
        assert!(s[1].has_tissue());
        assert!(s.iter().all(|p| p.mr.iter().all(|&v| (0.0..=2.0).contains(&v))));
        // echo planes share their own scale, so echo ratios vanish
        assert_eq!(s[3].mr[10], s[3].mr[64 + 10]);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (mr, _) = volumes();
        let g = Grid::new([5, 8, 8], [2.0; 3], [0.0; 3]).unwrap();
        let ct = Volume3D::filled(g, Unit::Hu, 0.0).unwrap();
        assert!(matches!(extract_sagittal_slices(&mr, &ct), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn shift_examples() {
        let plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(shift_plane(&plane, 3, 4, 0, 0, -1.0), plane);
        let right = shift_plane(&plane, 3, 4, 1, 0, -1.0);
        assert_eq!(&right[..4], &[-1.0, 0.0, 1.0, 2.0]);
        let up = shift_plane(&plane, 3, 4, 0, -1, -1.0);
        assert_eq!(&up[8..], &[-1.0; 4]);
        assert_eq!(&up[..4], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn shifts_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut lo, mut hi) = (0i64, 0i64);
        for _ in 0..100_000 {
            let (_, _, (dx, dy)) = augment_shift(&[0.0; 3], &[0.0], 1, 1, &mut rng, 8);
            lo = lo.min(dx.min(dy));
            hi = hi.max(dx.max(dy));
        }
        assert_eq!((lo, hi), (-8, 8));
    }

    #[test]
    fn mr_and_ct_share_the_shift() {
        let (h, w) = (20, 20);
        let mut mr = vec![0.0; 3 * h * w];
        let mut ct = vec![CT_FILL; h * w];
        let at = 10 * w + 10;
        for c in 0..3 {
            mr[c * h * w + at] = 1.0;
        }
        ct[at] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (m, c, (dx, dy)) = augment_shift(&mr, &ct, h, w, &mut rng, 8);
            let moved = ((10 + dy) as usize) * w + (10 + dx) as usize;
            assert_eq!(c[moved], 1.0);
            for ch in 0..3 {
                assert_eq!(m[ch * h * w + moved], 1.0);
            }
            assert_eq!(c.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn nine_subject_plan() {
        for seed in 0..20 {
            let plan = make_folds(9, 3, seed).unwrap();
            let mut tests: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
            tests.sort();
            assert_eq!(tests, (0..9).collect::<Vec<_>>());
            for f in &plan.folds {
                assert_eq!((f.train.len(), f.val.len(), f.test.len()), (4, 2, 3));
            }
        }
        assert_eq!(make_folds(9, 3, 5).unwrap(), make_folds(9, 3, 5).unwrap());
        assert_ne!(make_folds(9, 3, 5).unwrap(), make_folds(9, 3, 6).unwrap());
    }

    #[test]
    fn other_set_sizes() {
        let plan = make_folds(12, 3, 1).unwrap();
        assert!(plan.folds.iter().all(|f| (f.train.len(), f.val.len(), f.test.len()) == (5, 3, 4)));
        make_folds(10, 3, 1).unwrap();
        make_folds(3, 3, 0).unwrap();
        assert!(make_folds(3, 2, 0).is_err());
        assert!(make_folds(2, 3, 0).is_err());
        assert!(make_folds(9, 1, 0).is_err());
    }
}
