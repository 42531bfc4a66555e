use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_phantom, PhantomGeometry, PhantomSpec, TissueModel};
use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, Volume3D};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Paired volumes of one subject on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub mr: [Volume3D; 3],
    pub ct: Volume3D,
}

/// One subject's files, relative to the set directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub mr: [String; 3],
    pub ct: String,
    pub labels: String,
    pub geometry: PhantomGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub tissues: TissueModel,
    pub subjects: Vec<SubjectEntry>,
}

pub fn subject_id(index: usize) -> String {
    format!("phantom_{index:02}")
}

/// Generates `count` subjects into `dir` and writes `manifest.json`.
pub fn write_phantom_set(dir: &Path, spec: &PhantomSpec, tissues: &TissueModel, count: usize) -> Result<PhantomManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(count);
    for i in 0..count {
        let s = spec.for_subject(i);
        let p = generate_phantom(&s, tissues)?;
        let id = subject_id(i);
        let name = |suffix: &str| format!("{id}_{suffix}.hdr");
        let entry = SubjectEntry {
            id: id.clone(),
            seed: s.seed,
            mr: [name("mr1"), name("mr2"), name("mr3")],
            ct: name("ct"),
            labels: name("labels"),
            geometry: p.geometry.clone(),
        };
        for (vol, file) in p.mr.iter().zip(&entry.mr) {
            save_volume(vol, dir.join(file))?;
        }
        save_volume(&p.ct, dir.join(&entry.ct))?;
        save_volume(&p.label_volume(), dir.join(&entry.labels))?;
        subjects.push(entry);
    }
    let manifest = PhantomManifest {
        spec: *spec,
        tissues: *tissues,
        subjects,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

/// Reads every subject listed in `dir/manifest.json`.
pub fn load_phantom_set(dir: &Path) -> Result<(PhantomManifest, Vec<SubjectData>)> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PhantomManifest = serde_json::from_str(&text)?;
    let mut data = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let mr = [0, 1, 2].map(|e| load_volume(dir.join(&s.mr[e])));
        let [a, b, c] = mr;
        data.push(SubjectData {
            id: s.id.clone(),
            mr: [a?, b?, c?],
            ct: load_volume(dir.join(&s.ct))?,
        });
    }
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            seed: 4,
            ..PhantomSpec::default()
        };
        let m = write_phantom_set(dir.path(), &spec, &TissueModel::default(), 2).unwrap();
        assert_eq!(m.subjects.len(), 2);
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("phantom_01_ct.raw").exists());
        let (back, data) = load_phantom_set(dir.path()).unwrap();
        assert_eq!(back, m);
        let p = generate_phantom(&spec.for_subject(1), &TissueModel::default()).unwrap();
        assert_eq!(data[1].ct, p.ct);
        assert_eq!(data[1].mr, p.mr);
    }
}
