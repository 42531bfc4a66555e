//! Generator checkpoint file: the line `SCTF1`, one line of JSON manifest
//! naming every tensor and its shape, then the little-endian `f32` payloads in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorArch};
use super::ops::Conv2d;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "SCTF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    arch: GeneratorArch,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Trained generator plus free-form metadata (epoch, validation loss, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: Generator<f32>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(generator: Generator<f32>, meta: serde_json::Value) -> Checkpoint {
        Checkpoint { generator, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layers = self.generator.layers();
        let mut tensors = Vec::with_capacity(layers.len() * 2);
        for (i, l) in layers.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("generator.{i:02}.weight"),
                shape: l.weight.shape().to_vec(),
            });
            tensors.push(TensorEntry {
                name: format!("generator.{i:02}.bias"),
                shape: vec![l.bias.len()],
            });
        }
        let manifest = Manifest {
            arch: *self.generator.arch(),
            meta: self.meta.clone(),
            tensors,
        };
        let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&manifest)?).into_bytes();
        for l in layers {
            for v in l.weight.data().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes
            .strip_prefix(format!("{MAGIC}\n").as_bytes())
            .ok_or_else(|| bad("missing SCTF1 magic"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl])?;
        let mut payload = &rest[nl + 1..];

        let mut take = |entry: &TensorEntry| -> Result<Vec<f32>> {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 4 {
                return Err(Error::Checkpoint(format!("payload truncated in {}", entry.name)));
            }
            let (head, tail) = payload.split_at(n * 4);
            payload = tail;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        if manifest.tensors.len() % 2 != 0 {
            return Err(bad("tensors must come in weight/bias pairs"));
        }
        let mut layers = Vec::with_capacity(manifest.tensors.len() / 2);
        for pair in manifest.tensors.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            let shape: [usize; 4] = w
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("{} is not 4-D", w.name)))?;
            let weight = Tensor::from_vec(shape, take(w)?)?;
            let bias = take(b)?;
            layers.push(Conv2d { weight, bias });
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let generator = Generator::from_layers(manifest.arch, layers)?;
        Ok(Checkpoint {
            generator,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let arch = GeneratorArch {
            base_channels: 4,
            scales: 2,
            ..GeneratorArch::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Checkpoint::new(Generator::new(arch, &mut rng).unwrap(), serde_json::json!({"epoch": 3}))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.sctf");
        let ck = small();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn layout_starts_with_magic_and_manifest() {
        let bytes = small().to_bytes().unwrap();
        assert!(bytes.starts_with(b"SCTF1\n{"));
        let line_end = bytes[6..].iter().position(|&b| b == b'\n').unwrap() + 6;
        let text = String::from_utf8_lossy(&bytes[..line_end]);
        assert!(text.contains("\"generator.00.weight\""));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = small().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"SCTF2\n{}\n").is_err());
        // manifest that names a different architecture
        let text = String::from_utf8_lossy(&bytes).replacen("\"scales\":2", "\"scales\":3", 1);
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}
