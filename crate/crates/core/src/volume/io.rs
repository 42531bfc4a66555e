//! Detached-header volume files.
//!
//! `<name>.hdr` holds UTF-8 `key: value` lines (`dims`, `spacing`, `origin`,
//! `unit`, `encoding`), `<name>.raw` the little-endian float32 body in
//! x-fastest order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Grid, Unit, Volume3D};
use crate::error::{Error, Result};

const ENCODING: &str = "float32-le";

/// Header and body paths for a volume. Accepts the `.hdr` path, the `.raw`
/// path or the bare stem.
pub fn volume_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut hdr = stem.clone().into_os_string();
    hdr.push(".hdr");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (hdr.into(), raw.into())
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let (hdr_path, raw_path) = volume_paths(path);
    let g = vol.grid();
    let header = format!(
        "dims: {} {} {}\nspacing: {} {} {}\norigin: {} {} {}\nunit: {}\nencoding: {}\n",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2],
        vol.unit().as_str(),
        ENCODING
    );
    let mut body = Vec::with_capacity(vol.values().len() * 4);
    for v in vol.values() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&hdr_path, header).map_err(|e| Error::io(&hdr_path, e))?;
    fs::write(&raw_path, body).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Reads a volume. HU volumes are clamped to the 12-bit CT range.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (hdr_path, raw_path) = volume_paths(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = Header::parse(&text, &hdr_path)?;

    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.grid.len();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::ValueCount {
            path: raw_path,
            expected,
            found: bytes.len() / 4,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut vol = Volume3D::new(header.grid, header.unit, values)?;
    if header.unit == Unit::Hu {
        vol.clamp_hu();
    }
    Ok(vol)
}

struct Header {
    grid: Grid,
    unit: Unit,
}

impl Header {
    fn parse(text: &str, path: &Path) -> Result<Header> {
        let bad = |field: &'static str, reason: String| Error::Header {
            path: path.to_path_buf(),
            field,
            reason,
        };

        let mut dims = None;
        let mut spacing = None;
        let mut origin = None;
        let mut unit = None;
        let mut encoding = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                return Err(bad("line", format!("expected `key: value`, got {line:?}")));
            };
            let value = value.trim();
            match key.trim() {
                "dims" => dims = Some(parse_triple::<usize>(value).map_err(|r| bad("dims", r))?),
                "spacing" => {
                    spacing = Some(parse_triple::<f64>(value).map_err(|r| bad("spacing", r))?)
                }
                "origin" => origin = Some(parse_triple::<f64>(value).map_err(|r| bad("origin", r))?),
                "unit" => {
                    unit = Some(
                        Unit::parse(value)
                            .ok_or_else(|| bad("unit", format!("unknown unit {value:?}")))?,
                    )
                }
                "encoding" => encoding = Some(value.to_string()),
                other => return Err(bad("line", format!("unknown key {other:?}"))),
            }
        }

        let dims = dims.ok_or_else(|| bad("dims", "missing".into()))?;
        let spacing = spacing.ok_or_else(|| bad("spacing", "missing".into()))?;
        let origin = origin.ok_or_else(|| bad("origin", "missing".into()))?;
        let unit = unit.ok_or_else(|| bad("unit", "missing".into()))?;
        match encoding.as_deref() {
            Some(ENCODING) => {}
            Some(other) => return Err(bad("encoding", format!("unsupported {other:?}"))),
            None => return Err(bad("encoding", "missing".into())),
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(bad("dims", format!("{dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(bad("spacing", format!("{spacing:?} must all be > 0")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(bad("origin", format!("{origin:?} is not finite")));
        }
        Ok(Header {
            grid: Grid {
                dims,
                spacing,
                origin,
            },
            unit,
        })
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(format!("expected 3 numbers, got {}", parts.len()));
    }
    let parse = |p: &str| p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"));
    Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?])
}
