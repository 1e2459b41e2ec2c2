//! MetaImage-style storage: a plain-text `.mhd` header next to a raw
//! little-endian payload (`float32` volumes, `uint8` masks).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, Dataset, MaskVolume, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    UInt8,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "MET_FLOAT",
            ElementType::UInt8 => "MET_UCHAR",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::UInt8 => 1,
        }
    }
}

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    /// `(D, H, W)`
    pub dims: (usize, usize, usize),
    pub spacing: Spacing,
    pub element: ElementType,
    pub data_file: PathBuf,
}

fn header_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dims = None;
    let mut spacing = None;
    let mut element = None;
    let mut data_file = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| header_err(path, format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" if value != "3" => {
                return Err(header_err(path, format!("only 3-D images supported, NDims = {value}")))
            }
            "DimSize" => {
                let v = parse_list::<usize>(value)
                    .filter(|v| v.len() == 3)
                    .ok_or_else(|| header_err(path, format!("bad DimSize `{value}`")))?;
                // MetaImage lists x y z
                dims = Some((v[2], v[1], v[0]));
            }
            "ElementSpacing" | "ElementSize" => {
                let v = parse_list::<f64>(value)
                    .filter(|v| v.len() == 3)
                    .ok_or_else(|| header_err(path, format!("bad ElementSpacing `{value}`")))?;
                spacing = Some(Spacing {
                    z: v[2],
                    y: v[1],
                    x: v[0],
                });
            }
            "ElementType" => {
                element = Some(match value {
                    "MET_FLOAT" => ElementType::Float32,
                    "MET_UCHAR" => ElementType::UInt8,
                    other => return Err(header_err(path, format!("unsupported ElementType {other}"))),
                })
            }
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" if value.eq_ignore_ascii_case("true") => {
                return Err(header_err(path, "big-endian payloads are not supported"))
            }
            "ElementDataFile" => data_file = Some(PathBuf::from(value)),
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| header_err(path, "missing DimSize"))?;
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(header_err(path, "dimensions must be >= 1"));
    }
    let spacing = spacing.unwrap_or(Spacing::isotropic(1.0));
    if spacing.validate().is_err() {
        return Err(header_err(path, format!("non-positive spacing {spacing:?}")));
    }
    let data_file = data_file.ok_or_else(|| header_err(path, "missing ElementDataFile"))?;
    let data_file = if data_file.is_absolute() {
        data_file
    } else {
        path.parent().unwrap_or(Path::new(".")).join(data_file)
    };
    Ok(Header {
        dims,
        spacing,
        element: element.ok_or_else(|| header_err(path, "missing ElementType"))?,
        data_file,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

fn read_payload(path: &Path, header: &Header, expected: ElementType) -> Result<Vec<u8>> {
    if header.element != expected {
        return Err(header_err(
            path,
            format!("expected {}, found {}", expected.tag(), header.element.tag()),
        ));
    }
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let (d, h, w) = header.dims;
    let want = d * h * w * expected.size();
    if bytes.len() != want {
        return Err(header_err(
            path,
            format!(
                "header declares {} voxels ({want} bytes) but payload has {} bytes",
                d * h * w,
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

/// Load a `float32` volume from its `.mhd` header path.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let bytes = read_payload(path, &header, ElementType::Float32)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec(header.dims, data)
        .map_err(|e| header_err(path, e.to_string()))?;
    Volume::new(voxels, header.spacing)
}

/// Load a `uint8` mask from its `.mhd` header path.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(MaskVolume, Spacing)> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let bytes = read_payload(path, &header, ElementType::UInt8)?;
    let labels = Array3::from_shape_vec(header.dims, bytes)
        .map_err(|e| header_err(path, e.to_string()))?;
    Ok((MaskVolume::new(labels)?, header.spacing))
}

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn write_header(path: &Path, dims: (usize, usize, usize), spacing: &Spacing, el: ElementType) -> Result<()> {
    let raw = raw_path(path);
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad output path {}", path.display())))?;
    let mut s = String::new();
    let _ = writeln!(s, "ObjectType = Image");
    let _ = writeln!(s, "NDims = 3");
    let _ = writeln!(s, "DimSize = {} {} {}", dims.2, dims.1, dims.0);
    let _ = writeln!(s, "ElementSpacing = {} {} {}", spacing.x, spacing.y, spacing.z);
    let _ = writeln!(s, "ElementType = {}", el.tag());
    let _ = writeln!(s, "ElementByteOrderMSB = False");
    let _ = writeln!(s, "ElementDataFile = {raw_name}");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Write `<path>` (header) and `<path>.raw` (payload).
pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    write_header(path, v.dims(), &v.spacing, ElementType::Float32)?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in v.voxels.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(raw, e))
}

pub fn save_mask(path: impl AsRef<Path>, m: &MaskVolume, spacing: &Spacing) -> Result<()> {
    let path = path.as_ref();
    write_header(path, m.dims(), spacing, ElementType::UInt8)?;
    let bytes: Vec<u8> = m.labels.iter().copied().collect();
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(raw, e))
}

const MANIFEST: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    domain_tag: String,
    cases: Vec<String>,
}

/// Write every case as `<id>.mhd` + `<id>_mask.mhd` plus a `dataset.json` manifest.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for case in &ds.items {
        save_volume(dir.join(format!("{}.mhd", case.id)), &case.volume)?;
        save_mask(dir.join(format!("{}_mask.mhd", case.id)), &case.mask, &case.volume.spacing)?;
    }
    let manifest = Manifest {
        domain_tag: ds.domain_tag.clone(),
        cases: ds.items.iter().map(|c| c.id.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let p = dir.join(MANIFEST);
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}

/// Load a dataset directory. Without a manifest, every `*.mhd` that has a
/// sibling `*_mask.mhd` is a case and the directory name is the domain tag.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let (tag, ids) = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("{}: {e}", manifest_path.display())))?;
        (m.domain_tag, m.cases)
    } else {
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else { continue };
            if p.extension().is_some_and(|e| e == "mhd")
                && !stem.ends_with("_mask")
                && dir.join(format!("{stem}_mask.mhd")).exists()
            {
                ids.push(stem.to_string());
            }
        }
        ids.sort();
        let tag = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("unknown")
            .to_string();
        (tag, ids)
    };
    if ids.is_empty() {
        return Err(Error::Invalid(format!("no cases found in {}", dir.display())));
    }
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let volume = load_volume(dir.join(format!("{id}.mhd")))?;
        let (mask, _) = load_mask(dir.join(format!("{id}_mask.mhd")))?;
        items.push(Case::new(id, volume, mask)?);
    }
    Ok(Dataset::new(items, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_volume() -> Volume {
        let data: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        Volume::new(Array3::from_shape_vec((2, 2, 2), data).unwrap(), Spacing::isotropic(1.0)).unwrap()
    }

    #[test]
    fn header_and_payload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        save_volume(&p, &tiny_volume()).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), (2, 2, 2));
        assert_eq!(v, tiny_volume());
        let original = fs::read(dir.path().join("v.raw")).unwrap();
        let q = dir.path().join("w.mhd");
        save_volume(&q, &v).unwrap();
        assert_eq!(fs::read(dir.path().join("w.raw")).unwrap(), original);
    }

    #[test]
    fn short_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        save_volume(&p, &tiny_volume()).unwrap();
        let raw = dir.path().join("v.raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes.truncate(7 * 4);
        fs::write(&raw, bytes).unwrap();
        let err = load_volume(&p).unwrap_err().to_string();
        assert!(err.contains("8 voxels"), "{err}");
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        save_volume(&p, &tiny_volume()).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("ElementSpacing = 1 1 1", "ElementSpacing = 1 0 1");
        fs::write(&p, text).unwrap();
        assert!(load_volume(&p).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_volume("/nonexistent/x.mhd"), Err(Error::Io { .. })));
    }

    #[test]
    fn header_is_metaimage_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mhd");
        let m = MaskVolume::new(Array3::from_elem((3, 4, 5), 1u8)).unwrap();
        save_mask(&p, &m, &Spacing::new(2.0, 0.5, 0.25).unwrap()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("DimSize = 5 4 3"));
        assert!(text.contains("ElementSpacing = 0.25 0.5 2"));
        assert!(text.contains("ElementType = MET_UCHAR"));
        assert_eq!(fs::read(dir.path().join("m.raw")).unwrap().len(), 60);
        let (back, sp) = load_mask(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(sp.z, 2.0);
    }
}
