//! Volume file I/O.
//!
//! Two formats are supported:
//!
//! - NIfTI-1 single files (`.nii`, `.nii.gz`), read from the sform, the qform
//!   or pixdim (in that order of preference). Images are written as float32,
//!   labels as uint8 (int16 when an id exceeds 255) with the vocabulary in a
//!   `<stem>.vocab.json` sidecar.
//! - Raw test format: `<stem>.raw` holding little-endian float32 voxels
//!   (x fastest) and a `<stem>.json` sidecar with
//!   `{shape, spacing, origin, direction, dtype, vocabulary}`.
//!
//! Every loader returns data reordered into canonical RAS axis order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::geometry::is_orthonormal;
use super::nifti::{self, DT_FLOAT32, DT_INT16, DT_UINT8};
use super::{Geometry, LabelVolume, Volume3D};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Image(Volume3D),
    Labels(LabelVolume),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    Float32,
    Label,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
    pub dtype: RawDtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<BTreeMap<u16, String>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".raw") || name.ends_with(".json") {
        Ok(Format::Raw)
    } else {
        Err(Error::format(path, "unknown volume file extension"))
    }
}

/// `dir/labels.nii.gz` + `ext` -> `dir/labels.<ext>`.
pub fn sidecar_path(path: &Path, ext: &str) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let stem = [".nii.gz", ".nii", ".raw", ".json"]
        .iter()
        .find_map(|s| name.strip_suffix(s))
        .unwrap_or(name);
    path.with_file_name(format!("{stem}.{ext}"))
}

pub fn load_volume(path: &Path) -> Result<LoadedVolume> {
    match format_of(path)? {
        Format::Nifti => {
            let raw = nifti::read(path)?;
            let vocab_path = sidecar_path(path, "vocab.json");
            let integer = matches!(raw.datatype, DT_UINT8 | DT_INT16 | nifti::DT_INT32);
            let vocabulary = if integer && vocab_path.exists() {
                Some(read_json::<BTreeMap<u16, String>>(&vocab_path)?)
            } else {
                None
            };
            let geometry = geometry_from_affine(path, raw.shape, &raw.linear, raw.offset, 1e-4)?;
            build(path, geometry, raw.values, vocabulary)
        }
        Format::Raw => {
            let meta: RawSidecar = read_json(&sidecar_path(path, "json"))?;
            let raw_path = sidecar_path(path, "raw");
            let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
            let n = meta.shape.iter().product::<usize>();
            if bytes.len() != n * 4 {
                return Err(Error::format(
                    &raw_path,
                    format!("expected {} bytes, found {}", n * 4, bytes.len()),
                ));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| LittleEndian::read_f32(c) as f64)
                .collect();
            let linear = std::array::from_fn(|r| {
                std::array::from_fn(|c| meta.direction[r][c] * meta.spacing[c])
            });
            if meta.spacing.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidSpacing(meta.spacing));
            }
            let geometry = geometry_from_affine(path, meta.shape, &linear, meta.origin, 1e-6)?;
            let vocabulary = match meta.dtype {
                RawDtype::Label => Some(meta.vocabulary.unwrap_or_default()),
                RawDtype::Float32 => None,
            };
            build(path, geometry, values, vocabulary)
        }
    }
}

pub fn load_image(path: &Path) -> Result<Volume3D> {
    match load_volume(path)? {
        LoadedVolume::Image(v) => Ok(v),
        LoadedVolume::Labels(l) => Ok(Volume3D {
            data: l.data.iter().map(|&v| v as f32).collect(),
            geometry: l.geometry,
        }),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    match load_volume(path)? {
        LoadedVolume::Labels(l) => Ok(l),
        LoadedVolume::Image(v) => {
            let mut vocab = BTreeMap::new();
            let mut data = Vec::with_capacity(v.data.len());
            for &x in &v.data {
                if x < 0.0 || x.fract() != 0.0 || x > u16::MAX as f32 {
                    return Err(Error::format(path, format!("non-label voxel value {x}")));
                }
                let id = x as u16;
                if id != 0 {
                    vocab.entry(id).or_insert_with(|| format!("label_{id}"));
                }
                data.push(id);
            }
            LabelVolume::new(v.geometry, data, vocab)
        }
    }
}

pub fn save_image(path: &Path, v: &Volume3D) -> Result<()> {
    let g = &v.geometry;
    match format_of(path)? {
        Format::Nifti => {
            let values: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
            nifti::write(path, g.shape, g.spacing, &g.direction, g.origin, DT_FLOAT32, &values)
        }
        Format::Raw => write_raw(path, g, &v.data, RawDtype::Float32, None),
    }
}

pub fn save_labels(path: &Path, l: &LabelVolume) -> Result<()> {
    let g = &l.geometry;
    match format_of(path)? {
        Format::Nifti => {
            let max = l.data.iter().copied().max().unwrap_or(0);
            let dt = if max <= u8::MAX as u16 {
                DT_UINT8
            } else if max <= i16::MAX as u16 {
                DT_INT16
            } else {
                return Err(Error::UnsupportedDatatype(format!("label id {max} too large")));
            };
            let values: Vec<f64> = l.data.iter().map(|&x| x as f64).collect();
            nifti::write(path, g.shape, g.spacing, &g.direction, g.origin, dt, &values)?;
            write_json(&sidecar_path(path, "vocab.json"), &l.vocabulary)
        }
        Format::Raw => {
            let data: Vec<f32> = l.data.iter().map(|&x| x as f32).collect();
            write_raw(path, g, &data, RawDtype::Label, Some(l.vocabulary.clone()))
        }
    }
}

fn write_raw(
    path: &Path,
    g: &Geometry,
    data: &[f32],
    dtype: RawDtype,
    vocabulary: Option<BTreeMap<u16, String>>,
) -> Result<()> {
    let meta = RawSidecar {
        shape: g.shape,
        spacing: g.spacing,
        origin: g.origin,
        direction: g.direction,
        dtype,
        vocabulary,
    };
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    let raw_path = sidecar_path(path, "raw");
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    write_json(&sidecar_path(path, "json"), &meta)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn build(
    path: &Path,
    file_geometry: Geometry,
    values: Vec<f64>,
    vocabulary: Option<BTreeMap<u16, String>>,
) -> Result<LoadedVolume> {
    let (geometry, values) = canonicalize(&file_geometry, values);
    match vocabulary {
        None => {
            let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
            Ok(LoadedVolume::Image(Volume3D::new(geometry, data)?))
        }
        Some(vocab) => {
            let mut data = Vec::with_capacity(values.len());
            for v in values {
                if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
                    return Err(Error::format(path, format!("non-label voxel value {v}")));
                }
                data.push(v as u16);
            }
            Ok(LoadedVolume::Labels(LabelVolume::new(geometry, data, vocab)?))
        }
    }
}

fn geometry_from_affine(
    path: &Path,
    shape: [usize; 3],
    linear: &[[f64; 3]; 3],
    offset: [f64; 3],
    tol: f64,
) -> Result<Geometry> {
    let spacing: [f64; 3] =
        std::array::from_fn(|c| (0..3).map(|r| linear[r][c] * linear[r][c]).sum::<f64>().sqrt());
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(spacing));
    }
    let direction: [[f64; 3]; 3] =
        std::array::from_fn(|r| std::array::from_fn(|c| linear[r][c] / spacing[c]));
    if !is_orthonormal(&direction, tol) {
        return Err(Error::NonOrthonormalDirection);
    }
    let direction = orthonormalize(&direction);
    let g = Geometry {
        shape,
        spacing,
        origin: offset,
        direction,
    };
    g.validate().map_err(|e| match e {
        Error::InvalidSpacing(_) | Error::NonOrthonormalDirection => e,
        other => Error::format(path, other.to_string()),
    })?;
    Ok(g)
}

/// Nearest orthonormal matrix (polar factor); absorbs float32 header noise.
fn orthonormalize(d: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|r, c| d[r][c]);
    let svd = m.svd(true, true);
    let q = svd.u.unwrap() * svd.v_t.unwrap();
    std::array::from_fn(|r| std::array::from_fn(|c| q[(r, c)]))
}

/// Permutes and flips voxel axes so axis `r` runs along world axis `r` with a
/// positive sign. Values are carried along unchanged.
pub fn canonicalize(g: &Geometry, values: Vec<f64>) -> (Geometry, Vec<f64>) {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let d = &g.direction;
    // perm[r] = file axis that lands on world axis r
    let perm = *PERMS
        .iter()
        .max_by(|a, b| {
            let score = |p: &[usize; 3]| (0..3).map(|r| d[r][p[r]].abs()).sum::<f64>();
            score(a).total_cmp(&score(b))
        })
        .unwrap();
    let flip: [bool; 3] = std::array::from_fn(|r| d[r][perm[r]] < 0.0);
    if perm == [0, 1, 2] && flip == [false; 3] {
        return (g.clone(), values);
    }
    let shape: [usize; 3] = std::array::from_fn(|r| g.shape[perm[r]]);
    let spacing: [f64; 3] = std::array::from_fn(|r| g.spacing[perm[r]]);
    let direction: [[f64; 3]; 3] = std::array::from_fn(|row| {
        std::array::from_fn(|r| {
            let s = if flip[r] { -1.0 } else { 1.0 };
            s * d[row][perm[r]]
        })
    });
    let mut start = [0f64; 3];
    for r in 0..3 {
        if flip[r] {
            start[perm[r]] = (g.shape[perm[r]] - 1) as f64;
        }
    }
    let origin = g.index_to_world(start);
    let out_geom = Geometry {
        shape,
        spacing,
        origin,
        direction,
    };
    let mut out = vec![0f64; values.len()];
    for (o, v) in out.iter_mut().enumerate() {
        let i = out_geom.unravel(o);
        let mut src = [0usize; 3];
        for r in 0..3 {
            src[perm[r]] = if flip[r] { shape[r] - 1 - i[r] } else { i[r] };
        }
        *v = values[g.offset(src[0], src[1], src[2])];
    }
    (out_geom, out)
}
