//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) support.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::{Error, Result};

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// Raw file contents in file voxel order plus the voxel-to-world map.
#[derive(Debug, Clone)]
pub struct RawNifti {
    pub shape: [usize; 3],
    /// Voxel-to-world (RAS, mm) linear part; columns are voxel axes.
    pub linear: [[f64; 3]; 3],
    pub offset: [f64; 3],
    pub datatype: i16,
    pub values: Vec<f64>,
}

pub fn read(path: &Path) -> Result<RawNifti> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        bytes
    };
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(Error::format(path, "bad sizeof_hdr"))
    }
}

fn parse<B: ByteOrder>(path: &Path, b: &[u8]) -> Result<RawNifti> {
    let i16_at = |o: usize| B::read_i16(&b[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&b[o..o + 4]) as f64;
    if &b[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (n+1) is supported"));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("bad dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            let d = i16_at(42 + 2 * a);
            if d < 1 {
                return Err(Error::format(path, format!("bad dim[{}] = {d}", a + 1)));
            }
            shape[a] = d as usize;
        }
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(Error::format(path, "only 3D volumes are supported"));
        }
    }
    let datatype = i16_at(70);
    let pixdim: [f64; 8] = std::array::from_fn(|i| f32_at(76 + 4 * i));
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);

    let (linear, offset) = if sform_code > 0 {
        let row = |o: usize| [f32_at(o), f32_at(o + 4), f32_at(o + 8), f32_at(o + 12)];
        let rows = [row(280), row(296), row(312)];
        (
            std::array::from_fn(|r| std::array::from_fn(|c| rows[r][c])),
            [rows[0][3], rows[1][3], rows[2][3]],
        )
    } else if qform_code > 0 {
        let (qb, qc, qd) = (f32_at(256), f32_at(260), f32_at(264));
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let r = quaternion_to_matrix(qa, qb, qc, qd);
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
        (
            std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * scale[j])),
            [f32_at(268), f32_at(272), f32_at(276)],
        )
    } else {
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            m[a][a] = pixdim[a + 1];
        }
        (m, [0.0; 3])
    };

    let n = shape[0] * shape[1] * shape[2];
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(format!("NIfTI datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    if b.len() < start + n * width {
        return Err(Error::format(path, "truncated voxel data"));
    }
    let mut cur = Cursor::new(&b[start..start + n * width]);
    let mut values = Vec::with_capacity(n);
    let short = |e: std::io::Error| Error::io(path, e);
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => cur.read_u8().map_err(short)? as f64,
            DT_INT16 => cur.read_i16::<B>().map_err(short)? as f64,
            DT_INT32 => cur.read_i32::<B>().map_err(short)? as f64,
            DT_FLOAT32 => cur.read_f32::<B>().map_err(short)? as f64,
            _ => cur.read_f64::<B>().map_err(short)?,
        };
        values.push(v);
    }
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(RawNifti {
        shape,
        linear,
        offset,
        datatype,
        values,
    })
}

pub fn quaternion_to_matrix(a: f64, b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ]
}

/// Quaternion (b, c, d) of a proper rotation matrix, with a >= 0.
fn matrix_to_quaternion(r: &[[f64; 3]; 3]) -> (f64, f64, f64) {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d) = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        (
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        )
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        (
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        )
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        (
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        )
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        (
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        )
    };
    if a < 0.0 {
        (-b, -c, -d)
    } else {
        (b, c, d)
    }
}

/// Writes a single-file NIfTI-1, gzip-compressed when the name ends in `.gz`.
pub fn write(
    path: &Path,
    shape: [usize; 3],
    spacing: [f64; 3],
    direction: &[[f64; 3]; 3],
    origin: [f64; 3],
    datatype: i16,
    values: &[f64],
) -> Result<()> {
    let mut h = vec![0u8; VOX_OFFSET];
    {
        let mut w = Cursor::new(&mut h[..]);
        let put = |w: &mut Cursor<&mut [u8]>, at: u64| w.set_position(at);
        w.write_i32::<LittleEndian>(HEADER_SIZE as i32).unwrap();
        put(&mut w, 38);
        w.write_u8(b'r').unwrap(); // regular
        put(&mut w, 40);
        w.write_i16::<LittleEndian>(3).unwrap();
        for &d in &shape {
            w.write_i16::<LittleEndian>(d as i16).unwrap();
        }
        for _ in 0..4 {
            w.write_i16::<LittleEndian>(1).unwrap();
        }
        put(&mut w, 70);
        let bitpix: i16 = match datatype {
            DT_UINT8 => 8,
            DT_INT16 => 16,
            DT_INT32 | DT_FLOAT32 => 32,
            _ => 64,
        };
        w.write_i16::<LittleEndian>(datatype).unwrap();
        w.write_i16::<LittleEndian>(bitpix).unwrap();

        // rotation part, with qfac absorbing a reflection
        let det = det3(direction);
        let qfac = if det < 0.0 { -1.0 } else { 1.0 };
        let mut rot = *direction;
        if qfac < 0.0 {
            for row in rot.iter_mut() {
                row[2] = -row[2];
            }
        }
        put(&mut w, 76);
        let pixdim = [qfac, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
        for p in pixdim {
            w.write_f32::<LittleEndian>(p as f32).unwrap();
        }
        w.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap();
        w.write_f32::<LittleEndian>(1.0).unwrap(); // scl_slope
        w.write_f32::<LittleEndian>(0.0).unwrap(); // scl_inter
        put(&mut w, 123);
        w.write_u8(2).unwrap(); // mm
        put(&mut w, 252);
        w.write_i16::<LittleEndian>(1).unwrap(); // qform: scanner
        w.write_i16::<LittleEndian>(1).unwrap(); // sform: scanner
        let (qb, qc, qd) = matrix_to_quaternion(&rot);
        for q in [qb, qc, qd, origin[0], origin[1], origin[2]] {
            w.write_f32::<LittleEndian>(q as f32).unwrap();
        }
        for r in 0..3 {
            for c in 0..3 {
                w.write_f32::<LittleEndian>((direction[r][c] * spacing[c]) as f32)
                    .unwrap();
            }
            w.write_f32::<LittleEndian>(origin[r] as f32).unwrap();
        }
        put(&mut w, 344);
        w.write_all(b"n+1\0").unwrap();
    }
    let mut body = h;
    body.reserve(values.len() * 4);
    for &v in values {
        match datatype {
            DT_UINT8 => body.push(v as u8),
            DT_INT16 => body.write_i16::<LittleEndian>(v as i16).unwrap(),
            DT_INT32 => body.write_i32::<LittleEndian>(v as i32).unwrap(),
            DT_FLOAT32 => body.write_f32::<LittleEndian>(v as f32).unwrap(),
            DT_FLOAT64 => body.write_f64::<LittleEndian>(v).unwrap(),
            other => return Err(Error::UnsupportedDatatype(format!("NIfTI datatype {other}"))),
        }
    }
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        body
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
