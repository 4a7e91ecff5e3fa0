//! Geometric 3D volumes.
//!
//! Voxel data is stored x-fastest (`index = x + nx * (y + ny * z)`), the same
//! order NIfTI uses on disk. After loading, every volume is in canonical RAS
//! orientation: voxel axis `i` points along world axis `i` with positive sign,
//! and `direction` only carries a residual rotation for oblique acquisitions.

mod geometry;
pub mod io;
mod nifti;
mod resample;
mod slices;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use geometry::Geometry;
pub use resample::{resample, resample_mapped, resample_onto};
pub use slices::{extract_slice, extract_slices, stack_slices, Orientation, Slice2D, SliceGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Label,
}

/// Common surface of intensity and label volumes.
pub trait Volume: Sized + Sync {
    type Voxel: Copy + Default + Send + Sync + PartialEq;
    const KIND: VolumeKind;

    fn geometry(&self) -> &Geometry;
    fn data(&self) -> &[Self::Voxel];
    /// Builds a volume of the same kind (and vocabulary) on a new grid.
    fn rebuild(&self, geometry: Geometry, data: Vec<Self::Voxel>) -> Self;
    /// Samples at a continuous voxel index. Outside the field of view the
    /// result is the zero voxel.
    fn sample(&self, idx: [f64; 3], mode: Interpolation) -> Self::Voxel;
    fn to_f32(v: Self::Voxel) -> f32;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub geometry: Geometry,
    pub data: Vec<u16>,
    pub vocabulary: BTreeMap<u16, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainMask {
    pub geometry: Geometry,
    pub data: Vec<bool>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite voxel value".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![0.0; n],
        }
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![value; n],
        }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> f32) -> Self {
        let data = geometry.indices().map(f).collect();
        Self { geometry, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.offset(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

impl LabelVolume {
    pub fn new(
        geometry: Geometry,
        data: Vec<u16>,
        vocabulary: BTreeMap<u16, String>,
    ) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if let Some(&bad) = data
            .iter()
            .find(|&&v| v != 0 && !vocabulary.contains_key(&v))
        {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self {
            geometry,
            data,
            vocabulary,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geometry.offset(x, y, z)]
    }

    /// Indicator mask of one structure.
    pub fn binary(&self, label: u16) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Labels present in the data, background excluded.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        for &v in &self.data {
            if v != 0 {
                seen.insert(v);
            }
        }
        seen.into_iter().collect()
    }
}

impl BrainMask {
    pub fn from_nonzero(v: &Volume3D) -> Self {
        Self {
            geometry: v.geometry.clone(),
            data: v.data.iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn from_labels(l: &LabelVolume) -> Self {
        Self {
            geometry: l.geometry.clone(),
            data: l.data.iter().map(|&x| x != 0).collect(),
        }
    }

    pub fn full(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![true; n],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Zeroes every voxel outside the mask.
pub fn apply_mask(v: &Volume3D, m: &BrainMask) -> Result<Volume3D> {
    if v.geometry.shape != m.geometry.shape {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs mask {:?}",
            v.geometry.shape, m.geometry.shape
        )));
    }
    let data = v
        .data
        .iter()
        .zip(&m.data)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    Ok(Volume3D {
        geometry: v.geometry.clone(),
        data,
    })
}

/// Scales intensities so the 99th percentile of the nonzero voxels maps to 1.
pub fn normalize_intensity(v: &Volume3D) -> Volume3D {
    let mut nz: Vec<f32> = v.data.iter().copied().filter(|&x| x != 0.0).collect();
    if nz.is_empty() {
        return v.clone();
    }
    let k = ((nz.len() - 1) as f64 * 0.99).round() as usize;
    let (_, p99, _) = nz.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    let scale = if p99.abs() > f32::EPSILON { 1.0 / *p99 } else { 1.0 };
    Volume3D {
        geometry: v.geometry.clone(),
        data: v.data.iter().map(|&x| x * scale).collect(),
    }
}

#[inline]
fn in_fov(idx: [f64; 3], shape: [usize; 3]) -> bool {
    (0..3).all(|a| idx[a] >= -0.5 && idx[a] <= shape[a] as f64 - 0.5)
}

/// Trilinear interpolation with clamp-to-edge inside the half-voxel rim.
#[inline]
pub(crate) fn trilinear(data: &[f32], shape: [usize; 3], idx: [f64; 3]) -> f64 {
    if !in_fov(idx, shape) {
        return 0.0;
    }
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let hi = (shape[a] - 1) as f64;
        let p = idx[a].clamp(0.0, hi);
        let f = p.floor();
        let mut i = f as usize;
        let mut t = p - f;
        if i + 1 > shape[a] - 1 {
            // at the upper edge, or a one-voxel axis
            i = shape[a] - 1;
            t = 0.0;
        }
        base[a] = i;
        frac[a] = t;
    }
    let (nx, ny) = (shape[0], shape[1]);
    let step = [
        if frac[0] > 0.0 { 1 } else { 0 },
        if frac[1] > 0.0 { nx } else { 0 },
        if frac[2] > 0.0 { nx * ny } else { 0 },
    ];
    let o = base[0] + nx * (base[1] + ny * base[2]);
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let v = |off: usize| data[off] as f64;
    let c00 = v(o) * (1.0 - fx) + v(o + step[0]) * fx;
    let c10 = v(o + step[1]) * (1.0 - fx) + v(o + step[1] + step[0]) * fx;
    let c01 = v(o + step[2]) * (1.0 - fx) + v(o + step[2] + step[0]) * fx;
    let c11 = v(o + step[2] + step[1]) * (1.0 - fx) + v(o + step[2] + step[1] + step[0]) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Trilinear value and its gradient with respect to the continuous index.
/// The gradient is zero along axes where the sample is clamped.
#[inline]
pub(crate) fn trilinear_grad(data: &[f32], shape: [usize; 3], idx: [f64; 3]) -> (f64, [f64; 3]) {
    if !in_fov(idx, shape) {
        return (0.0, [0.0; 3]);
    }
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    let mut live = [true; 3];
    for a in 0..3 {
        let hi = (shape[a] - 1) as f64;
        if idx[a] <= 0.0 || idx[a] >= hi {
            live[a] = false;
        }
        let p = idx[a].clamp(0.0, hi);
        let mut i = p.floor() as usize;
        let mut t = p - p.floor();
        if i + 1 > shape[a] - 1 {
            i = shape[a] - 1;
            t = 0.0;
            live[a] = false;
        }
        base[a] = i;
        frac[a] = t;
    }
    let (nx, ny) = (shape[0], shape[1]);
    let step = [
        if live[0] { 1 } else { 0 },
        if live[1] { nx } else { 0 },
        if live[2] { nx * ny } else { 0 },
    ];
    let o = base[0] + nx * (base[1] + ny * base[2]);
    let v = |off: usize| data[off] as f64;
    let c000 = v(o);
    let c100 = v(o + step[0]);
    let c010 = v(o + step[1]);
    let c110 = v(o + step[1] + step[0]);
    let c001 = v(o + step[2]);
    let c101 = v(o + step[2] + step[0]);
    let c011 = v(o + step[2] + step[1]);
    let c111 = v(o + step[2] + step[1] + step[0]);
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    let value = c0 + (c1 - c0) * fz;
    let mut g = [0.0; 3];
    if live[0] {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let d0 = d00 + (d10 - d00) * fy;
        let d1 = d01 + (d11 - d01) * fy;
        g[0] = d0 + (d1 - d0) * fz;
    }
    if live[1] {
        g[1] = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz;
    }
    if live[2] {
        g[2] = c1 - c0;
    }
    (value, g)
}

#[inline]
pub(crate) fn nearest_offset(shape: [usize; 3], idx: [f64; 3]) -> Option<usize> {
    if !in_fov(idx, shape) {
        return None;
    }
    let mut o = [0usize; 3];
    for a in 0..3 {
        // round half away from zero, clamped into the grid
        o[a] = (idx[a].round().max(0.0) as usize).min(shape[a] - 1);
    }
    Some(o[0] + shape[0] * (o[1] + shape[1] * o[2]))
}

impl Volume for Volume3D {
    type Voxel = f32;
    const KIND: VolumeKind = VolumeKind::Image;

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
    fn data(&self) -> &[f32] {
        &self.data
    }
    fn rebuild(&self, geometry: Geometry, data: Vec<f32>) -> Self {
        Volume3D { geometry, data }
    }
    fn sample(&self, idx: [f64; 3], mode: Interpolation) -> f32 {
        match mode {
            Interpolation::Linear => trilinear(&self.data, self.geometry.shape, idx) as f32,
            Interpolation::Nearest => nearest_offset(self.geometry.shape, idx)
                .map(|o| self.data[o])
                .unwrap_or(0.0),
        }
    }
    fn to_f32(v: f32) -> f32 {
        v
    }
}

impl Volume for LabelVolume {
    type Voxel = u16;
    const KIND: VolumeKind = VolumeKind::Label;

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
    fn data(&self) -> &[u16] {
        &self.data
    }
    fn rebuild(&self, geometry: Geometry, data: Vec<u16>) -> Self {
        LabelVolume {
            geometry,
            data,
            vocabulary: self.vocabulary.clone(),
        }
    }
    /// Labels are only ever sampled nearest-neighbour.
    fn sample(&self, idx: [f64; 3], _mode: Interpolation) -> u16 {
        nearest_offset(self.geometry.shape, idx)
            .map(|o| self.data[o])
            .unwrap_or(0)
    }
    fn to_f32(v: u16) -> f32 {
        v as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize) -> Geometry {
        Geometry::new([n, n, n], [1.0; 3])
    }

    #[test]
    fn mask_all_ones_is_identity_and_zeros_clears() {
        let g = geom(4);
        let v = Volume3D::from_fn(g.clone(), |[x, y, z]| (x + 2 * y + 3 * z) as f32);
        let ones = BrainMask::full(g.clone());
        assert_eq!(apply_mask(&v, &ones).unwrap(), v);
        let zeros = BrainMask {
            geometry: g.clone(),
            data: vec![false; g.len()],
        };
        assert!(apply_mask(&v, &zeros).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_mask_matches_pointwise_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = geom(6);
        let v = Volume3D::from_fn(g.clone(), |_| 0.0);
        let v = Volume3D {
            data: v.data.iter().map(|_| rng.random::<f32>()).collect(),
            ..v
        };
        let m = BrainMask {
            geometry: g.clone(),
            data: (0..g.len()).map(|_| rng.random::<bool>()).collect(),
        };
        let out = apply_mask(&v, &m).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let o = x + 6 * (y + 6 * z);
                    let expect = if m.data[o] { v.data[o] } else { 0.0 };
                    assert_eq!(out.at(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn mask_shape_mismatch_is_an_error() {
        let v = Volume3D::zeros(geom(4));
        let m = BrainMask::full(geom(5));
        assert!(matches!(apply_mask(&v, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn label_volume_rejects_unknown_ids() {
        let g = geom(2);
        let vocab = BTreeMap::from([(1, "a".to_string())]);
        let mut data = vec![0u16; 8];
        data[3] = 2;
        assert!(matches!(
            LabelVolume::new(g, data, vocab),
            Err(Error::UnknownLabel(2))
        ));
    }

    #[test]
    fn trilinear_gradient_matches_finite_differences() {
        let shape = [5, 6, 4];
        let data: Vec<f32> = (0..120).map(|i| ((i * 37) % 11) as f32 * 0.3).collect();
        let h = 1e-6;
        for idx in [[1.3, 2.7, 0.4], [0.2, 4.5, 2.9], [3.6, 0.8, 1.5]] {
            let (v, g) = trilinear_grad(&data, shape, idx);
            assert!((v - trilinear(&data, shape, idx)).abs() < 1e-12);
            for a in 0..3 {
                let mut p = idx;
                let mut m = idx;
                p[a] += h;
                m[a] -= h;
                let fd = (trilinear(&data, shape, p) - trilinear(&data, shape, m)) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-6, "{idx:?} axis {a}: {fd} vs {}", g[a]);
            }
        }
    }

    #[test]
    fn trilinear_hits_lattice_points_exactly() {
        let g = geom(5);
        let v = Volume3D::from_fn(g, |[x, y, z]| (x * x + 3 * y + 7 * z) as f32);
        for &(x, y, z) in &[(0, 0, 0), (4, 4, 4), (2, 1, 3)] {
            let s = v.sample([x as f64, y as f64, z as f64], Interpolation::Linear);
            assert_eq!(s, v.at(x, y, z));
        }
        assert_eq!(v.sample([5.2, 0.0, 0.0], Interpolation::Linear), 0.0);
    }
}
