use serde::{Deserialize, Serialize};

use super::{Geometry, Interpolation, Volume, VolumeKind, Volume3D};
use crate::{par, Error, Result};

/// Canonical 2D slice grid shared by every stage of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    /// Pixels per side.
    pub size: usize,
    /// Isotropic pixel spacing in mm.
    pub spacing: f64,
}

impl Default for SliceGrid {
    fn default() -> Self {
        Self {
            size: 1024,
            spacing: 0.5,
        }
    }
}

impl SliceGrid {
    #[inline]
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    #[inline]
    fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Voxel axis normal to the slice plane.
    pub fn normal_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    /// Voxel axes mapped to slice columns and rows.
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self {
            Orientation::Axial => (0, 1),
            Orientation::Coronal => (0, 2),
            Orientation::Sagittal => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    /// Row-major, `size * size` pixels.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub pixel_spacing: f64,
    pub orientation: Orientation,
    pub index: usize,
    pub provenance: String,
}

impl Slice2D {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// Bilinear sample at a continuous (row, col); zero outside the grid.
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        let n = self.size;
        let hi = n as f64 - 0.5;
        if row < -0.5 || col < -0.5 || row > hi || col > hi {
            return 0.0;
        }
        let clamp = |p: f64| -> (usize, f64) {
            let p = p.clamp(0.0, (n - 1) as f64);
            let f = p.floor();
            let i = f as usize;
            if i + 1 >= n {
                (n - 1, 0.0)
            } else {
                (i, p - f)
            }
        };
        let (r0, tr) = clamp(row);
        let (c0, tc) = clamp(col);
        let r1 = if tr > 0.0 { r0 + 1 } else { r0 };
        let c1 = if tc > 0.0 { c0 + 1 } else { c0 };
        let v = |r: usize, c: usize| self.pixels[r * n + c] as f64;
        let top = v(r0, c0) * (1.0 - tc) + v(r0, c1) * tc;
        let bot = v(r1, c0) * (1.0 - tc) + v(r1, c1) * tc;
        top * (1.0 - tr) + bot * tr
    }
}

/// Extracts every slice along `orientation`, resampled and centred onto the
/// canonical grid with zero padding. Labels are sampled nearest-neighbour.
pub fn extract_slices<V: Volume>(
    v: &V,
    orientation: Orientation,
    grid: SliceGrid,
    source_id: &str,
) -> Result<Vec<Slice2D>> {
    check_grid(v, grid)?;
    let n = v.geometry().shape[orientation.normal_axis()];
    Ok(par::map_range(n, |k| slice_at(v, orientation, grid, k, source_id)))
}

/// Slice `index` along `orientation`, as [`extract_slices`] would produce it.
pub fn extract_slice<V: Volume>(
    v: &V,
    orientation: Orientation,
    grid: SliceGrid,
    index: usize,
    source_id: &str,
) -> Result<Slice2D> {
    check_grid(v, grid)?;
    let n = v.geometry().shape[orientation.normal_axis()];
    if index >= n {
        return Err(Error::InvalidArgument(format!("slice {index} outside extent {n}")));
    }
    Ok(slice_at(v, orientation, grid, index, source_id))
}

fn check_grid<V: Volume>(v: &V, grid: SliceGrid) -> Result<()> {
    v.geometry().validate()?;
    if grid.size == 0 || !(grid.spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("bad slice grid {grid:?}")));
    }
    Ok(())
}

fn slice_at<V: Volume>(v: &V, orientation: Orientation, grid: SliceGrid, k: usize, source_id: &str) -> Slice2D {
    let g = v.geometry();
    let mode = match V::KIND {
        VolumeKind::Image => Interpolation::Linear,
        VolumeKind::Label => Interpolation::Nearest,
    };
    let normal = orientation.normal_axis();
    let (ab, ac) = orientation.in_plane_axes();
    let cb = (g.shape[ab] as f64 - 1.0) / 2.0;
    let cc = (g.shape[ac] as f64 - 1.0) / 2.0;
    let sb = grid.spacing / g.spacing[ab];
    let sc = grid.spacing / g.spacing[ac];
    let gc = grid.center();
    let mut pixels = vec![0f32; grid.pixels()];
    for row in 0..grid.size {
        let ic = cc + (row as f64 - gc) * sc;
        for col in 0..grid.size {
            let ib = cb + (col as f64 - gc) * sb;
            let mut idx = [0f64; 3];
            idx[normal] = k as f64;
            idx[ab] = ib;
            idx[ac] = ic;
            pixels[row * grid.size + col] = V::to_f32(v.sample(idx, mode));
        }
    }
    Slice2D {
        pixels,
        size: grid.size,
        pixel_spacing: grid.spacing,
        orientation,
        index: k,
        provenance: source_id.to_string(),
    }
}

/// Reassembles slices onto `reference` by bilinear interpolation in-plane.
/// The result carries interpolated values; thresholding is up to the caller.
pub fn stack_slices(slices: &[Slice2D], reference: &Geometry) -> Result<Volume3D> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty slice list".into()))?;
    let orientation = first.orientation;
    if slices.iter().any(|s| s.orientation != orientation) {
        return Err(Error::MixedOrientations);
    }
    if slices
        .iter()
        .any(|s| s.size != first.size || s.pixel_spacing != first.pixel_spacing)
    {
        return Err(Error::InvalidArgument("slices use different grids".into()));
    }
    let normal = orientation.normal_axis();
    let n = reference.shape[normal];
    let mut by_index: Vec<Option<&Slice2D>> = vec![None; n];
    for s in slices {
        if s.index >= n {
            return Err(Error::InvalidArgument(format!(
                "slice index {} outside reference extent {n}",
                s.index
            )));
        }
        by_index[s.index] = Some(s);
    }
    let missing: Vec<usize> = (0..n).filter(|&i| by_index[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingSlices(missing));
    }

    let (ab, ac) = orientation.in_plane_axes();
    let g = reference;
    let cb = (g.shape[ab] as f64 - 1.0) / 2.0;
    let cc = (g.shape[ac] as f64 - 1.0) / 2.0;
    let gc = (first.size as f64 - 1.0) / 2.0;
    let fb = g.spacing[ab] / first.pixel_spacing;
    let fc = g.spacing[ac] / first.pixel_spacing;
    let nx = g.shape[0];
    let mut data = vec![0f32; g.len()];
    par::for_each_chunk_mut(&mut data, nx, |row, out| {
        let y = row % g.shape[1];
        let z = row / g.shape[1];
        for (x, o) in out.iter_mut().enumerate() {
            let idx = [x, y, z];
            let s = by_index[idx[normal]].expect("coverage checked");
            let col = gc + (idx[ab] as f64 - cb) * fb;
            let r = gc + (idx[ac] as f64 - cc) * fc;
            *o = s.sample(r, col) as f32;
        }
    });
    Ok(Volume3D {
        geometry: reference.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelVolume;
    use std::collections::BTreeMap;

    fn sphere(n: usize, r: f64) -> Volume3D {
        let c = (n as f64 - 1.0) / 2.0;
        Volume3D::from_fn(Geometry::new([n; 3], [1.0; 3]), |[x, y, z]| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
            if d <= r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn axial_extraction_counts_and_centres() {
        let v = Volume3D::filled(Geometry::new([64; 3], [1.0; 3]), 1.0);
        let grid = SliceGrid { size: 96, spacing: 1.0 };
        let s = extract_slices(&v, Orientation::Axial, grid, "v").unwrap();
        assert_eq!(s.len(), 64);
        assert!(s.iter().enumerate().all(|(i, sl)| sl.index == i));
        let sl = &s[10];
        // 64 pixels of content centred in a 96 grid: 16 pixels of padding per side
        assert_eq!(sl.at(48, 48), 1.0);
        assert_eq!(sl.at(48, 16), 1.0);
        assert_eq!(sl.at(48, 79), 1.0);
        assert_eq!(sl.at(48, 14), 0.0);
        assert_eq!(sl.at(81, 48), 0.0);
    }

    #[test]
    fn label_slices_only_contain_vocabulary_values() {
        let g = Geometry::new([10, 12, 9], [1.0, 1.2, 0.8]);
        let vocab = BTreeMap::from([(2, "a".into()), (9, "b".into())]);
        let data = (0..g.len()).map(|o| [0u16, 2, 9][(o / 7) % 3]).collect();
        let l = LabelVolume::new(g, data, vocab).unwrap();
        let grid = SliceGrid { size: 20, spacing: 0.7 };
        for o in Orientation::ALL {
            for s in extract_slices(&l, o, grid, "l").unwrap() {
                assert!(s.pixels.iter().all(|p| [0.0, 2.0, 9.0].contains(p)));
            }
        }
    }

    #[test]
    fn round_trip_at_matched_grid_is_exact() {
        // smooth, band-limited content on a grid whose parity matches the slice grid
        let g = Geometry::new([16, 16, 16], [1.0; 3]);
        let v = Volume3D::from_fn(g.clone(), |[x, y, z]| {
            ((x as f32 * 0.3).sin() + (y as f32 * 0.2).cos() + (z as f32 * 0.1).sin()) * 0.5
        });
        let grid = SliceGrid { size: 24, spacing: 1.0 };
        for o in Orientation::ALL {
            let s = extract_slices(&v, o, grid, "v").unwrap();
            let back = stack_slices(&s, &g).unwrap();
            let err = back
                .data
                .iter()
                .zip(&v.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(err < 1e-6, "{o:?}: {err}");
        }
    }

    #[test]
    fn sphere_round_trip_keeps_dice() {
        let v = sphere(20, 6.0);
        let grid = SliceGrid { size: 30, spacing: 0.8 };
        let s = extract_slices(&v, Orientation::Coronal, grid, "v").unwrap();
        let back = stack_slices(&s, &v.geometry).unwrap();
        let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
        for (p, g) in back.data.iter().zip(&v.data) {
            let p = if *p >= 0.5 { 1.0 } else { 0.0 };
            inter += p * g;
            a += p;
            b += g;
        }
        let dsc = 2.0 * inter / (a + b);
        assert!(dsc >= 0.99, "dsc {dsc}");
    }

    #[test]
    fn stacking_ones_fills_the_volume() {
        let g = Geometry::new([8, 9, 10], [1.0; 3]);
        let grid = SliceGrid { size: 16, spacing: 1.0 };
        let slices: Vec<Slice2D> = (0..10)
            .map(|k| Slice2D {
                pixels: vec![1.0; 256],
                size: 16,
                pixel_spacing: 1.0,
                orientation: Orientation::Axial,
                index: k,
                provenance: String::new(),
            })
            .collect();
        let v = stack_slices(&slices, &g).unwrap();
        assert!(v.data.iter().all(|&x| x == 1.0));
        let _ = grid;
    }

    #[test]
    fn missing_and_mixed_slices_are_errors() {
        let g = Geometry::new([6; 3], [1.0; 3]);
        let v = Volume3D::filled(g.clone(), 1.0);
        let grid = SliceGrid { size: 8, spacing: 1.0 };
        let mut s = extract_slices(&v, Orientation::Axial, grid, "v").unwrap();
        s.remove(3);
        let err = stack_slices(&s, &g).unwrap_err();
        assert!(matches!(err, Error::MissingSlices(ref m) if m == &vec![3]));
        assert!(err.to_string().contains("missing slice indices"));
        let mut s = extract_slices(&v, Orientation::Axial, grid, "v").unwrap();
        s[0].orientation = Orientation::Sagittal;
        assert!(matches!(stack_slices(&s, &g), Err(Error::MixedOrientations)));
    }
}
