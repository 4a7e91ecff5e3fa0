use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Grid geometry: shape, voxel spacing (mm), origin (mm, centre of voxel 0)
/// and direction cosines. `direction[r][c]` is the world component `r` of
/// voxel axis `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Geometry {
    /// Axis-aligned grid centred on the world origin.
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = std::array::from_fn(|a| -(shape[a] as f64 - 1.0) * spacing[a] / 2.0);
        Self {
            shape,
            spacing,
            origin,
            direction: IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(self.spacing));
        }
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "empty shape {:?}",
                self.shape
            )));
        }
        if !is_orthonormal(&self.direction, 1e-6) {
            return Err(Error::NonOrthonormalDirection);
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("non-finite origin".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn unravel(&self, o: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [o % nx, (o / nx) % ny, o / (nx * ny)]
    }

    /// Voxel indices in storage order.
    pub fn indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.len()).map(|o| self.unravel(o))
    }

    #[inline]
    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let s = [
            idx[0] * self.spacing[0],
            idx[1] * self.spacing[1],
            idx[2] * self.spacing[2],
        ];
        let d = &self.direction;
        [
            self.origin[0] + d[0][0] * s[0] + d[0][1] * s[1] + d[0][2] * s[2],
            self.origin[1] + d[1][0] * s[0] + d[1][1] * s[1] + d[1][2] * s[2],
            self.origin[2] + d[2][0] * s[0] + d[2][1] * s[1] + d[2][2] * s[2],
        ]
    }

    #[inline]
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        let d = &self.direction;
        // direction is orthonormal, so its inverse is the transpose
        [
            (d[0][0] * q[0] + d[1][0] * q[1] + d[2][0] * q[2]) / self.spacing[0],
            (d[0][1] * q[0] + d[1][1] * q[1] + d[2][1] * q[2]) / self.spacing[1],
            (d[0][2] * q[0] + d[1][2] * q[1] + d[2][2] * q[2]) / self.spacing[2],
        ]
    }

    /// World coordinate of the grid centre.
    pub fn center(&self) -> [f64; 3] {
        self.index_to_world(std::array::from_fn(|a| (self.shape[a] as f64 - 1.0) / 2.0))
    }

    /// Grid with new spacing and shape sharing this grid's centre and direction.
    pub fn recentered(&self, spacing: [f64; 3], shape: [usize; 3]) -> Geometry {
        let c = self.center();
        let half: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0 * spacing[a]);
        let d = &self.direction;
        let origin = std::array::from_fn(|r| {
            c[r] - (d[r][0] * half[0] + d[r][1] * half[1] + d[r][2] * half[2])
        });
        Geometry {
            shape,
            spacing,
            origin,
            direction: self.direction,
        }
    }

    /// Mean half-extent of the field of view, in mm.
    pub fn half_extent(&self) -> f64 {
        (0..3)
            .map(|a| self.shape[a] as f64 * self.spacing[a] / 2.0)
            .sum::<f64>()
            / 3.0
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        const TOL: f64 = 1e-6;
        self.shape == other.shape
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() < TOL)
            && (0..3).all(|a| (self.origin[a] - other.origin[a]).abs() < TOL)
            && (0..3).all(|r| (0..3).all(|c| (self.direction[r][c] - other.direction[r][c]).abs() < TOL))
    }
}

pub fn is_orthonormal(d: &[[f64; 3]; 3], tol: f64) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|r| d[r][i] * d[r][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > tol {
                return false;
            }
        }
    }
    true
}
