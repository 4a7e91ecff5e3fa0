//! Rigid and affine transforms.
//!
//! Transforms map points of the fixed (reference) space to the moving space,
//! which is what pull-back resampling needs: `warped(x) = moving(T(x))`. Both
//! kinds act about a centre `c`: `T(x) = A (x - c) + c + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute affine map `y = m x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub m: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let y = self.m * Vector3::from(p) + self.t;
        [y[0], y[1], y[2]]
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        AffineMap {
            m: self.m * inner.m,
            t: self.m * inner.t + self.t,
        }
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let inv = self.m.try_inverse().ok_or(Error::SingularTransform)?;
        Ok(AffineMap { m: inv, t: -(inv * self.t) })
    }

    fn about(m: Matrix3<f64>, center: [f64; 3], translation: [f64; 3]) -> Self {
        let c = Vector3::from(center);
        AffineMap {
            m,
            t: c - m * c + Vector3::from(translation),
        }
    }
}

/// `R = Rz(γ) Ry(β) Rx(α)` for angles `[α, β, γ]`.
pub fn euler_matrix(a: [f64; 3]) -> Matrix3<f64> {
    let (sa, ca) = a[0].sin_cos();
    let (sb, cb) = a[1].sin_cos();
    let (sg, cg) = a[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Partial derivatives of [`euler_matrix`] with respect to each angle.
pub fn euler_jacobian(a: [f64; 3]) -> [Matrix3<f64>; 3] {
    let (sa, ca) = a[0].sin_cos();
    let (sb, cb) = a[1].sin_cos();
    let (sg, cg) = a[2].sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa);
    let dry = Matrix3::new(-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb);
    let drz = Matrix3::new(-sg, -cg, 0.0, cg, -sg, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Inverse of [`euler_matrix`] for `|β| < π/2`.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let b = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let a = r[(2, 1)].atan2(r[(2, 2)]);
    let g = r[(1, 0)].atan2(r[(0, 0)]);
    [a, b, g]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Euler angles in radians, see [`euler_matrix`].
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl RigidTransform {
    pub fn identity(center: [f64; 3]) -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            center,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        euler_matrix(self.rotation)
    }

    pub fn to_map(&self) -> AffineMap {
        AffineMap::about(self.matrix(), self.center, self.translation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.to_map().apply(p)
    }

    /// Inverse about the same centre.
    pub fn inverse(&self) -> Self {
        let rt = self.matrix().transpose();
        let t = -(rt * Vector3::from(self.translation));
        Self {
            rotation: matrix_to_euler(&rt),
            translation: [t[0], t[1], t[2]],
            center: self.center,
        }
    }

    /// `self ∘ inner` re-expressed about `self.center`.
    pub fn compose(&self, inner: &RigidTransform) -> Self {
        let map = self.to_map().compose(&inner.to_map());
        let c = Vector3::from(self.center);
        let t = map.m * c + map.t - c;
        Self {
            rotation: matrix_to_euler(&map.m),
            translation: [t[0], t[1], t[2]],
            center: self.center,
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.rotation.to_vec();
        p.extend_from_slice(&self.translation);
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major 3×3 matrix.
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl AffineTransform {
    pub fn identity(center: [f64; 3]) -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            center,
        }
    }

    pub fn from_map(map: &AffineMap, center: [f64; 3]) -> Self {
        let c = Vector3::from(center);
        let t = map.m * c + map.t - c;
        Self {
            matrix: std::array::from_fn(|r| std::array::from_fn(|k| map.m[(r, k)])),
            translation: [t[0], t[1], t[2]],
            center,
        }
    }

    pub fn matrix3(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.matrix[r][c])
    }

    pub fn to_map(&self) -> AffineMap {
        AffineMap::about(self.matrix3(), self.center, self.translation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.to_map().apply(p)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix3().determinant()
    }

    /// Invertible and orientation preserving.
    pub fn validate(&self) -> Result<()> {
        let d = self.determinant();
        if !(d > 1e-12) || !d.is_finite() {
            return Err(Error::SingularTransform);
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        Ok(Self::from_map(&self.to_map().inverse()?, self.center))
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        p.extend_from_slice(&self.translation);
        p
    }
}

/// The composite pull-back map `T_rigid ∘ T_affine`, i.e. the image equation
/// `I_prior = T_affine(T_rigid(I_atlas))` read as a push-forward.
pub fn composite_map(rigid: &RigidTransform, affine: &AffineTransform) -> AffineMap {
    rigid.to_map().compose(&affine.to_map())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rigid,
    Affine,
}

/// On-disk transform record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    #[serde(rename = "type")]
    pub kind: TransformKind,
    pub parameters: Vec<f64>,
    pub center: [f64; 3],
    pub fixed_id: String,
    pub moving_id: String,
}

impl TransformRecord {
    pub fn rigid(t: &RigidTransform, fixed_id: &str, moving_id: &str) -> Self {
        Self {
            kind: TransformKind::Rigid,
            parameters: t.parameters(),
            center: t.center,
            fixed_id: fixed_id.into(),
            moving_id: moving_id.into(),
        }
    }

    pub fn affine(t: &AffineTransform, fixed_id: &str, moving_id: &str) -> Self {
        Self {
            kind: TransformKind::Affine,
            parameters: t.parameters(),
            center: t.center,
            fixed_id: fixed_id.into(),
            moving_id: moving_id.into(),
        }
    }

    pub fn to_rigid(&self) -> Result<RigidTransform> {
        if self.kind != TransformKind::Rigid || self.parameters.len() != 6 {
            return Err(Error::InvalidArgument("not a rigid transform record".into()));
        }
        let p = &self.parameters;
        Ok(RigidTransform {
            rotation: [p[0], p[1], p[2]],
            translation: [p[3], p[4], p[5]],
            center: self.center,
        })
    }

    pub fn to_affine(&self) -> Result<AffineTransform> {
        if self.kind != TransformKind::Affine || self.parameters.len() != 12 {
            return Err(Error::InvalidArgument("not an affine transform record".into()));
        }
        let p = &self.parameters;
        let t = AffineTransform {
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| p[3 * r + c])),
            translation: [p[9], p[10], p[11]],
            center: self.center,
        };
        t.validate()?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_round_trip() {
        let a = [0.3, -0.2, 1.1];
        let back = matrix_to_euler(&euler_matrix(a));
        for k in 0..3 {
            assert!((a[k] - back[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_jacobian_matches_finite_differences() {
        let a = [0.2, 0.4, -0.7];
        let j = euler_jacobian(a);
        let h = 1e-6;
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (euler_matrix(ap) - euler_matrix(am)) / (2.0 * h);
            assert!((fd - j[k]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn rigid_composed_with_inverse_is_identity() {
        let t = RigidTransform {
            rotation: [0.1, -0.25, 0.3],
            translation: [2.0, -3.0, 1.5],
            center: [4.0, 5.0, -6.0],
        };
        let id = t.compose(&t.inverse());
        for v in id.rotation.iter().chain(&id.translation) {
            assert!(v.abs() < 1e-9, "{id:?}");
        }
        let p = [1.0, 2.0, 3.0];
        let q = t.inverse().apply(t.apply(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_inverse_and_singularity() {
        let t = AffineTransform {
            matrix: [[1.05, 0.05, 0.0], [0.0, 0.95, 0.0], [0.02, 0.0, 1.0]],
            translation: [1.0, 2.0, 3.0],
            center: [0.5, 0.5, 0.5],
        };
        let inv = t.inverse().unwrap();
        let p = [3.0, -2.0, 7.0];
        let q = inv.apply(t.apply(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-9);
        }
        let mut s = t;
        s.matrix[2] = [0.0; 3];
        assert!(matches!(s.inverse(), Err(Error::SingularTransform)));
    }

    #[test]
    fn record_round_trip() {
        let r = RigidTransform {
            rotation: [0.1, 0.2, 0.3],
            translation: [1.0, 2.0, 3.0],
            center: [0.0, 1.0, 0.0],
        };
        let rec = TransformRecord::rigid(&r, "case", "atlas30");
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"type\":\"rigid\""));
        let back: TransformRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_rigid().unwrap(), r);
        assert!(back.to_affine().is_err());
    }
}
