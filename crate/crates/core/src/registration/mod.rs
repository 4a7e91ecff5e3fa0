//! Rigid then affine registration by local NCC over a multi-resolution
//! pyramid, plus warping.
//!
//! The fixed image is the subject and the moving image is the atlas. The
//! optimiser is a regular-step gradient ascent on the analytic gradient of
//! the masked mean local NCC.

mod ncc;
pub mod transform;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use ncc::{local_ncc, local_ncc_map};
pub use transform::{
    composite_map, AffineMap, AffineTransform, RigidTransform, TransformKind, TransformRecord,
};

use crate::par;
use crate::volume::{
    resample_mapped, resample_onto, trilinear_grad, BrainMask, Geometry, Interpolation, Volume,
    Volume3D, VolumeKind,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Metric window edge length in voxels, odd.
    pub metric_window: usize,
    /// Downsampling factor per level, coarse to fine.
    pub shrink_factors: Vec<usize>,
    /// Gaussian sigma per level, in voxels of the input grid.
    pub smoothing_sigmas: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Initial step per level, in level voxels of displacement.
    pub step_sizes: Vec<f64>,
    pub min_step: f64,
    /// Relative metric change that ends a level.
    pub tolerance: f64,
    /// Start from the translation that aligns intensity centres of mass.
    pub center_of_mass_init: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            metric_window: 11,
            shrink_factors: vec![4, 2, 1],
            smoothing_sigmas: vec![2.0, 1.0, 0.0],
            iterations: vec![40, 20, 10],
            step_sizes: vec![1.0, 0.5, 0.25],
            min_step: 1e-3,
            tolerance: 1e-6,
            center_of_mass_init: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("registration config: {m}")));
        if self.metric_window < 3 || self.metric_window % 2 == 0 {
            return bad("metric_window must be odd and at least 3");
        }
        let n = self.shrink_factors.len();
        if n == 0
            || self.smoothing_sigmas.len() != n
            || self.iterations.len() != n
            || self.step_sizes.len() != n
        {
            return bad("per-level lists must be nonempty and of equal length");
        }
        if self.iterations.iter().any(|&i| i == 0) {
            return bad("iterations must be positive");
        }
        if self.shrink_factors.iter().any(|&f| f == 0) {
            return bad("shrink factors must be positive");
        }
        if self.smoothing_sigmas.iter().any(|&s| !(s >= 0.0)) {
            return bad("smoothing sigmas must be nonnegative");
        }
        if self.step_sizes.iter().any(|&s| !(s > 0.0)) || !(self.min_step > 0.0) {
            return bad("step sizes must be positive");
        }
        Ok(())
    }
}

/// Separable Gaussian blur with clamped borders; `sigma` in voxels.
pub fn gaussian_smooth(v: &Volume3D, sigma: f64) -> Volume3D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    let shape = v.geometry.shape;
    let mut cur: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let inner: usize = shape[..axis].iter().product();
        let block = shape[axis] * inner;
        let src = cur;
        let mut out = vec![0.0; src.len()];
        par::for_each_chunk_mut(&mut out, block, |b, dst| {
            let s = &src[b * block..(b + 1) * block];
            for j in 0..n {
                for i in 0..inner {
                    let mut acc = 0.0;
                    for (t, w) in k.iter().enumerate() {
                        let q = (j + t as isize - radius).clamp(0, n - 1) as usize;
                        acc += w * s[q * inner + i];
                    }
                    dst[j as usize * inner + i] = acc;
                }
            }
        });
        cur = out;
    }
    Volume3D {
        geometry: v.geometry.clone(),
        data: cur.into_iter().map(|x| x as f32).collect(),
    }
}

/// Intensity centre of mass in world coordinates (grid centre for an empty
/// image).
pub fn center_of_mass(v: &Volume3D) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (o, &x) in v.data.iter().enumerate() {
        let w = (x as f64).abs();
        if w > 0.0 {
            let p = v.geometry.index_to_world(v.geometry.unravel(o).map(|i| i as f64));
            for a in 0..3 {
                acc[a] += w * p[a];
            }
            total += w;
        }
    }
    if total > 0.0 {
        acc.map(|a| a / total)
    } else {
        v.geometry.center()
    }
}

struct Level {
    fixed: Vec<f64>,
    mask: Vec<bool>,
    geometry: Geometry,
    moving: Volume3D,
    /// Mean level spacing in mm.
    spacing: f64,
}

fn level_grid(g: &Geometry, factor: usize) -> Geometry {
    let shape = g.shape.map(|n| n.div_ceil(factor));
    let spacing = std::array::from_fn(|a| g.spacing[a] * g.shape[a] as f64 / shape[a] as f64);
    g.recentered(spacing, shape)
}

fn build_pyramid(fixed: &Volume3D, moving: &Volume3D, cfg: &RegistrationConfig) -> Result<Vec<Level>> {
    let mask = BrainMask::from_nonzero(fixed);
    let mask_vol = Volume3D {
        geometry: fixed.geometry.clone(),
        data: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    let mut out = Vec::new();
    for (&factor, &sigma) in cfg.shrink_factors.iter().zip(&cfg.smoothing_sigmas) {
        let fg = level_grid(&fixed.geometry, factor);
        let mg = level_grid(&moving.geometry, factor);
        let f = resample_onto(&gaussian_smooth(fixed, sigma), &fg, Interpolation::Linear)?;
        let m = resample_onto(&gaussian_smooth(moving, sigma), &mg, Interpolation::Linear)?;
        let lm = resample_onto(&mask_vol, &fg, Interpolation::Nearest)?;
        let mut mask: Vec<bool> = lm.data.iter().map(|&x| x > 0.5).collect();
        if !mask.iter().any(|&b| b) {
            mask.iter_mut().for_each(|b| *b = true);
        }
        out.push(Level {
            fixed: f.data.iter().map(|&x| x as f64).collect(),
            mask,
            spacing: fg.spacing.iter().sum::<f64>() / 3.0,
            geometry: fg,
            moving: m,
        });
    }
    Ok(out)
}

/// Which parameters are optimised.
enum Stage {
    Rigid { center: [f64; 3] },
    /// Affine applied before a fixed rigid transform.
    Affine { rigid: RigidTransform, center: [f64; 3] },
}

impl Stage {
    fn map(&self, p: &[f64]) -> AffineMap {
        match self {
            Stage::Rigid { center } => RigidTransform {
                rotation: [p[0], p[1], p[2]],
                translation: [p[3], p[4], p[5]],
                center: *center,
            }
            .to_map(),
            Stage::Affine { rigid, center } => composite_map(rigid, &affine_from(p, *center)),
        }
    }

    /// Per-level parameter scales: one unit of scaled parameter moves a point
    /// at the half-extent by about one level voxel.
    fn scales(&self, spacing: f64, half_extent: f64) -> Vec<f64> {
        let (lin, n_lin) = match self {
            Stage::Rigid { .. } => (spacing / half_extent, 3),
            Stage::Affine { .. } => (spacing / half_extent, 9),
        };
        let mut s = vec![lin; n_lin];
        s.extend([spacing; 3]);
        s
    }

    fn len(&self) -> usize {
        match self {
            Stage::Rigid { .. } => 6,
            Stage::Affine { .. } => 12,
        }
    }

    /// Linear factors turning a world gradient `g` at point `x` into the
    /// parameter gradient.
    fn prepare(&self, p: &[f64]) -> [Matrix3<f64>; 3] {
        match self {
            Stage::Rigid { .. } => transform::euler_jacobian([p[0], p[1], p[2]]),
            Stage::Affine { rigid, .. } => [rigid.matrix().transpose(), Matrix3::zeros(), Matrix3::zeros()],
        }
    }

    /// Writes `d (g · y) / d p` for world gradient `g` at offset `r = x - c`.
    #[inline]
    fn jacobian_row(&self, prep: &[Matrix3<f64>; 3], g: &Vector3<f64>, r: &Vector3<f64>, out: &mut [f64]) {
        match self {
            Stage::Rigid { .. } => {
                for k in 0..3 {
                    out[k] = g.dot(&(prep[k] * r));
                }
                out[3] = g[0];
                out[4] = g[1];
                out[5] = g[2];
            }
            Stage::Affine { .. } => {
                let gz = prep[0] * g;
                for i in 0..3 {
                    for j in 0..3 {
                        out[3 * i + j] = gz[i] * r[j];
                    }
                    out[9 + i] = gz[i];
                }
            }
        }
    }
}

fn affine_from(p: &[f64], center: [f64; 3]) -> AffineTransform {
    AffineTransform {
        matrix: std::array::from_fn(|r| std::array::from_fn(|c| p[3 * r + c])),
        translation: [p[9], p[10], p[11]],
        center,
    }
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    /// Σ_u J(u)², a diagonal curvature estimate.
    curvature: Vec<f64>,
}

/// Metric, its gradient with respect to the stage parameters and a diagonal
/// curvature estimate.
fn evaluate(level: &Level, stage: &Stage, center: [f64; 3], p: &[f64], radius: usize) -> Eval {
    let map = stage.map(p);
    let g = &level.geometry;
    let mg = &level.moving.geometry;
    let plane = g.shape[0] * g.shape[1];
    // world-gradient factor of the moving grid: D diag(1/s)
    let dm = Matrix3::from_fn(|r, c| mg.direction[r][c] / mg.spacing[c]);
    let mut warped = vec![(0.0, [0.0; 3]); g.len()];
    par::for_each_chunk_mut(&mut warped, plane, |z, out| {
        for (k, o) in out.iter_mut().enumerate() {
            let x = g.index_to_world([(k % g.shape[0]) as f64, (k / g.shape[0]) as f64, z as f64]);
            let y = map.apply(x);
            let (v, gi) = trilinear_grad(&level.moving.data, mg.shape, mg.world_to_index(y));
            let gw = dm * Vector3::from(gi);
            *o = (v, [gw[0], gw[1], gw[2]]);
        }
    });
    let w: Vec<f64> = warped.iter().map(|p| p.0).collect();
    let e = ncc::evaluate(&level.fixed, &w, Some(&level.mask), g.shape, radius, true);
    let dw = e.grad.unwrap();
    let c = Vector3::from(center);
    let n = stage.len();
    let prep = stage.prepare(p);
    let partials = par::map_range(g.shape[2], |z| {
        let mut grad = vec![0.0; n];
        let mut curv = vec![0.0; n];
        let mut row = [0.0; 12];
        for k in 0..plane {
            let o = z * plane + k;
            let gw = Vector3::from(warped[o].1);
            if gw == Vector3::zeros() {
                continue;
            }
            let x = g.index_to_world([(k % g.shape[0]) as f64, (k / g.shape[0]) as f64, z as f64]);
            stage.jacobian_row(&prep, &gw, &(Vector3::from(x) - c), &mut row);
            for i in 0..n {
                grad[i] += dw[o] * row[i];
                curv[i] += row[i] * row[i];
            }
        }
        (grad, curv)
    });
    let mut grad = vec![0.0; n];
    let mut curvature = vec![0.0; n];
    for (gp, cp) in &partials {
        for i in 0..n {
            grad[i] += gp[i];
            curvature[i] += cp[i];
        }
    }
    Eval {
        value: e.value,
        grad,
        curvature,
    }
}

/// Runs the pyramid, returning the final parameters and metric.
fn optimise(
    levels: &[Level],
    stage: &Stage,
    center: [f64; 3],
    mut p: Vec<f64>,
    half_extent: f64,
    cfg: &RegistrationConfig,
) -> Result<(Vec<f64>, f64)> {
    let radius = cfg.metric_window / 2;
    let mut last = f64::NAN;
    for (li, level) in levels.iter().enumerate() {
        let scales = stage.scales(level.spacing, half_extent);
        let mut step = cfg.step_sizes[li];
        let mut prev_dir: Option<Vec<f64>> = None;
        let mut prev_value: Option<f64> = None;
        for it in 0..cfg.iterations[li] {
            let Eval { value, grad, curvature } = evaluate(level, stage, center, &p, radius);
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    level: li,
                    iteration: it,
                    metric: value,
                });
            }
            last = value;
            if let Some(pv) = prev_value {
                if (value - pv).abs() <= cfg.tolerance * pv.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
            prev_value = Some(value);
            // Jacobi-preconditioned direction in scaled space: curvature is
            // expressed per scaled unit so both factors share the same units
            let hq: Vec<f64> = curvature.iter().zip(&scales).map(|(h, s)| h * s * s).collect();
            let floor = 1e-3 * hq.iter().sum::<f64>() / hq.len() as f64 + f64::MIN_POSITIVE;
            let gq: Vec<f64> = grad
                .iter()
                .zip(&scales)
                .zip(&hq)
                .map(|((g, s), h)| g * s / (h + floor))
                .collect();
            let norm = gq.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let dir: Vec<f64> = gq.iter().map(|g| g / norm).collect();
            if let Some(pd) = &prev_dir {
                if pd.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                    step *= 0.5;
                }
            }
            if step < cfg.min_step {
                break;
            }
            for k in 0..p.len() {
                p[k] += step * scales[k] * dir[k];
            }
            log::trace!("level {li} iter {it}: metric {value:.6} step {step:.4}");
            prev_dir = Some(dir);
        }
        log::debug!("level {li} done: metric {last:.6}");
    }
    Ok((p, last))
}

fn check_inputs(fixed: &Volume3D, moving: &Volume3D, cfg: &RegistrationConfig) -> Result<()> {
    cfg.validate()?;
    fixed.geometry.validate()?;
    moving.geometry.validate()?;
    Ok(())
}

/// Rigid alignment of `moving` onto `fixed`. The result maps fixed-space
/// points into moving space.
pub fn register_rigid(
    fixed: &Volume3D,
    moving: &Volume3D,
    cfg: &RegistrationConfig,
) -> Result<RigidTransform> {
    check_inputs(fixed, moving, cfg)?;
    let center = center_of_mass(fixed);
    let mut p = vec![0.0; 6];
    if cfg.center_of_mass_init {
        let cm = center_of_mass(moving);
        for a in 0..3 {
            p[3 + a] = cm[a] - center[a];
        }
    }
    let levels = build_pyramid(fixed, moving, cfg)?;
    let stage = Stage::Rigid { center };
    let (p, metric) = optimise(&levels, &stage, center, p, fixed.geometry.half_extent(), cfg)?;
    log::debug!("rigid metric {metric:.6}");
    Ok(RigidTransform {
        rotation: [p[0], p[1], p[2]],
        translation: [p[3], p[4], p[5]],
        center,
    })
}

/// Affine refinement on top of `init`. The returned transform is applied
/// before `init` in fixed-to-moving direction, see [`warp`].
pub fn register_affine(
    fixed: &Volume3D,
    moving: &Volume3D,
    init: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<AffineTransform> {
    check_inputs(fixed, moving, cfg)?;
    let center = init.center;
    let p = AffineTransform::identity(center).parameters();
    let levels = build_pyramid(fixed, moving, cfg)?;
    let stage = Stage::Affine {
        rigid: *init,
        center,
    };
    let (p, metric) = optimise(&levels, &stage, center, p, fixed.geometry.half_extent(), cfg)?;
    log::debug!("affine metric {metric:.6}");
    let t = affine_from(&p, center);
    t.validate()?;
    Ok(t)
}

/// Resamples `input` onto `reference` through `T_rigid ∘ T_affine`. Images use
/// linear and labels nearest interpolation.
pub fn warp<V: Volume>(
    input: &V,
    rigid: &RigidTransform,
    affine: &AffineTransform,
    reference: &Geometry,
) -> Result<V> {
    affine.validate()?;
    warp_map(input, &composite_map(rigid, affine), reference)
}

/// Pull-back warp through an absolute affine map.
pub fn warp_map<V: Volume>(input: &V, map: &AffineMap, reference: &Geometry) -> Result<V> {
    let mode = match V::KIND {
        VolumeKind::Image => Interpolation::Linear,
        VolumeKind::Label => Interpolation::Nearest,
    };
    resample_mapped(input, reference, mode, |w| map.apply(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize) -> Volume3D {
        let g = Geometry::new([n; 3], [1.0; 3]);
        let c = (n as f64 - 1.0) / 2.0;
        Volume3D::from_fn(g, |[x, y, z]| {
            let d = [(x as f64 - c) / (0.35 * n as f64), (y as f64 - c) / (0.28 * n as f64), (z as f64 - c) / (0.22 * n as f64)];
            let r2 = d.iter().map(|v| v * v).sum::<f64>();
            let off = (x as f64 - c - 2.0).powi(2) + (y as f64 - c + 3.0).powi(2) + (z as f64 - c).powi(2);
            if r2 < 1.0 {
                (0.5 + 0.5 * (-off / 20.0).exp()) as f32
            } else {
                0.0
            }
        })
    }

    #[test]
    fn stage_gradient_matches_finite_differences() {
        let fixed = gaussian_smooth(&blob(20), 1.0);
        let levels = build_pyramid(&fixed, &fixed, &RegistrationConfig {
            shrink_factors: vec![1],
            smoothing_sigmas: vec![0.0],
            iterations: vec![1],
            step_sizes: vec![1.0],
            ..Default::default()
        })
        .unwrap();
        let center = center_of_mass(&fixed);
        let rigid = RigidTransform {
            rotation: [0.05, -0.03, 0.08],
            translation: [0.4, -0.7, 0.3],
            center,
        };
        let cases: Vec<(Stage, Vec<f64>)> = vec![
            (Stage::Rigid { center }, rigid.parameters()),
            (
                Stage::Affine { rigid, center },
                vec![1.02, 0.01, 0.0, -0.02, 0.97, 0.03, 0.0, 0.01, 1.01, 0.2, -0.1, 0.3],
            ),
        ];
        for (stage, p) in cases {
            let g = evaluate(&levels[0], &stage, center, &p, 2).grad;
            for k in 0..p.len() {
                let h = if k < p.len() - 3 { 1e-6 } else { 1e-5 };
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[k] += h;
                pm[k] -= h;
                let fd = (evaluate(&levels[0], &stage, center, &pp, 2).value
                    - evaluate(&levels[0], &stage, center, &pm, 2).value)
                    / (2.0 * h);
                let tol = 1e-4 * g[k].abs().max(1e-3);
                assert!((fd - g[k]).abs() < tol, "param {k}: fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn identity_warp_is_plain_resampling() {
        let v = blob(12);
        let c = v.geometry.center();
        let w = warp(&v, &RigidTransform::identity(c), &AffineTransform::identity(c), &v.geometry)
            .unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn half_voxel_translation_on_ramp_is_linear_interpolation() {
        let g = Geometry::new([10; 3], [1.0; 3]);
        let ramp = Volume3D::from_fn(g.clone(), |[x, y, z]| (2 * x + y + 3 * z) as f32);
        let mut r = RigidTransform::identity(g.center());
        r.translation = [0.5, 0.0, 0.0];
        let w = warp(&ramp, &r, &AffineTransform::identity(g.center()), &g).unwrap();
        for z in 0..10 {
            for y in 0..10 {
                for x in 0..9 {
                    let expect = 2.0 * (x as f64 + 0.5) + y as f64 + 3.0 * z as f64;
                    assert!((w.at(x, y, z) as f64 - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn singular_affine_cannot_warp() {
        let v = blob(6);
        let c = v.geometry.center();
        let mut a = AffineTransform::identity(c);
        a.matrix[1] = [0.0; 3];
        assert!(matches!(
            warp(&v, &RigidTransform::identity(c), &a, &v.geometry),
            Err(Error::SingularTransform)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(RegistrationConfig::default().validate().is_ok());
        let even = RegistrationConfig {
            metric_window: 10,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let zero = RegistrationConfig {
            iterations: vec![4, 0, 1],
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
