//! Local normalised cross-correlation and its gradient.
//!
//! Windows are `(2r+1)³` boxes clipped to the grid. All window statistics come
//! from separable box sums, so the cost does not depend on the window size.

use crate::par;
use crate::volume::{BrainMask, Volume3D};
use crate::{Error, Result};

/// Variances below this fraction of the window's second moment count as zero.
const FLAT: f64 = 1e-10;

/// Sum over the clipped `(2r+1)³` box around every voxel.
pub(crate) fn box_sum(data: &[f64], shape: [usize; 3], r: usize) -> Vec<f64> {
    let a = box_sum_axis(data, shape, 0, r);
    let b = box_sum_axis(&a, shape, 1, r);
    box_sum_axis(&b, shape, 2, r)
}

fn box_sum_axis(src: &[f64], shape: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[..axis].iter().product();
    let block = n * inner;
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, block, |b, dst| {
        let s = &src[b * block..(b + 1) * block];
        let mut pre = vec![0.0; (n + 1) * inner];
        for k in 0..n {
            for i in 0..inner {
                pre[(k + 1) * inner + i] = pre[k * inner + i] + s[k * inner + i];
            }
        }
        for k in 0..n {
            let lo = k.saturating_sub(r) * inner;
            let hi = (k + r + 1).min(n) * inner;
            for i in 0..inner {
                dst[k * inner + i] = pre[hi + i] - pre[lo + i];
            }
        }
    });
    out
}

fn window_counts(shape: [usize; 3], r: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                out.push(span(x, shape[0]) * span(y, shape[1]) * span(z, shape[2]));
            }
        }
    }
    out
}

pub(crate) struct NccEval {
    /// Per-voxel NCC (0 for flat windows).
    pub map: Vec<f64>,
    /// Mean of `map` over the mask.
    pub value: f64,
    /// d value / d moving(u), when requested.
    pub grad: Option<Vec<f64>>,
}

/// Core evaluation on raw arrays. `mask` selects the voxels whose window NCC
/// is averaged; windows themselves always use every voxel.
pub(crate) fn evaluate(
    f: &[f64],
    m: &[f64],
    mask: Option<&[bool]>,
    shape: [usize; 3],
    radius: usize,
    want_grad: bool,
) -> NccEval {
    let len = f.len();
    let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let ff: Vec<f64> = f.iter().map(|a| a * a).collect();
    let mm: Vec<f64> = m.iter().map(|a| a * a).collect();
    let sf = box_sum(f, shape, radius);
    let sm = box_sum(m, shape, radius);
    let sff = box_sum(&ff, shape, radius);
    let smm = box_sum(&mm, shape, radius);
    let sfm = box_sum(&fm, shape, radius);
    let cnt = window_counts(shape, radius);

    let mut map = vec![0.0; len];
    // per-voxel coefficients of the gradient, see `grad` below
    let mut coef = if want_grad { vec![[0.0; 4]; len] } else { Vec::new() };
    let mut n_mask = 0usize;
    let mut total = 0.0;
    for v in 0..len {
        let inside = mask.is_none_or(|k| k[v]);
        let n = cnt[v];
        let mu_f = sf[v] / n;
        let mu_m = sm[v] / n;
        let vf = sff[v] - sf[v] * mu_f;
        let vm = smm[v] - sm[v] * mu_m;
        let cov = sfm[v] - sf[v] * mu_m;
        if vf > FLAT * sff[v] && vm > FLAT * smm[v] {
            let inv = 1.0 / (vf * vm).sqrt();
            let ncc = cov * inv;
            map[v] = ncc;
            if inside {
                total += ncc;
                if want_grad {
                    let alpha = inv;
                    let beta = ncc / vm;
                    coef[v] = [alpha, alpha * mu_f, beta, beta * mu_m];
                }
            }
        }
        if inside {
            n_mask += 1;
        }
    }
    let denom = n_mask.max(1) as f64;
    let value = total / denom;
    let grad = want_grad.then(|| {
        // d ncc_v / d m(u) = alpha_v (f(u) - mu_f,v) - beta_v (m(u) - mu_m,v)
        // for u in window(v); window membership is symmetric, so summing over
        // v is a box sum of the coefficients centred on u
        let planes: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let c: Vec<f64> = coef.iter().map(|c| c[k]).collect();
                box_sum(&c, shape, radius)
            })
            .collect();
        (0..len)
            .map(|u| {
                (f[u] * planes[0][u] - planes[1][u] - m[u] * planes[2][u] + planes[3][u]) / denom
            })
            .collect()
    });
    NccEval { map, value, grad }
}

fn check(fixed: &Volume3D, moving: &Volume3D, window: usize) -> Result<()> {
    if fixed.geometry.shape != moving.geometry.shape {
        return Err(Error::ShapeMismatch(format!(
            "fixed {:?} vs moving {:?}",
            fixed.geometry.shape, moving.geometry.shape
        )));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window must be odd and at least 3, got {window}"
        )));
    }
    Ok(())
}

fn to_f64(v: &Volume3D) -> Vec<f64> {
    v.data.iter().map(|&x| x as f64).collect()
}

/// Per-voxel windowed NCC.
pub fn local_ncc_map(fixed: &Volume3D, moving: &Volume3D, window: usize) -> Result<Vec<f64>> {
    check(fixed, moving, window)?;
    let e = evaluate(
        &to_f64(fixed),
        &to_f64(moving),
        None,
        fixed.geometry.shape,
        window / 2,
        false,
    );
    Ok(e.map)
}

/// Windowed NCC averaged over `mask` (all voxels when `None`). Windows with
/// zero variance in either image contribute 0.
pub fn local_ncc(
    fixed: &Volume3D,
    moving: &Volume3D,
    window: usize,
    mask: Option<&BrainMask>,
) -> Result<f64> {
    check(fixed, moving, window)?;
    if let Some(m) = mask {
        if m.geometry.shape != fixed.geometry.shape {
            return Err(Error::ShapeMismatch("mask does not match volume".into()));
        }
    }
    let e = evaluate(
        &to_f64(fixed),
        &to_f64(moving),
        mask.map(|m| m.data.as_slice()),
        fixed.geometry.shape,
        window / 2,
        false,
    );
    Ok(e.value)
}
