//! Channel-major 2D feature maps and a checked GEMM wrapper.

use crate::volume::Slice2D;

/// `c × h × w` feature map stored channel-major, rows within channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn from_slice(s: &Slice2D) -> Self {
        Self::from_vec(1, s.size, s.size, s.pixels.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.plane();
        &self.data[k * n..(k + 1) * n]
    }

    /// Concatenation along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        assert!(parts.iter().all(|t| t.h == h && t.w == w), "concat spatial mismatch");
        let c = parts.iter().map(|t| t.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Tensor { c, h, w, data }
    }

    /// Inverse of [`Tensor::concat`].
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor> {
        assert_eq!(channels.iter().sum::<usize>(), self.c);
        let n = self.plane();
        let mut at = 0;
        channels
            .iter()
            .map(|&c| {
                let t = Tensor::from_vec(c, self.h, self.w, self.data[at * n..(at + c) * n].to_vec());
                at += c;
                t
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `C = alpha * A B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: A view out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: B view out of bounds");
    // SAFETY: every index touched lies within the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        // A transposed: stored k×m
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        gemm(m, k, n, 2.0, &at, (1, m), &b, (n, 1), 0.5, &mut c, (n, 1));
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - (2.0 * s + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec(2, 2, 2, (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec(1, 2, 2, vec![9.0; 4]);
        let c = Tensor::concat(&[&a, &b]);
        assert_eq!(c.c, 3);
        let parts = c.split(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
