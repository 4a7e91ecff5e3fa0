//! Layers with explicit forward and backward passes.
//!
//! Parameters live in a [`ParamSet`]; layers only hold indices into it.
//! Backward passes accumulate into a matching gradient set.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Tensor};

/// Ordered named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

pub type Grads = Vec<Vec<f64>>;

fn he_normal(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Rows of the output handled per im2col tile, bounding scratch memory.
fn tile_rows(cols_per_row: usize) -> usize {
    const BUDGET: usize = 1 << 22;
    (BUDGET / cols_per_row.max(1)).max(1)
}

/// Square convolution, kernel 1 or 3, zero padding, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(p: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k == 1 || k == 3);
        let fan_in = cin * k * k;
        let weight = p.add(format!("{name}.weight"), vec![cout, cin, k, k], he_normal(rng, cout * fan_in, fan_in));
        let bias = p.add(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout, k }
    }

    fn im2col(&self, x: &Tensor, r0: usize, r1: usize, cols: &mut Vec<f64>) {
        let (h, w) = (x.h as isize, x.w);
        let n = (r1 - r0) * w;
        cols.clear();
        cols.resize(self.cin * 9 * n, 0.0);
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                    for y in r0..r1 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        let drow = &mut row[(y - r0) * w..][..w];
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && (sx as usize) < w {
                                drow[xx] = srow[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut Tensor) {
        let (h, w) = (dx.h as isize, dx.w);
        let n = (r1 - r0) * w;
        let plane = dx.plane();
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                    for y in r0..r1 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let drow = &mut dx.data[ci * plane + sy as usize * w..][..w];
                        let srow = &row[(y - r0) * w..][..w];
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && (sx as usize) < w {
                                drow[sx as usize] += srow[xx];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let wt = &p.values[self.weight];
        let b = &p.values[self.bias];
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut y = Tensor::zeros(self.cout, h, w);
        for co in 0..self.cout {
            y.data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b[co]);
        }
        if self.k == 1 {
            gemm(self.cout, self.cin, hw, 1.0, wt, (self.cin, 1), &x.data, (hw, 1), 1.0, &mut y.data, (hw, 1));
            return y;
        }
        let kk = self.cin * 9;
        let step = tile_rows(kk * w);
        let mut cols = Vec::new();
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + step).min(h);
            self.im2col(x, r0, r1, &mut cols);
            let n = (r1 - r0) * w;
            gemm(self.cout, kk, n, 1.0, wt, (kk, 1), &cols, (n, 1), 1.0, &mut y.data[r0 * w..], (hw, 1));
            r0 = r1;
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_dx`.
    pub fn backward(&self, p: &ParamSet, x: &Tensor, dy: &Tensor, g: &mut Grads, need_dx: bool) -> Option<Tensor> {
        let wt = &p.values[self.weight];
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        {
            let gb = &mut g[self.bias];
            for co in 0..self.cout {
                gb[co] += dy.channel(co).iter().sum::<f64>();
            }
        }
        if self.k == 1 {
            gemm(self.cout, hw, self.cin, 1.0, &dy.data, (hw, 1), &x.data, (1, hw), 1.0, &mut g[self.weight], (self.cin, 1));
            return need_dx.then(|| {
                let mut dx = Tensor::zeros(self.cin, h, w);
                gemm(self.cin, self.cout, hw, 1.0, wt, (1, self.cin), &dy.data, (hw, 1), 0.0, &mut dx.data, (hw, 1));
                dx
            });
        }
        let kk = self.cin * 9;
        let step = tile_rows(kk * w);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut dx = need_dx.then(|| Tensor::zeros(self.cin, h, w));
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + step).min(h);
            let n = (r1 - r0) * w;
            self.im2col(x, r0, r1, &mut cols);
            let dyt = &dy.data[r0 * w..];
            gemm(self.cout, n, kk, 1.0, dyt, (hw, 1), &cols, (1, n), 1.0, &mut g[self.weight], (kk, 1));
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(kk * n, 0.0);
                gemm(kk, self.cout, n, 1.0, wt, (1, kk), dyt, (hw, 1), 0.0, &mut dcols, (n, 1));
                self.col2im(&dcols, r0, r1, dx);
            }
            r0 = r1;
        }
        dx
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTranspose2x2 {
    pub fn new(p: &mut ParamSet, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let weight = p.add(format!("{name}.weight"), vec![cin, cout, 2, 2], he_normal(rng, cin * cout * 4, cin));
        let bias = p.add(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout }
    }

    pub fn forward(&self, p: &ParamSet, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "transposed conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let c4 = self.cout * 4;
        let mut z = vec![0.0; c4 * hw];
        gemm(c4, self.cin, hw, 1.0, &p.values[self.weight], (1, c4), &x.data, (hw, 1), 0.0, &mut z, (hw, 1));
        let b = &p.values[self.bias];
        let mut y = Tensor::zeros(self.cout, 2 * h, 2 * w);
        let (ow, oplane) = (2 * w, 4 * hw);
        for co in 0..self.cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &z[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            y.data[co * oplane + (2 * i + a) * ow + 2 * j + bb] = zr[i * w + j] + b[co];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamSet, x: &Tensor, dy: &Tensor, g: &mut Grads) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let c4 = self.cout * 4;
        let (ow, oplane) = (2 * w, 4 * hw);
        let mut dz = vec![0.0; c4 * hw];
        for co in 0..self.cout {
            g[self.bias][co] += dy.channel(co).iter().sum::<f64>();
            for a in 0..2 {
                for bb in 0..2 {
                    let zr = &mut dz[(co * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            zr[i * w + j] = dy.data[co * oplane + (2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
            }
        }
        gemm(self.cin, hw, c4, 1.0, &x.data, (hw, 1), &dz, (1, hw), 1.0, &mut g[self.weight], (c4, 1));
        let mut dx = Tensor::zeros(self.cin, h, w);
        gemm(self.cin, c4, hw, 1.0, &p.values[self.weight], (c4, 1), &dz, (hw, 1), 0.0, &mut dx.data, (hw, 1));
        dx
    }
}

/// Fully connected layer on a vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub nin: usize,
    pub nout: usize,
}

impl Linear {
    pub fn new(p: &mut ParamSet, rng: &mut impl Rng, name: &str, nin: usize, nout: usize) -> Self {
        let weight = p.add(format!("{name}.weight"), vec![nout, nin], he_normal(rng, nin * nout, nin));
        let bias = p.add(format!("{name}.bias"), vec![nout], vec![0.0; nout]);
        Self { weight, bias, nin, nout }
    }

    pub fn forward(&self, p: &ParamSet, x: &[f64]) -> Vec<f64> {
        let wt = &p.values[self.weight];
        let b = &p.values[self.bias];
        (0..self.nout)
            .map(|o| b[o] + wt[o * self.nin..(o + 1) * self.nin].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, p: &ParamSet, x: &[f64], dy: &[f64], g: &mut Grads) -> Vec<f64> {
        let wt = &p.values[self.weight];
        let mut dx = vec![0.0; self.nin];
        for o in 0..self.nout {
            g[self.bias][o] += dy[o];
            let row = &mut g[self.weight][o * self.nin..(o + 1) * self.nin];
            for i in 0..self.nin {
                row[i] += dy[o] * x[i];
                dx[i] += dy[o] * wt[o * self.nin + i];
            }
        }
        dx
    }
}

pub fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, mut dy: Tensor) -> Tensor {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dy
}

/// 2×2 stride-2 max pooling; returns the output and the flat input index of
/// each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0usize; x.c * oh * ow];
    let plane = x.plane();
    for c in 0..x.c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = c * plane + 2 * i * x.w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let o = c * plane + (2 * i + a) * x.w + 2 * j + b;
                    if x.data[o] > x.data[best] {
                        best = o;
                    }
                }
                let k = (c * oh + i) * ow + j;
                y.data[k] = x.data[best];
                arg[k] = best;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(input_shape: [usize; 3], arg: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape[0], input_shape[1], input_shape[2]);
    for (k, &o) in arg.iter().enumerate() {
        dx.data[o] += dy.data[k];
    }
    dx
}

/// Mean over `f×f` cells.
pub fn avgpool(x: &Tensor, f: usize) -> Tensor {
    let (oh, ow) = (x.h / f, x.w / f);
    let mut y = Tensor::zeros(x.c, oh, ow);
    let norm = 1.0 / (f * f) as f64;
    for c in 0..x.c {
        let src = x.channel(c);
        for i in 0..x.h.min(oh * f) {
            for j in 0..x.w.min(ow * f) {
                y.data[(c * oh + i / f) * ow + j / f] += src[i * x.w + j] * norm;
            }
        }
    }
    y
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(y * r))/d(theta) for every parameter and input entry.
    fn check<F>(p: &mut ParamSet, x: &Tensor, fwd: F, bwd: &dyn Fn(&ParamSet, &Tensor, &Tensor, &mut Grads) -> Tensor)
    where
        F: Fn(&ParamSet, &Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = fwd(p, x);
        let r = rand_tensor(&mut rng, y.c, y.h, y.w);
        let obj = |p: &ParamSet, x: &Tensor| fwd(p, x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        let mut g = p.zeros_like();
        let dx = bwd(p, x, &r, &mut g);
        let h = 1e-6;
        for t in 0..p.len() {
            for i in 0..p.values[t].len() {
                let v = p.values[t][i];
                p.values[t][i] = v + h;
                let a = obj(p, x);
                p.values[t][i] = v - h;
                let b = obj(p, x);
                p.values[t][i] = v;
                let fd = (a - b) / (2.0 * h);
                assert!((fd - g[t][i]).abs() < 1e-6 * (1.0 + fd.abs()), "{} [{i}]: {fd} vs {}", p.names[t], g[t][i]);
            }
        }
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            let v = x.data[i];
            xp.data[i] = v + h;
            let a = obj(p, &xp);
            xp.data[i] = v - h;
            let b = obj(p, &xp);
            xp.data[i] = v;
            let fd = (a - b) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input [{i}]: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv3_and_conv1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let mut p = ParamSet::default();
            let conv = Conv2d::new(&mut p, &mut rng, "c", 2, 3, k);
            p.values[conv.bias] = vec![0.1, -0.2, 0.3];
            let x = rand_tensor(&mut rng, 2, 5, 4);
            let c2 = conv.clone();
            check(&mut p, &x, |p, x| conv.forward(p, x), &move |p, x, dy, g| c2.backward(p, x, dy, g, true).unwrap());
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::default();
        let conv = Conv2d::new(&mut p, &mut rng, "c", 2, 2, 3);
        let x = rand_tensor(&mut rng, 2, 6, 7);
        let y = conv.forward(&p, &x);
        let wt = &p.values[conv.weight];
        for co in 0..2 {
            for i in 0..6isize {
                for j in 0..7isize {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (yy, xx) = (i + ky - 1, j + kx - 1);
                                if (0..6).contains(&yy) && (0..7).contains(&xx) {
                                    s += wt[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[(ci * 6 + yy as usize) * 7 + xx as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(co * 6 + i as usize) * 7 + j as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::default();
        let up = ConvTranspose2x2::new(&mut p, &mut rng, "u", 3, 2);
        p.values[up.bias] = vec![0.5, -0.5];
        let x = rand_tensor(&mut rng, 3, 3, 2);
        let u2 = up.clone();
        check(&mut p, &x, |p, x| up.forward(p, x), &move |p, x, dy, g| u2.backward(p, x, dy, g));
    }

    #[test]
    fn maxpool_routes_gradient_to_maxima() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::default();
        let l = Linear::new(&mut p, &mut rng, "l", 4, 3);
        let x = rand_tensor(&mut rng, 4, 1, 1);
        let l2 = l.clone();
        check(
            &mut p,
            &x,
            |p, x| Tensor::from_vec(3, 1, 1, l.forward(p, &x.data)),
            &move |p, x, dy, g| Tensor::from_vec(4, 1, 1, l2.backward(p, &x.data, &dy.data, g)),
        );
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
