use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::{Real, Tensor};

/// A learnable buffer together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    fn uniform<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::new((0..len).map(|_| T::of(dist.sample(rng))).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Square convolution with stride 1 and "same" zero padding (kernel 1 or 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// `(cout, cin·kernel²)` row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct ConvCache<T> {
    /// Per-sample im2col buffers (`cin·k² × h·w`); for 1×1 kernels the input itself.
    cols: Vec<Vec<T>>,
    h: usize,
    w: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            cin,
            cout,
            kernel,
            weight: Param::uniform(cout * fan_in, bound, rng),
            bias: Param::uniform(cout, bound, rng),
        }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel + cout
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let plane = h * w;
        let mut col = vec![T::zero(); self.cin * 9 * plane];
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * plane;
                    let dst = &mut col[row..row + plane];
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let d = &mut dst[y * w + x_lo..y * w + x_hi];
                        let s_lo = (x_lo as isize + dx) as usize;
                        d.copy_from_slice(&src[sy * w + s_lo..sy * w + s_lo + d.len()]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, out: &mut [T]) {
        let plane = h * w;
        for ci in 0..self.cin {
            let dst = &mut out[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * plane;
                    let src = &col[row..row + plane];
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let s_lo = (x_lo as isize + dx) as usize;
                        let s = &src[y * w + x_lo..y * w + x_hi];
                        let d = &mut dst[sy * w + s_lo..sy * w + s_lo + s.len()];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channel mismatch");
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let k = self.cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let mut cols = Vec::with_capacity(x.n);
        for i in 0..x.n {
            let col = if self.kernel == 3 {
                self.im2col(x.sample(i), h, w)
            } else {
                x.sample(i).to_vec()
            };
            let y = out.sample_mut(i);
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            T::gemm(
                self.cout,
                k,
                plane,
                T::one(),
                &self.weight.value,
                k as isize,
                1,
                &col,
                plane as isize,
                1,
                T::one(),
                y,
                plane as isize,
                1,
            );
            cols.push(col);
        }
        (out, ConvCache { cols, h, w })
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward(&mut self, cache: ConvCache<T>, gy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let (h, w) = (cache.h, cache.w);
        let plane = h * w;
        let k = self.cin * self.kernel * self.kernel;
        let mut gx = need_input_grad.then(|| Tensor::zeros(gy.n, self.cin, h, w));
        let mut gcol = if need_input_grad && self.kernel == 3 {
            vec![T::zero(); k * plane]
        } else {
            Vec::new()
        };
        for (i, col) in cache.cols.iter().enumerate() {
            let g = gy.sample(i);
            for (co, chunk) in g.chunks(plane).enumerate() {
                let s = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                self.bias.grad[co] = self.bias.grad[co] + s;
            }
            // gW (cout × k) += gY (cout × plane) · colᵀ (plane × k)
            T::gemm(
                self.cout,
                plane,
                k,
                T::one(),
                g,
                plane as isize,
                1,
                col,
                1,
                plane as isize,
                T::one(),
                &mut self.weight.grad,
                k as isize,
                1,
            );
            if let Some(gx) = gx.as_mut() {
                let target: &mut [T] = if self.kernel == 3 {
                    gcol.iter_mut().for_each(|v| *v = T::zero());
                    &mut gcol
                } else {
                    gx.sample_mut(i)
                };
                // gcol (k × plane) = Wᵀ (k × cout) · gY (cout × plane)
                T::gemm(
                    k,
                    self.cout,
                    plane,
                    T::one(),
                    &self.weight.value,
                    1,
                    k as isize,
                    g,
                    plane as isize,
                    1,
                    T::zero(),
                    target,
                    plane as isize,
                    1,
                );
                if self.kernel == 3 {
                    self.col2im(&gcol, h, w, gx.sample_mut(i));
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2×2 transposed convolution with stride 2 (doubles the spatial size).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2<T> {
    pub cin: usize,
    pub cout: usize,
    /// `(cin, cout·4)` row-major, i.e. `(cin, cout, 2, 2)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct UpCache<T> {
    input: Tensor<T>,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cout * 4) as f64).sqrt();
        Self {
            cin,
            cout,
            weight: Param::uniform(cin * cout * 4, bound, rng),
            bias: Param::uniform(cout, bound, rng),
        }
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        cin * cout * 4 + cout
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, UpCache<T>) {
        assert_eq!(x.c, self.cin, "transposed conv input channel mismatch");
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let rows = self.cout * 4;
        let mut out = Tensor::zeros(x.n, self.cout, 2 * h, 2 * w);
        let mut z = vec![T::zero(); rows * plane];
        for i in 0..x.n {
            // Z (cout·4 × plane) = Wᵀ (cout·4 × cin) · X (cin × plane)
            T::gemm(
                rows,
                self.cin,
                plane,
                T::one(),
                &self.weight.value,
                1,
                rows as isize,
                x.sample(i),
                plane as isize,
                1,
                T::zero(),
                &mut z,
                plane as isize,
                1,
            );
            let y = out.sample_mut(i);
            let ow = 2 * w;
            for co in 0..self.cout {
                let b = self.bias.value[co];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let zr = &z[(co * 4 + dy * 2 + dx) * plane..][..plane];
                        for yy in 0..h {
                            let dst_row = co * 4 * plane + (2 * yy + dy) * ow;
                            for xx in 0..w {
                                y[dst_row + 2 * xx + dx] = zr[yy * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        (out, UpCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: UpCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let x = cache.input;
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let rows = self.cout * 4;
        let ow = 2 * w;
        let mut gx = Tensor::zeros(x.n, self.cin, h, w);
        let mut gz = vec![T::zero(); rows * plane];
        for i in 0..x.n {
            let g = gy.sample(i);
            for co in 0..self.cout {
                let mut bsum = T::zero();
                for dy in 0..2 {
                    for dx in 0..2 {
                        let zr = &mut gz[(co * 4 + dy * 2 + dx) * plane..][..plane];
                        for yy in 0..h {
                            let src_row = co * 4 * plane + (2 * yy + dy) * ow;
                            for xx in 0..w {
                                let v = g[src_row + 2 * xx + dx];
                                zr[yy * w + xx] = v;
                                bsum = bsum + v;
                            }
                        }
                    }
                }
                self.bias.grad[co] = self.bias.grad[co] + bsum;
            }
            // gW (cin × cout·4) += X (cin × plane) · gZᵀ (plane × cout·4)
            T::gemm(
                self.cin,
                plane,
                rows,
                T::one(),
                x.sample(i),
                plane as isize,
                1,
                &gz,
                1,
                plane as isize,
                T::one(),
                &mut self.weight.grad,
                rows as isize,
                1,
            );
            // gX (cin × plane) = W (cin × cout·4) · gZ (cout·4 × plane)
            T::gemm(
                self.cin,
                rows,
                plane,
                T::one(),
                &self.weight.value,
                rows as isize,
                1,
                &gz,
                plane as isize,
                1,
                T::zero(),
                gx.sample_mut(i),
                plane as isize,
                1,
            );
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch normalization over `(n, h, w)` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_stds = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let mut sum = 0.0;
            for i in 0..x.n {
                let s = &x.sample(i)[c * plane..(c + 1) * plane];
                sum += s.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..x.n {
                let s = &x.sample(i)[c * plane..(c + 1) * plane];
                sq += s
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let inv_std = T::of(1.0 / (var + self.eps).sqrt());
            let mean_t = T::of(mean);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..x.n {
                let range = c * plane..(c + 1) * plane;
                let src = &x.sample(i)[range.clone()];
                let xh = &mut xhat.sample_mut(i)[range.clone()];
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - mean_t) * inv_std;
                }
                let xh = &xhat.sample(i)[range.clone()];
                let o = &mut out.sample_mut(i)[range];
                for (d, &s) in o.iter_mut().zip(xh) {
                    *d = g * s + b;
                }
            }
            inv_stds.push(inv_std);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[c] = T::of((1.0 - m) * self.running_mean[c].to_f64().unwrap() + m * mean);
            self.running_var[c] = T::of((1.0 - m) * self.running_var[c].to_f64().unwrap() + m * unbiased);
        }
        (out, BnCache { xhat, inv_std: inv_stds })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.plane();
        let mut out = x.clone();
        for c in 0..x.c {
            let inv_std = T::of(1.0 / (self.running_var[c].to_f64().unwrap() + self.eps).sqrt());
            let scale = self.gamma.value[c] * inv_std;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for i in 0..x.n {
                for v in &mut out.sample_mut(i)[c * plane..(c + 1) * plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, cache: BnCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let plane = gy.plane();
        let count = T::of((gy.n * plane) as f64);
        let mut gx = Tensor::zeros(gy.n, gy.c, gy.h, gy.w);
        for c in 0..gy.c {
            let range = c * plane..(c + 1) * plane;
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..gy.n {
                let g = &gy.sample(i)[range.clone()];
                let xh = &cache.xhat.sample(i)[range.clone()];
                for (&a, &b) in g.iter().zip(xh) {
                    sum_g = sum_g + a;
                    sum_gx = sum_gx + a * b;
                }
            }
            self.gamma.grad[c] = self.gamma.grad[c] + sum_gx;
            self.beta.grad[c] = self.beta.grad[c] + sum_g;
            let k = self.gamma.value[c] * cache.inv_std[c] / count;
            for i in 0..gy.n {
                let g = &gy.sample(i)[range.clone()];
                let xh = &cache.xhat.sample(i)[range.clone()];
                let dst = &mut gx.sample_mut(i)[range.clone()];
                for ((d, &a), &b) in dst.iter_mut().zip(g).zip(xh) {
                    *d = k * (count * a - sum_g - b * sum_gx);
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Backward of ReLU given its output.
pub(crate) fn relu_backward<T: Real>(output: &Tensor<T>, gy: &mut Tensor<T>) {
    for (g, &y) in gy.data.iter_mut().zip(&output.data) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<u32>,
    h: usize,
    w: usize,
}

/// 2×2 max pooling with stride 2.
pub(crate) fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, PoolCache) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut argmax = Vec::with_capacity(out.data.len());
    let plane = x.plane();
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * plane..(nc + 1) * plane];
        let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cands = [base, base + 1, base + x.w, base + x.w + 1];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                dst[y * ow + xx] = src[best];
                argmax.push(best as u32);
            }
        }
    }
    (out, PoolCache { argmax, h: x.h, w: x.w })
}

pub(crate) fn max_pool2_backward<T: Real>(cache: PoolCache, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(gy.n, gy.c, cache.h, cache.w);
    let plane = cache.h * cache.w;
    let oplane = gy.plane();
    for nc in 0..gy.n * gy.c {
        let g = &gy.data[nc * oplane..(nc + 1) * oplane];
        let idx = &cache.argmax[nc * oplane..(nc + 1) * oplane];
        let dst = &mut gx.data[nc * plane..(nc + 1) * plane];
        for (&v, &i) in g.iter().zip(idx) {
            dst[i as usize] = dst[i as usize] + v;
        }
    }
    gx
}
