//! Layer zoo with explicit reverse-mode gradients.
//!
//! Every layer caches what its backward pass needs during
//! [`Layer::forward_train`]; [`Layer::forward_eval`] is cache-free and takes
//! `&self`, so a trained model can serve inference from several threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Scalar, Tensor};
use crate::par;

/// Samples per work unit in batched kernels. Partial gradient sums are
/// reduced in chunk order, which keeps results independent of thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running statistics are stored as non-trainable parameters.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }
}

pub trait Layer<T: Scalar>: Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T>;

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T>;

    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(normal.sample(rng))).collect(),
    )
}

// ---------------------------------------------------------------------------

/// 2-D convolution over `[N, C, H, W]`, lowered to im2col + GEMM per sample.
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = cin * kernel.0 * kernel.1;
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::new(he_normal(&[cout, k], k, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            input: None,
        }
    }

    /// Square `k×k` kernel with "same"-style padding `k/2`.
    pub fn square(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(cin, cout, (k, k), (stride, stride), (k / 2, k / 2), false, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn cols_len(&self, oh: usize, ow: usize) -> usize {
        self.cin * self.kernel.0 * self.kernel.1 * oh * ow
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let p = oh * ow;
        for c in 0..self.cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let y = (oy * sh + i) as isize - ph as isize;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if y < 0 || y >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * h + y as usize) * w..(c * h + y as usize + 1) * w];
                        for (ox, v) in out.iter_mut().enumerate() {
                            let xx = (ox * sw + j) as isize - pw as isize;
                            *v = if xx < 0 || xx >= w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        let p = oh * ow;
        dx.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let y = (oy * sh + i) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = (c * h + y as usize) * w;
                        for ox in 0..ow {
                            let xx = (ox * sw + j) as isize - pw as isize;
                            if xx >= 0 && xx < w as isize {
                                dx[base + xx as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        assert_eq!(x.shape[1], self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = self.cin * self.kernel.0 * self.kernel.1;
        let mut out = Tensor::zeros(&[n, self.cout, oh, ow]);
        let item_out = self.cout * p;
        par::for_each_chunk_mut(&mut out.data, item_out, |i, y| {
            let mut cols = vec![T::zero(); self.cols_len(oh, ow)];
            self.im2col(x.item(i), h, w, oh, ow, &mut cols);
            gemm(false, false, self.cout, p, k, &self.weight.value.data, &cols, T::zero(), y);
            if let Some(b) = &self.bias {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    let bv = b.value.data[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
        out
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward_train(&mut self, x: &Tensor<T>, _rng: &mut ChaCha8Rng) -> Tensor<T> {
        let y = self.compute(x);
        self.input = Some(x.clone());
        y
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward_train");
        let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = self.cin * self.kernel.0 * self.kernel.1;
        let item_in = x.item_len();
        let chunks = n.div_ceil(CHUNK);
        let this = &*self;
        let partials = par::map_range(chunks, |ci| {
            let mut dw = vec![T::zero(); this.cout * k];
            let mut db = vec![T::zero(); this.cout];
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut dx = vec![T::zero(); (hi - lo) * item_in];
            let mut cols = vec![T::zero(); this.cols_len(oh, ow)];
            let mut dcols = vec![T::zero(); this.cols_len(oh, ow)];
            for i in lo..hi {
                let dy = grad.item(i);
                this.im2col(x.item(i), h, w, oh, ow, &mut cols);
                gemm(false, true, this.cout, k, p, dy, &cols, T::one(), &mut dw);
                gemm(true, false, k, p, this.cout, &this.weight.value.data, dy, T::zero(), &mut dcols);
                let off = (i - lo) * item_in;
                this.col2im(&dcols, h, w, oh, ow, &mut dx[off..off + item_in]);
                if this.bias.is_some() {
                    for (co, row) in dy.chunks(p).enumerate() {
                        db[co] += row.iter().copied().sum::<T>();
                    }
                }
            }
            (dw, db, dx)
        });
        let mut dx_all = Vec::with_capacity(n * item_in);
        for (dw, db, dx) in partials {
            for (g, v) in self.weight.grad.data.iter_mut().zip(&dw) {
                *g += *v;
            }
            if let Some(b) = &mut self.bias {
                for (g, v) in b.grad.data.iter_mut().zip(&db) {
                    *g += *v;
                }
            }
            dx_all.extend(dx);
        }
        Tensor::new(x.shape.clone(), dx_all)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------

/// Batch normalization over `[N, C, ...]`, statistics per channel.
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let ones = Tensor::new(vec![channels], vec![T::one(); channels]);
        Self {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            gamma: Param::new(ones.clone()),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(ones),
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor<T>) -> (usize, usize) {
        assert_eq!(x.shape[1], self.channels, "batch-norm channels");
        (x.shape[0], x.item_len() / self.channels)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[f64], inv_std: &[f64]) -> (Tensor<T>, Tensor<T>) {
        let (n, s) = self.dims(x);
        let mut x_hat = Tensor::zeros(&x.shape);
        let mut y = Tensor::zeros(&x.shape);
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * s;
                let g = self.gamma.value.data[c].f64();
                let be = self.beta.value.data[c].f64();
                for i in off..off + s {
                    let h = (x.data[i].f64() - mean[c]) * inv_std[c];
                    x_hat.data[i] = T::of(h);
                    y.data[i] = T::of(g * h + be);
                }
            }
        }
        (x_hat, y)
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batch_norm"
    }

    fn forward_train(&mut self, x: &Tensor<T>, _rng: &mut ChaCha8Rng) -> Tensor<T> {
        let (n, s) = self.dims(x);
        let m = (n * s) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * s;
                mean[c] += x.data[off..off + s].iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * s;
                var[c] += x.data[off..off + s]
                    .iter()
                    .map(|v| (v.f64() - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (x_hat, y) = self.normalize(x, &mean, &inv_std);
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            let rm = &mut self.running_mean.value.data[c];
            *rm = T::of((1.0 - self.momentum) * rm.f64() + self.momentum * mean[c]);
            let rv = &mut self.running_var.value.data[c];
            *rv = T::of((1.0 - self.momentum) * rv.f64() + self.momentum * var[c] * unbias);
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mean: Vec<f64> = self.running_mean.value.data.iter().map(|v| v.f64()).collect();
        let inv_std: Vec<f64> = self
            .running_var
            .value
            .data
            .iter()
            .map(|v| 1.0 / (v.f64() + self.eps).sqrt())
            .collect();
        self.normalize(x, &mean, &inv_std).1
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward without forward_train");
        let (n, s) = self.dims(grad);
        let m = (n * s) as f64;
        let mut sum_dy = vec![0.0; self.channels];
        let mut sum_dy_xhat = vec![0.0; self.channels];
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * s;
                for i in off..off + s {
                    let dy = grad.data[i].f64();
                    sum_dy[c] += dy;
                    sum_dy_xhat[c] += dy * cache.x_hat.data[i].f64();
                }
            }
        }
        let mut dx = Tensor::zeros(&grad.shape);
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * s;
                let k = self.gamma.value.data[c].f64() * cache.inv_std[c] / m;
                for i in off..off + s {
                    let v = m * grad.data[i].f64()
                        - sum_dy[c]
                        - cache.x_hat.data[i].f64() * sum_dy_xhat[c];
                    dx.data[i] = T::of(k * v);
                }
            }
        }
        for c in 0..self.channels {
            self.gamma.grad.data[c] += T::of(sum_dy_xhat[c]);
            self.beta.grad.data[c] += T::of(sum_dy[c]);
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward_train(&mut self, x: &Tensor<T>, _rng: &mut ChaCha8Rng) -> Tensor<T> {
        self.mask = Some(x.data.iter().map(|&v| v > T::zero()).collect());
        self.forward_eval(x)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("backward without forward_train");
        let data = grad
            .data
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::new(grad.shape.clone(), data)
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in training.
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        Self { rate, mask: None }
    }

    /// Uses an explicit mask (already scaled) for the next training pass.
    pub fn forward_with_mask(&mut self, x: &Tensor<T>, mask: Vec<T>) -> Tensor<T> {
        let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape.clone(), data)
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        if self.rate == 0.0 {
            self.mask = Some(vec![T::one(); x.len()]);
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.forward_with_mask(x, mask)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("backward without forward_train");
        let data = grad.data.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Tensor::new(grad.shape.clone(), data)
    }
}

// ---------------------------------------------------------------------------

/// `[N, C, ...] -> [N, C]` spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward_train(&mut self, x: &Tensor<T>, _rng: &mut ChaCha8Rng) -> Tensor<T> {
        self.input_shape = Some(x.shape.clone());
        self.forward_eval(x)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c) = (x.shape[0], x.shape[1]);
        let s = x.item_len() / c;
        let inv = T::of(1.0 / s as f64);
        let data = x
            .data
            .chunks(s)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor::new(vec![n, c], data)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("backward without forward_train");
        let s: usize = shape[2..].iter().product();
        let inv = T::of(1.0 / s as f64);
        let mut data = Vec::with_capacity(grad.len() * s);
        for &g in &grad.data {
            data.extend(std::iter::repeat(g * inv).take(s));
        }
        Tensor::new(shape, data)
    }
}

// ---------------------------------------------------------------------------

/// Fully connected `[N, in] -> [N, out]`.
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(he_normal(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward_train(&mut self, x: &Tensor<T>, _rng: &mut ChaCha8Rng) -> Tensor<T> {
        self.input = Some(x.clone());
        self.forward_eval(x)
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape[0];
        assert_eq!(x.item_len(), self.inputs, "linear input width");
        let mut y = Tensor::zeros(&[n, self.outputs]);
        for row in y.data.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value.data);
        }
        gemm(false, true, n, self.outputs, self.inputs, &x.data, &self.weight.value.data, T::one(), &mut y.data);
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("backward without forward_train");
        let n = x.shape[0];
        gemm(true, false, self.outputs, self.inputs, n, &grad.data, &x.data, T::one(), &mut self.weight.grad.data);
        for row in grad.data.chunks(self.outputs) {
            for (g, &v) in self.bias.grad.data.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&x.shape);
        gemm(false, false, n, self.inputs, self.outputs, &grad.data, &self.weight.value.data, T::zero(), &mut dx.data);
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------

/// Ordered stack of layers.
pub struct Sequential<T> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Self { layers }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_train(&h, rng);
        }
        h
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward_eval(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, i), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, i), f);
        }
    }
}

fn join(prefix: &str, i: usize) -> String {
    if prefix.is_empty() {
        i.to_string()
    } else {
        format!("{prefix}.{i}")
    }
}

/// `y = body(x) + x`.
pub struct Residual<T> {
    pub body: Sequential<T>,
}

impl<T: Scalar> Residual<T> {
    /// Two 3×3 convolutions with batch norm, ReLU between them.
    pub fn basic_block(width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            body: Sequential::new(vec![
                Box::new(Conv2d::square(width, width, 3, 1, rng)),
                Box::new(BatchNorm::new(width)),
                Box::new(Relu::new()),
                Box::new(Conv2d::square(width, width, 3, 1, rng)),
                Box::new(BatchNorm::new(width)),
            ]),
        }
    }
}

impl<T: Scalar> Layer<T> for Residual<T> {
    fn kind(&self) -> &'static str {
        "residual"
    }

    fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let mut y = self.body.forward_train(x, rng);
        y.add_assign(x);
        y
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.body.forward_eval(x);
        y.add_assign(x);
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = self.body.backward(grad);
        g.add_assign(grad);
        g
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit(&format!("{prefix}.body"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_mut(&format!("{prefix}.body"), f);
    }
}
