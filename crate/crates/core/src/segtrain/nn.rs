//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are stored channel-major, `[C][N][H][W]`: a channel of the
//! whole batch is one contiguous block. Batch norm then works on contiguous
//! slices, channel concatenation is a plain append, and a convolution over
//! the batch is a single GEMM against the im2col matrix.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Activation tensor in `[C][N][H][W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel across the batch.
    pub fn channel_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let l = self.channel_len();
        &self.data[c * l..(c + 1) * l]
    }

    /// Plane of channel `c`, sample `n`.
    pub fn plane(&self, c: usize, n: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (c * self.batch + n) * p;
        &self.data[start..start + p]
    }

    fn same_shape(&self) -> Self {
        Self::zeros(self.channels, self.batch, self.height, self.width)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through these
    // strides lies inside the three slices, and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A trainable buffer with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Square convolution with stride 1 and "same" zero padding (odd kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in * k * k]`
    pub weight: Param,
    pub bias: Param,
}

pub struct ConvCache {
    cols: Vec<f32>,
    batch: usize,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, gain: f32, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let std = gain / (fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (n, h, w) = (x.batch, x.height, x.width);
        let k = self.kernel;
        let half = (k / 2) as isize;
        let cl = n * h * w;
        let mut cols = vec![0.0f32; self.patch_len() * cl];
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * cl..(row + 1) * cl];
                    let dy = ky as isize - half;
                    let dx = kx as isize - half;
                    let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                    for s in 0..n {
                        let plane = x.plane(ci, s);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                            let dst = &mut dst_row[(s * h + y) * w..(s * h + y + 1) * w];
                            let shift = (x0 as isize + dx) as usize;
                            dst[x0..x1].copy_from_slice(&src[shift..shift + (x1 - x0)]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], batch: usize, h: usize, w: usize) -> Tensor {
        let k = self.kernel;
        let half = (k / 2) as isize;
        let mut dx_t = Tensor::zeros(self.in_channels, batch, h, w);
        let cl = batch * h * w;
        let plane = h * w;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cols[row * cl..(row + 1) * cl];
                    let dy = ky as isize - half;
                    let dx = kx as isize - half;
                    let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                    for s in 0..batch {
                        let base = (ci * batch + s) * plane;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &src_row[(s * h + y) * w..(s * h + y + 1) * w];
                            let shift = (x0 as isize + dx) as usize;
                            let dst = &mut dx_t.data[base + sy as usize * w + shift..base + sy as usize * w + shift + (x1 - x0)];
                            for (d, v) in dst.iter_mut().zip(&src[x0..x1]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dx_t
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let cols = if self.kernel == 1 { x.data.clone() } else { self.im2col(x) };
        let cl = x.channel_len();
        let mut y = Tensor::zeros(self.out_channels, x.batch, x.height, x.width);
        for (o, chunk) in y.data.chunks_exact_mut(cl).enumerate() {
            chunk.fill(self.bias.value[o]);
        }
        gemm(self.out_channels, self.patch_len(), cl, &self.weight.value, false, &cols, false, 1.0, &mut y.data);
        (
            y,
            ConvCache {
                cols,
                batch: x.batch,
                height: x.height,
                width: x.width,
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, cache: ConvCache, need_input_grad: bool) -> Option<Tensor> {
        let cl = dy.channel_len();
        for (o, chunk) in dy.data.chunks_exact(cl).enumerate() {
            self.bias.grad[o] += chunk.iter().sum::<f32>();
        }
        let kl = self.patch_len();
        gemm(self.out_channels, cl, kl, &dy.data, false, &cache.cols, true, 1.0, &mut self.weight.grad);
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; kl * cl];
        gemm(kl, self.out_channels, cl, &self.weight.value, true, &dy.data, false, 0.0, &mut dcols);
        if self.kernel == 1 {
            return Some(Tensor {
                channels: self.in_channels,
                batch: cache.batch,
                height: cache.height,
                width: cache.width,
                data: dcols,
            });
        }
        Some(self.col2im(&dcols, cache.batch, cache.height, cache.width))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Per-channel batch normalization over `N x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, Option<BnCache>) {
        let cl = x.channel_len();
        let mut y = x.same_shape();
        if !train {
            for c in 0..x.channels {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let (g, b, mu) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
                for (o, v) in y.data[c * cl..(c + 1) * cl].iter_mut().zip(x.channel(c)) {
                    *o = g * (v - mu) * inv + b;
                }
            }
            return (y, None);
        }
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; x.channels];
        for c in 0..x.channels {
            let xs = x.channel(c);
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / cl as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cl as f64;
            let inv = 1.0 / (var as f32 + self.eps).sqrt();
            inv_std[c] = inv;
            let (g, b, m) = (self.gamma.value[c], self.beta.value[c], mean as f32);
            let xh = &mut xhat[c * cl..(c + 1) * cl];
            for ((o, h), &v) in y.data[c * cl..(c + 1) * cl].iter_mut().zip(xh.iter_mut()).zip(xs) {
                *h = (v - m) * inv;
                *o = g * *h + b;
            }
            let unbiased = if cl > 1 { var * cl as f64 / (cl - 1) as f64 } else { var };
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * m;
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * unbiased as f32;
        }
        (y, Some(BnCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, dy: &Tensor, cache: BnCache) -> Tensor {
        let cl = dy.channel_len();
        let m = cl as f32;
        let mut dx = dy.same_shape();
        for c in 0..dy.channels {
            let d = dy.channel(c);
            let xh = &cache.xhat[c * cl..(c + 1) * cl];
            let sum_dy: f32 = d.iter().sum();
            let sum_dy_xh: f32 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * cache.inv_std[c] / m;
            for ((o, &g), &h) in dx.data[c * cl..(c + 1) * cl].iter_mut().zip(d).zip(xh) {
                *o = k * (m * g - sum_dy - h * sum_dy_xh);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given the layer output.
pub fn relu_backward(dy: &mut Tensor, out: &Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the argmax offsets for backward.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let mut y = Tensor::zeros(x.channels, x.batch, h2, w2);
    let mut arg = vec![0u32; y.data.len()];
    let w = x.width;
    for (p, (src, dst)) in x
        .data
        .chunks_exact(x.plane_len())
        .zip(y.data.chunks_exact_mut(h2 * w2))
        .enumerate()
    {
        let base = p * x.plane_len();
        for r in 0..h2 {
            for c in 0..w2 {
                let i0 = 2 * r * w + 2 * c;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[r * w2 + c] = src[best];
                arg[p * h2 * w2 + r * w2 + c] = (base + best) as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u32], channels: usize, batch: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(channels, batch, h, w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height, x.width);
    let mut y = Tensor::zeros(x.channels, x.batch, 2 * h, 2 * w);
    for (src, dst) in x.data.chunks_exact(h * w).zip(y.data.chunks_exact_mut(4 * h * w)) {
        for r in 0..2 * h {
            let srow = &src[(r / 2) * w..(r / 2 + 1) * w];
            for (c, d) in dst[r * 2 * w..(r + 1) * 2 * w].iter_mut().enumerate() {
                *d = srow[c / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Tensor::zeros(dy.channels, dy.batch, h, w);
    for (src, dst) in dy.data.chunks_exact(4 * h * w).zip(dx.data.chunks_exact_mut(h * w)) {
        for r in 0..2 * h {
            for c in 0..2 * w {
                dst[(r / 2) * w + c / 2] += src[r * 2 * w + c];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.batch, a.height, a.width), (b.batch, b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        batch: a.batch,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Inverse of [`concat`] for gradients: splits off the first `first` channels.
pub fn split_channels(x: Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * x.channel_len();
    let mut head = x.data;
    let tail = head.split_off(cut);
    (
        Tensor {
            channels: first,
            batch: x.batch,
            height: x.height,
            width: x.width,
            data: head,
        },
        Tensor {
            channels: x.channels - first,
            batch: x.batch,
            height: x.height,
            width: x.width,
            data: tail,
        },
    )
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}
