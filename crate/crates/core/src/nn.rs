//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Activations are `N × C × H × W` row-major `f32` tensors; dense features
//! are the degenerate case `N × D × 1 × 1`. Convolutions lower to im2col and
//! a single-threaded SGEMM, which keeps every result bit-reproducible.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn row(&self, n: usize) -> &[f32] {
        self.item(n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A learnable tensor, or a non-trainable buffer such as running statistics.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    pub trainable: bool,
    /// Whether weight decay applies (off for biases and normalization).
    pub decay: bool,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f32>, decay: bool) -> Self {
        let len = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; len],
            velocity: vec![0.0; len],
            trainable: true,
            decay,
        }
    }

    fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            shape,
            value,
            grad: Vec::new(),
            velocity: Vec::new(),
            trainable: false,
            decay: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Common interface of every layer.
pub trait Module {
    /// Forward pass. In training mode the layer caches what `backward` needs
    /// and normalization layers use batch statistics.
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands, where
/// `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    alpha: f32,
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths bound every access implied by the shapes
    // and strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    cols: Vec<Vec<f32>>,
    in_shape: [usize; 4],
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(vec![out_channels, in_channels, kernel, kernel], weight, true),
            cols: Vec::new(),
            in_shape: [0; 4],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut scratch = vec![0.0; kk * p];
        if train {
            self.cols.clear();
        }
        for i in 0..n {
            self.im2col(x.item(i), h, w, oh, ow, &mut scratch);
            let y = &mut out.data[i * self.out_channels * p..(i + 1) * self.out_channels * p];
            gemm(self.out_channels, kk, p, &self.weight.value, false, &scratch, false, y, 1.0, 0.0);
            if train {
                self.cols.push(scratch.clone());
            }
        }
        self.in_shape = x.shape;
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, _, h, w] = self.in_shape;
        assert_eq!(self.cols.len(), n, "conv backward without a training forward");
        let [_, co, oh, ow] = grad.shape;
        let kk = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(self.in_shape);
        let mut dcols = vec![0.0; kk * p];
        for i in 0..n {
            let dy = grad.item(i);
            gemm(co, p, kk, dy, false, &self.cols[i], true, &mut self.weight.grad, 1.0, 1.0);
            gemm(kk, co, p, &self.weight.value, true, dy, false, &mut dcols, 1.0, 0.0);
            let len = self.in_channels * h * w;
            self.col2im(&dcols, h, w, oh, ow, &mut dx.data[i * len..(i + 1) * len]);
        }
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    /// When set, running statistics are a cumulative average of batch
    /// statistics (used to re-estimate them after weight averaging).
    cumulative: Option<usize>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels], false),
            beta: Param::new(vec![channels], vec![0.0; channels], false),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            cumulative: None,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: [0; 4],
        }
    }

    /// Resets running statistics and switches to cumulative averaging.
    pub fn begin_stat_recompute(&mut self) {
        self.running_mean.value.iter_mut().for_each(|v| *v = 0.0);
        self.running_var.value.iter_mut().for_each(|v| *v = 1.0);
        self.cumulative = Some(0);
    }

    pub fn end_stat_recompute(&mut self) {
        self.cumulative = None;
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels, "batch-norm channels");
        let hw = h * w;
        let count = (n * hw) as f32;
        let mut out = Tensor::zeros(x.shape);
        if !train {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        out.data[j] = x.data[j] * scale + shift;
                    }
                }
            }
            return out;
        }
        self.xhat = vec![0.0; x.data.len()];
        self.inv_std = vec![0.0; c];
        self.shape = x.shape;
        let step = self.cumulative.map(|k| {
            self.cumulative = Some(k + 1);
            1.0 / (k + 1) as f32
        });
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &v in &x.data[base..base + hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = (sum / count as f64) as f32;
            let var = ((sq / count as f64) - (mean as f64) * (mean as f64)).max(0.0) as f32;
            let inv = 1.0 / (var + self.eps).sqrt();
            self.inv_std[ch] = inv;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (x.data[j] - mean) * inv;
                    self.xhat[j] = xh;
                    out.data[j] = xh * self.gamma.value[ch] + self.beta.value[ch];
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = step.unwrap_or(self.momentum);
            let rm = &mut self.running_mean.value[ch];
            *rm += m * (mean - *rm);
            let rv = &mut self.running_var.value[ch];
            *rv += m * (unbiased - *rv);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let count = (n * hw) as f32;
        let mut dx = Tensor::zeros(self.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    sum_dy += grad.data[j];
                    sum_dy_xhat += grad.data[j] * self.xhat[j];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let k = g * self.inv_std[ch] / count;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    dx.data[j] = k * (count * grad.data[j] - sum_dy - self.xhat[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Subtracts the per-feature batch mean of `N × D` rows; inference uses a
/// running mean.
#[derive(Clone, Debug)]
pub struct BatchCenter {
    pub running_mean: Param,
    momentum: f32,
}

impl BatchCenter {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: Param::buffer(vec![features], vec![0.0; features]),
            momentum: 0.1,
        }
    }
}

impl Module for BatchCenter {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let d = x.item_len();
        assert_eq!(d, self.running_mean.value.len(), "batch-center width");
        let mut out = x.clone();
        let mean: Vec<f32> = if train {
            let n = x.batch() as f32;
            let mut mean = vec![0.0f32; d];
            for row in x.data.chunks_exact(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
            }
            for (rm, m) in self.running_mean.value.iter_mut().zip(&mean) {
                *rm += self.momentum * (m - *rm);
            }
            mean
        } else {
            self.running_mean.value.clone()
        };
        for row in out.data.chunks_exact_mut(d) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let d = grad.item_len();
        let n = grad.batch() as f32;
        let mut mean = vec![0.0f32; d];
        for row in grad.data.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, g)| *m += g / n);
        }
        let mut dx = grad.clone();
        for row in dx.data.chunks_exact_mut(d) {
            row.iter_mut().zip(&mean).for_each(|(g, m)| *g -= m);
        }
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Module for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let data: Vec<f32> = x.data.iter().map(|v| v.max(0.0)).collect();
        if train {
            self.mask = x.data.iter().map(|v| *v > 0.0).collect();
        }
        Tensor { shape: x.shape, data }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let data = grad
            .data
            .iter()
            .zip(&self.mask)
            .map(|(g, m)| if *m { *g } else { 0.0 })
            .collect();
        Tensor { shape: grad.shape, data }
    }

    fn params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param)>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param)>) {}
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
#[derive(Clone, Debug, Default)]
pub struct AvgPool2 {
    in_shape: [usize; 4],
}

impl Module for AvgPool2 {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = 0.25 * s;
                }
            }
        }
        self.in_shape = x.shape;
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(self.in_shape);
        for plane in 0..n * c {
            let g = &grad.data[plane * oh * ow..(plane + 1) * oh * ow];
            let d = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let v = 0.25 * g[y * ow + xx];
                    d[2 * y * w + 2 * xx] = v;
                    d[2 * y * w + 2 * xx + 1] = v;
                    d[(2 * y + 1) * w + 2 * xx] = v;
                    d[(2 * y + 1) * w + 2 * xx + 1] = v;
                }
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param)>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param)>) {}
}

/// Spatial mean: `N × C × H × W → N × C × 1 × 1`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    in_shape: [usize; 4],
}

impl Module for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let data = x
            .data
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f32>() / hw as f32)
            .collect();
        self.in_shape = x.shape;
        Tensor { shape: [n, c, 1, 1], data }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [_, _, h, w] = self.in_shape;
        let hw = h * w;
        let mut dx = Tensor::zeros(self.in_shape);
        for (plane, g) in dx.data.chunks_exact_mut(hw).zip(&grad.data) {
            plane.iter_mut().for_each(|v| *v = g / hw as f32);
        }
        dx
    }

    fn params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param)>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param)>) {}
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Vec<f32>,
    batch: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = bias.then(|| {
            let b = (0..out_features).map(|_| rng.random_range(-bound..bound)).collect();
            Param::new(vec![out_features], b, false)
        });
        Self {
            in_features,
            out_features,
            weight: Param::new(vec![out_features, in_features], weight, true),
            bias,
            input: Vec::new(),
            batch: 0,
        }
    }
}

impl Module for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input width");
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        if let Some(b) = &self.bias {
            for row in out.data.chunks_exact_mut(self.out_features) {
                row.copy_from_slice(&b.value);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            &mut out.data,
            1.0,
            beta,
        );
        if train {
            self.input = x.data.clone();
        }
        self.batch = n;
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let n = self.batch;
        assert_eq!(self.input.len(), n * self.in_features, "linear backward without a training forward");
        gemm(
            self.out_features,
            n,
            self.in_features,
            &grad.data,
            true,
            &self.input,
            false,
            &mut self.weight.grad,
            1.0,
            1.0,
        );
        if let Some(b) = &mut self.bias {
            for row in grad.data.chunks_exact(self.out_features) {
                for (g, r) in b.grad.iter_mut().zip(row) {
                    *g += r;
                }
            }
        }
        let mut dx = Tensor::zeros([n, self.in_features, 1, 1]);
        gemm(
            n,
            self.out_features,
            self.in_features,
            &grad.data,
            false,
            &self.weight.value,
            false,
            &mut dx.data,
            1.0,
            0.0,
        );
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

// ---------------------------------------------------------------------------
// Densely connected block

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    let (la, lb) = (ca * h * w, cb * h * w);
    for i in 0..n {
        let dst = &mut out.data[i * (la + lb)..(i + 1) * (la + lb)];
        dst[..la].copy_from_slice(a.item(i));
        dst[la..].copy_from_slice(b.item(i));
    }
    out
}

fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.shape;
    let (la, lb) = (first * h * w, (c - first) * h * w);
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    for i in 0..n {
        let src = x.item(i);
        a.data[i * la..(i + 1) * la].copy_from_slice(&src[..la]);
        b.data[i * lb..(i + 1) * lb].copy_from_slice(&src[la..]);
    }
    (a, b)
}

/// Pre-activation dense block: each layer sees the concatenation of the
/// block input and every earlier layer's output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    layers: Vec<(BatchNorm2d, Relu, Conv2d)>,
}

impl DenseBlock {
    pub fn new(in_channels: usize, growth: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let c = in_channels + i * growth;
                (BatchNorm2d::new(c), Relu::default(), Conv2d::new(c, growth, 3, 1, 1, rng))
            })
            .collect();
        Self {
            in_channels,
            growth,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub(crate) fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        self.layers.iter_mut().map(|(bn, _, _)| bn)
    }
}

impl Module for DenseBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut features = x.clone();
        for (bn, relu, conv) in &mut self.layers {
            let y = conv.forward(&relu.forward(&bn.forward(&features, train), train), train);
            features = concat_channels(&features, &y);
        }
        features
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut grad = grad.clone();
        for (bn, relu, conv) in self.layers.iter_mut().rev() {
            let prefix_channels = grad.shape[1] - self.growth;
            let (mut g_prefix, g_new) = split_channels(&grad, prefix_channels);
            let g_in = bn.backward(&relu.backward(&conv.backward(&g_new)));
            for (a, b) in g_prefix.data.iter_mut().zip(&g_in.data) {
                *a += b;
            }
            grad = g_prefix;
        }
        grad
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, (bn, _, conv)) in self.layers.iter().enumerate() {
            bn.params(&join(prefix, &format!("{i}.bn")), out);
            conv.params(&join(prefix, &format!("{i}.conv")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, (bn, _, conv)) in self.layers.iter_mut().enumerate() {
            bn.params_mut(&join(prefix, &format!("{i}.bn")), out);
            conv.params_mut(&join(prefix, &format!("{i}.conv")), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Sequential container

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu(Relu),
    AvgPool(AvgPool2),
    Dense(DenseBlock),
}

impl Module for Layer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Relu(l) => l.forward(x, train),
            Layer::AvgPool(l) => l.forward(x, train),
            Layer::Dense(l) => l.forward(x, train),
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Layer::Conv(l) => l.params(prefix, out),
            Layer::BatchNorm(l) => l.params(prefix, out),
            Layer::Dense(l) => l.params(prefix, out),
            Layer::Relu(_) | Layer::AvgPool(_) => {}
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Layer::Conv(l) => l.params_mut(prefix, out),
            Layer::BatchNorm(l) => l.params_mut(prefix, out),
            Layer::Dense(l) => l.params_mut(prefix, out),
            Layer::Relu(_) | Layer::AvgPool(_) => {}
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(bn) => out.push(bn),
                Layer::Dense(block) => out.extend(block.batch_norms_mut()),
                _ => {}
            }
        }
        out
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&join(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Row normalization

/// Scales each row to unit L2 norm; `eps` keeps zero rows finite.
pub fn l2_normalize_rows(x: &Tensor, eps: f32) -> (Tensor, Vec<f32>) {
    let d = x.item_len();
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.batch());
    for row in out.data.chunks_exact_mut(d) {
        let norm = (row.iter().map(|v| v * v).sum::<f32>() + eps).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Gradient of [`l2_normalize_rows`]: `dx = (dz - z (z·dz)) / norm`.
pub fn l2_normalize_rows_backward(z: &Tensor, norms: &[f32], dz: &Tensor) -> Tensor {
    let d = z.item_len();
    let mut dx = dz.clone();
    for ((zr, gr), norm) in z.data.chunks_exact(d).zip(dx.data.chunks_exact_mut(d)).zip(norms) {
        let dot: f32 = zr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for (g, zv) in gr.iter_mut().zip(zr) {
            *g = (*g - zv * dot) / norm;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Optimization

/// Stochastic gradient descent with momentum and decoupled-from-bias weight decay.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn step(&self, params: &mut [(String, &mut Param)], lr: f32) {
        for (_, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(p.velocity.iter_mut()) {
                let d = g + wd * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

pub fn zero_grads(params: &mut [(String, &mut Param)]) {
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
}

/// Linear ramp over the first `warmup` steps, then cosine decay from `base`
/// to zero at step `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize, warmup: usize) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    if total <= warmup {
        return base;
    }
    let t = (step - warmup).min(total - warmup) as f32 / (total - warmup) as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks input and parameter gradients of `module` against central
    /// differences of the scalar `sum(forward(x) * probe)`.
    fn check_module<M: Module>(module: &mut M, x: &Tensor, tol: f32) {
        let y = module.forward(x, true);
        let probe = random_tensor(y.shape, 99);
        let mut params = Vec::new();
        module.params_mut("", &mut params);
        zero_grads(&mut params);
        let y = module.forward(x, true);
        assert_eq!(y.shape, probe.shape);
        let dx = module.backward(&probe);

        let objective = |m: &mut M, input: &Tensor| -> f64 {
            let out = m.forward(input, true);
            out.data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        let mut worst = 0.0f32;
        for i in (0..x.data.len()).step_by((x.data.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = ((objective(module, &xp) - objective(module, &xm)) / (2.0 * h as f64)) as f32;
            let err = (fd - dx.data[i]).abs() / (fd.abs() + dx.data[i].abs()).max(1e-2);
            worst = worst.max(err);
        }
        let mut names_grads = Vec::new();
        {
            let mut params = Vec::new();
            module.params_mut("", &mut params);
            for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
                names_grads.push((name.clone(), p.grad.clone()));
            }
        }
        for (name, grad) in names_grads {
            for i in (0..grad.len()).step_by((grad.len() / 7).max(1)) {
                let eval = |m: &mut M, delta: f32| {
                    let mut ps = Vec::new();
                    m.params_mut("", &mut ps);
                    let p = ps.into_iter().find(|(n, _)| *n == name).unwrap().1;
                    p.value[i] += delta;
                };
                eval(module, h);
                let fp = objective(module, x);
                eval(module, -2.0 * h);
                let fm = objective(module, x);
                eval(module, h);
                let fd = ((fp - fm) / (2.0 * h as f64)) as f32;
                let err = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-2);
                worst = worst.max(err);
            }
        }
        assert!(worst < tol, "worst relative gradient error {worst}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = seed::rng(1);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        check_module(&mut conv, &random_tensor([2, 2, 5, 5], 2), 1e-2);
        let mut conv = Conv2d::new(3, 2, 1, 1, 0, &mut rng);
        check_module(&mut conv, &random_tensor([1, 3, 4, 4], 3), 1e-2);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        check_module(&mut bn, &random_tensor([3, 3, 2, 2], 4), 2e-2);
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut rng = seed::rng(5);
        let mut lin = Linear::new(6, 4, true, &mut rng);
        check_module(&mut lin, &random_tensor([3, 6, 1, 1], 6), 1e-2);
        check_module(&mut AvgPool2::default(), &random_tensor([2, 2, 4, 4], 7), 1e-2);
        check_module(&mut GlobalAvgPool::default(), &random_tensor([2, 3, 3, 3], 8), 1e-2);
    }

    #[test]
    fn dense_block_gradients() {
        let mut rng = seed::rng(19);
        let mut block = DenseBlock::new(2, 2, 2, &mut rng);
        assert_eq!(block.out_channels(), 6);
        check_module(&mut block, &random_tensor([2, 2, 4, 4], 10), 3e-2);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = seed::rng(11);
        let mut conv = Conv2d::new(2, 2, 3, 1, 1, &mut rng);
        let x = random_tensor([1, 2, 4, 4], 12);
        let y = conv.forward(&x, false);
        for co in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    let wv = conv.weight.value[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    acc += wv * x.data[(ci * 4 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data[(co * 4 + oy) * 4 + ox];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn normalization_backward_matches_differences() {
        let x = random_tensor([2, 5, 1, 1], 13);
        let dz = random_tensor([2, 5, 1, 1], 14);
        let (z, norms) = l2_normalize_rows(&x, 1e-12);
        let dx = l2_normalize_rows_backward(&z, &norms, &dz);
        let f = |t: &Tensor| -> f64 {
            let (zz, _) = l2_normalize_rows(t, 1e-12);
            zz.data.iter().zip(&dz.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += 1e-3;
            let mut m = x.clone();
            m.data[i] -= 1e-3;
            let fd = (f(&p) - f(&m)) / 2e-3;
            assert!((fd as f32 - dx.data[i]).abs() < 2e-3);
        }
    }

    #[test]
    fn running_stats_cumulative_mode() {
        let mut bn = BatchNorm2d::new(1);
        bn.begin_stat_recompute();
        let a = Tensor::from_vec([2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let b = Tensor::from_vec([2, 1, 1, 1], vec![4.0, 6.0]).unwrap();
        bn.forward(&a, true);
        bn.forward(&b, true);
        bn.end_stat_recompute();
        assert!((bn.running_mean.value[0] - 3.0).abs() < 1e-6);
        assert!((bn.running_var.value[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10, 0), 0.1);
        assert!(cosine_lr(0.1, 10, 10, 0).abs() < 1e-8);
        assert!((cosine_lr(0.1, 5, 10, 0) - 0.05).abs() < 1e-7);
    }

    #[test]
    fn warmup_ramps_linearly_then_decays() {
        assert!((cosine_lr(0.1, 0, 20, 4) - 0.025).abs() < 1e-7);
        assert!((cosine_lr(0.1, 3, 20, 4) - 0.1).abs() < 1e-7);
        assert_eq!(cosine_lr(0.1, 4, 20, 4), 0.1);
        assert!((cosine_lr(0.1, 12, 20, 4) - 0.05).abs() < 1e-7);
        assert!(cosine_lr(0.1, 20, 20, 4).abs() < 1e-8);
    }
}
