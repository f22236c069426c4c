//! Forward and backward kernels for the layers the U-Net needs.
//!
//! Convolutions use "same, then stride" zero padding: an odd kernel `k` is
//! padded by `k / 2` on every side, so a stride-`s` convolution maps a
//! spatial size `n` to `ceil(n / s)`. The transposed convolution is the exact
//! linear adjoint of that map from `s * n` down to `n`, so it maps `n` to
//! `s * n`. Both lower to im2col plus a GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_shape, Error, Result};
use crate::nn::{Mode, Real, Tensor};

/// Geometry of one stride-`s` convolution from `(in_h, in_w)` to
/// `(out_h, out_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn conv(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 || stride == 0 {
            return Err(Error::param(format!(
                "kernel must be odd and stride positive (kernel {kernel}, stride {stride})"
            )));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::param("convolution input has an empty spatial dim"));
        }
        let pad = kernel / 2;
        Ok(Self {
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose adjoint maps `(h, w)` to
    /// `(stride * h, stride * w)`.
    pub fn transpose(h: usize, w: usize, kernel: usize, stride: usize) -> Result<Self> {
        let g = Self::conv(stride * h, stride * w, kernel, stride)?;
        if g.out_h != h || g.out_w != w {
            return Err(Error::param(format!(
                "kernel {kernel} with stride {stride} has no exact transpose"
            )));
        }
        Ok(g)
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Output columns `ox` for which input column `ox * s + kx - pad` is in range.
    fn valid_range(&self, offset: usize, out: usize, input: usize) -> (usize, usize) {
        // ox * s + offset - pad in [0, input)
        let lo = self.pad.saturating_sub(offset).div_ceil(self.stride);
        let hi = (input + self.pad)
            .saturating_sub(offset)
            .div_ceil(self.stride);
        (lo.min(out), hi.min(out))
    }
}

/// `(channels, in_h, in_w)` to `(channels * k * k, out_h * out_w)`.
fn im2col<T: Real>(x: &[T], channels: usize, g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let out_len = g.out_len();
    for c in 0..channels {
        let plane = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.out_h, g.in_h);
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * out_len..][..out_len];
                let (ox_lo, ox_hi) = g.valid_range(kx, g.out_w, g.in_w);
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < oy_lo || oy >= oy_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    for (ox, d) in dst.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                        *d = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `x`.
fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry, x: &mut [T]) {
    let k = g.kernel;
    let out_len = g.out_len();
    for c in 0..channels {
        let plane = &mut x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.out_h, g.in_h);
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * out_len..][..out_len];
                let (ox_lo, ox_hi) = g.valid_range(kx, g.out_w, g.in_w);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] = dst[ox * g.stride + kx - g.pad] + src[ox];
                    }
                }
            }
        }
    }
}

/// `c = a' b' + beta c` where `a'` is `m x k` and `b'` is `k x n`, each
/// optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ndarray::ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(T::one(), &a, &b, beta, &mut c);
}

fn check_conv_params<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    in_channels: usize,
    transpose: bool,
) -> Result<(usize, usize)> {
    let [w0, w1, kh, kw] = weight.dims4()?;
    if kh != kw {
        return Err(Error::param(format!("non-square kernel {kh}x{kw}")));
    }
    let (cin, cout) = if transpose { (w0, w1) } else { (w1, w0) };
    if cin != in_channels {
        return Err(Error::param(format!(
            "input has {in_channels} channels, weight expects {cin}"
        )));
    }
    check_shape(&[cout], bias.shape())?;
    Ok((cout, kh))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4()?;
    let (cout, k) = check_conv_params(weight, bias, cin, false)?;
    let g = ConvGeometry::conv(h, w, k, stride)?;
    let out_len = g.out_len();
    let mut out = Tensor::zeros(&[n, cout, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); cin * k * k * out_len];
    for b in 0..n {
        im2col(
            &input.data()[b * cin * g.in_len()..][..cin * g.in_len()],
            cin,
            &g,
            &mut cols,
        );
        let dst = &mut out.data_mut()[b * cout * out_len..][..cout * out_len];
        for (o, chunk) in dst.chunks_mut(out_len).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        gemm(
            cout,
            out_len,
            cin * k * k,
            weight.data(),
            false,
            &cols,
            false,
            T::one(),
            dst,
        );
    }
    Ok(out)
}

/// Gradients `(input, weight, bias)` of a convolution given `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, _, k, _] = weight.dims4()?;
    let g = ConvGeometry::conv(h, w, k, stride)?;
    check_shape(&[n, cout, g.out_h, g.out_w], grad_out.shape())?;
    let out_len = g.out_len();
    let ckk = cin * k * k;
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[cout]);
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); ckk * out_len];
    for b in 0..n {
        let gout = &grad_out.data()[b * cout * out_len..][..cout * out_len];
        for (o, chunk) in gout.chunks(out_len).enumerate() {
            grad_b.data_mut()[o] = grad_b.data()[o] + chunk.iter().copied().sum();
        }
        im2col(
            &input.data()[b * cin * g.in_len()..][..cin * g.in_len()],
            cin,
            &g,
            &mut cols,
        );
        gemm(
            cout,
            ckk,
            out_len,
            gout,
            false,
            &cols,
            true,
            T::one(),
            grad_w.data_mut(),
        );
        if let Some(gi) = grad_in.as_mut() {
            gemm(
                ckk,
                out_len,
                cout,
                weight.data(),
                true,
                gout,
                false,
                T::zero(),
                &mut cols,
            );
            col2im(
                &cols,
                cin,
                &g,
                &mut gi.data_mut()[b * cin * g.in_len()..][..cin * g.in_len()],
            );
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// Transposed convolution; `weight` has shape `(in_channels, out_channels, k, k)`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4()?;
    let (cout, k) = check_conv_params(weight, bias, cin, true)?;
    let g = ConvGeometry::transpose(h, w, k, stride)?;
    let small = g.out_len();
    let big = g.in_len();
    let mut out = Tensor::zeros(&[n, cout, g.in_h, g.in_w]);
    let mut cols = vec![T::zero(); cout * k * k * small];
    for b in 0..n {
        let x = &input.data()[b * cin * small..][..cin * small];
        gemm(
            cout * k * k,
            small,
            cin,
            weight.data(),
            true,
            x,
            false,
            T::zero(),
            &mut cols,
        );
        let dst = &mut out.data_mut()[b * cout * big..][..cout * big];
        for (o, chunk) in dst.chunks_mut(big).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        col2im(&cols, cout, &g, dst);
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [n, cin, h, w] = input.dims4()?;
    let [_, cout, k, _] = weight.dims4()?;
    let g = ConvGeometry::transpose(h, w, k, stride)?;
    check_shape(&[n, cout, g.in_h, g.in_w], grad_out.shape())?;
    let small = g.out_len();
    let big = g.in_len();
    let ckk = cout * k * k;
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[cout]);
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); ckk * small];
    for b in 0..n {
        let gout = &grad_out.data()[b * cout * big..][..cout * big];
        for (o, chunk) in gout.chunks(big).enumerate() {
            grad_b.data_mut()[o] = grad_b.data()[o] + chunk.iter().copied().sum();
        }
        im2col(gout, cout, &g, &mut cols);
        let x = &input.data()[b * cin * small..][..cin * small];
        gemm(
            cin,
            ckk,
            small,
            x,
            false,
            &cols,
            true,
            T::one(),
            grad_w.data_mut(),
        );
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[b * cin * small..][..cin * small];
            gemm(
                cin,
                small,
                ckk,
                weight.data(),
                false,
                &cols,
                false,
                T::zero(),
                dst,
            );
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Values saved by the batch-norm forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Per-channel normalization over `(batch, h, w)`. Train mode uses batch
/// statistics and updates `stats` (unbiased variance); eval mode uses `stats`.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = input.dims4()?;
    check_shape(&[c], gamma.shape())?;
    check_shape(&[c], beta.shape())?;
    check_shape(&[c], &[stats.mean.len()])?;
    let plane = h * w;
    let count = n * plane;
    let mut out = Tensor::zeros(input.shape());
    let mut normalized = vec![T::zero(); input.numel()];
    let mut inv_std = vec![T::zero(); c];
    let momentum = BN_MOMENTUM;
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * plane;
                    sum += input.data()[start..start + plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * plane;
                    sq += input.data()[start..start + plane]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let unbiased = if count > 1 {
                    sq / (count - 1) as f64
                } else {
                    var
                };
                stats.mean[ch] =
                    T::lit((1.0 - momentum) * stats.mean[ch].as_f64() + momentum * mean);
                stats.var[ch] =
                    T::lit((1.0 - momentum) * stats.var[ch].as_f64() + momentum * unbiased);
                (mean, var)
            }
            Mode::Eval => (stats.mean[ch].as_f64(), stats.var[ch].as_f64()),
        };
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = T::lit(istd);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let mean_t = T::lit(mean);
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let xh = (input.data()[i] - mean_t) * inv_std[ch];
                normalized[i] = xh;
                out.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
        },
    ))
}

/// Gradients `(input, gamma, beta)` of [`batch_norm`].
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad_out.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut grad_in = Tensor::zeros(grad_out.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let g = grad_out.data()[i].as_f64();
                sum_g += g;
                sum_gx += g * cache.normalized[i].as_f64();
            }
        }
        grad_beta.data_mut()[ch] = T::lit(sum_g);
        grad_gamma.data_mut()[ch] = T::lit(sum_gx);
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let mean_g = T::lit(sum_g / count);
        let mean_gx = T::lit(sum_gx / count);
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let g = grad_out.data()[i];
                grad_in.data_mut()[i] = match cache.mode {
                    Mode::Train => scale * (g - mean_g - cache.normalized[i] * mean_gx),
                    Mode::Eval => scale * g,
                };
            }
        }
    }
    Ok((grad_in, grad_gamma, grad_beta))
}

/// Elementwise activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x`, given the forward output `y`.
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

pub fn leaky_relu<T: Real>(x: T, slope: f64) -> T {
    Activation::LeakyRelu(slope).apply(x)
}

pub fn relu<T: Real>(x: T) -> T {
    Activation::Relu.apply(x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    Activation::Sigmoid.apply(x)
}

pub fn tanh<T: Real>(x: T) -> T {
    Activation::Tanh.apply(x)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

/// Dropout as a plain function; identity in eval mode or at rate 0.
pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, seed: u64, mode: Mode) -> Result<Tensor<T>> {
    use rand::SeedableRng;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(input.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask::<T>(input.numel(), rate, &mut rng)?;
    Tensor::new(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect(),
    )
}
