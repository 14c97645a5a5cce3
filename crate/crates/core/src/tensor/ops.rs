use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// Epsilon in the batch norm denominator.
pub const BN_EPS: f64 = 1e-8;

/// Runs `f(plane_index, plane)` over every `plane_len` chunk of `out`.
///
/// Each chunk is produced by the same sequential code whether or not rayon
/// splits the work, so results do not depend on the thread count.
fn for_each_plane(
    out: &mut [f64],
    plane_len: usize,
    work: usize,
    f: impl Fn(usize, &mut [f64]) + Sync + Send,
) {
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    }
}

/// Output indices `o` with `0 <= o*stride + k - pad < len`.
#[inline]
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride <= in_len - 1 + pad - k
    let hi = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_out_shape(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if kernel.c != input.c {
        return dim_err(format!(
            "conv2d: input has {} channels but kernel expects {}",
            input.c, kernel.c
        ));
    }
    if input.h + 2 * pad < kernel.h || input.w + 2 * pad < kernel.w {
        return dim_err(format!(
            "conv2d: kernel {kernel} larger than padded input {input}"
        ));
    }
    Ok(Shape::new(
        input.n,
        kernel.n,
        (input.h + 2 * pad - kernel.h) / stride + 1,
        (input.w + 2 * pad - kernel.w) / stride + 1,
    ))
}

/// 2-D cross-correlation with zero padding. `kernel` is laid out as
/// (out_channels, in_channels, kh, kw).
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ks = kernel.shape();
    let os = conv_out_shape(is, ks, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != ks.n {
            return dim_err(format!(
                "conv2d: bias length {} != {} outputs",
                b.len(),
                ks.n
            ));
        }
    }
    let mut out = vec![0.0; os.numel()];
    let work = os.numel() * ks.c * ks.h * ks.w;
    let (ind, kd) = (input.data(), kernel.data());
    for_each_plane(&mut out, os.plane(), work, |idx, plane| {
        let (n, o) = (idx / os.c, idx % os.c);
        if let Some(b) = bias {
            plane.fill(b[o]);
        }
        for i in 0..is.c {
            let src = &ind[(n * is.c + i) * is.plane()..][..is.plane()];
            for ky in 0..ks.h {
                let (y0, y1) = valid_range(os.h, is.h, ky, stride, pad);
                for kx in 0..ks.w {
                    let kv = kd[((o * ks.c + i) * ks.h + ky) * ks.w + kx];
                    let (x0, x1) = valid_range(os.w, is.w, kx, stride, pad);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let srow = &src[iy * is.w..][..is.w];
                        let orow = &mut plane[oy * os.w..][..os.w];
                        for ox in x0..x1 {
                            orow[ox] += srow[ox * stride + kx - pad] * kv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(os, out)
}

/// Vector-Jacobian product of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: Shape,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let ks = kernel.shape();
    let os = conv_out_shape(input_shape, ks, stride, pad)?;
    grad_out.expect_shape(os, "conv2d_grad_input")?;
    let is = input_shape;
    let mut gi = vec![0.0; is.numel()];
    let work = os.numel() * ks.c * ks.h * ks.w;
    let (gd, kd) = (grad_out.data(), kernel.data());
    for_each_plane(&mut gi, is.plane(), work, |idx, plane| {
        let (n, i) = (idx / is.c, idx % is.c);
        for o in 0..ks.n {
            let g = &gd[(n * os.c + o) * os.plane()..][..os.plane()];
            for ky in 0..ks.h {
                let (y0, y1) = valid_range(os.h, is.h, ky, stride, pad);
                for kx in 0..ks.w {
                    let kv = kd[((o * ks.c + i) * ks.h + ky) * ks.w + kx];
                    let (x0, x1) = valid_range(os.w, is.w, kx, stride, pad);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &g[oy * os.w..][..os.w];
                        let prow = &mut plane[iy * is.w..][..is.w];
                        for ox in x0..x1 {
                            prow[ox * stride + kx - pad] += grow[ox] * kv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(is, gi)
}

/// Vector-Jacobian product of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: Shape,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ks = kernel_shape;
    let os = conv_out_shape(is, ks, stride, pad)?;
    grad_out.expect_shape(os, "conv2d_grad_kernel")?;
    let mut gk = vec![0.0; ks.numel()];
    let work = os.numel() * ks.c * ks.h * ks.w;
    let (gd, ind) = (grad_out.data(), input.data());
    // one chunk per (o, i) pair
    for_each_plane(&mut gk, ks.h * ks.w, work, |idx, taps| {
        let (o, i) = (idx / ks.c, idx % ks.c);
        for ky in 0..ks.h {
            let (y0, y1) = valid_range(os.h, is.h, ky, stride, pad);
            for kx in 0..ks.w {
                let (x0, x1) = valid_range(os.w, is.w, kx, stride, pad);
                let mut acc = 0.0;
                for n in 0..is.n {
                    let g = &gd[(n * os.c + o) * os.plane()..][..os.plane()];
                    let src = &ind[(n * is.c + i) * is.plane()..][..is.plane()];
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &g[oy * os.w..][..os.w];
                        let srow = &src[iy * is.w..][..is.w];
                        for ox in x0..x1 {
                            acc += grow[ox] * srow[ox * stride + kx - pad];
                        }
                    }
                }
                taps[ky * ks.w + kx] = acc;
            }
        }
    });
    Tensor::new(ks, gk)
}

/// Sum of the output gradient per output channel.
pub fn conv2d_grad_bias(grad_out: &Tensor) -> Vec<f64> {
    let s = grad_out.shape();
    (0..s.c)
        .map(|c| {
            (0..s.n)
                .map(|n| grad_out.plane(n, c).iter().sum::<f64>())
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `grad_out * f'(x)` elementwise.
pub fn activation_grad(x: &Tensor, grad_out: &Tensor, kind: Activation) -> Result<Tensor> {
    x.zip_map(grad_out, |v, g| g * kind.derivative(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResizeKind {
    Nearest,
    Bilinear,
}

/// Per output index: two source taps and their weights.
fn axis_taps(in_len: usize, scale: usize, kind: ResizeKind) -> Vec<(usize, usize, f64, f64)> {
    (0..in_len * scale)
        .map(|d| match kind {
            ResizeKind::Nearest => (d / scale, d / scale, 1.0, 0.0),
            ResizeKind::Bilinear => {
                let src = ((d as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let f = src - i0 as f64;
                (i0, i1, 1.0 - f, f)
            }
        })
        .collect()
}

/// Integer-factor upsampling. Bilinear follows the align-corners=false
/// convention: source coordinate = (dst + 0.5) / scale - 0.5, clamped at
/// the borders.
pub fn resize(x: &Tensor, scale: usize, kind: ResizeKind) -> Result<Tensor> {
    if scale == 0 {
        return Err(Error::InvalidArgument("resize scale must be >= 1".into()));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let ty = axis_taps(s.h, scale, kind);
    let tx = axis_taps(s.w, scale, kind);
    let os = Shape::new(s.n, s.c, s.h * scale, s.w * scale);
    Ok(Tensor::from_fn(os, |n, c, y, xx| {
        let (y0, y1, wy0, wy1) = ty[y];
        let (x0, x1, wx0, wx1) = tx[xx];
        let p = x.plane(n, c);
        let top = wx0 * p[y0 * s.w + x0] + wx1 * p[y0 * s.w + x1];
        let bot = wx0 * p[y1 * s.w + x0] + wx1 * p[y1 * s.w + x1];
        wy0 * top + wy1 * bot
    }))
}

/// Adjoint of [`resize`]: scatters `grad_out` back onto the input grid.
pub fn resize_adjoint(
    grad_out: &Tensor,
    input_shape: Shape,
    scale: usize,
    kind: ResizeKind,
) -> Result<Tensor> {
    let s = input_shape;
    let os = Shape::new(s.n, s.c, s.h * scale, s.w * scale);
    grad_out.expect_shape(os, "resize_adjoint")?;
    if scale == 1 {
        return Ok(grad_out.clone());
    }
    let ty = axis_taps(s.h, scale, kind);
    let tx = axis_taps(s.w, scale, kind);
    let mut gi = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = grad_out.at(n, c, y, xx);
                    let base = gi.offset(n, c, 0, 0);
                    let d = gi.data_mut();
                    d[base + y0 * s.w + x0] += g * wy0 * wx0;
                    d[base + y0 * s.w + x1] += g * wy0 * wx1;
                    d[base + y1 * s.w + x0] += g * wy1 * wx0;
                    d[base + y1 * s.w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
    Ok(gi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            initialized: false,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for c in 0..mean.len() {
            if self.initialized {
                self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c] * unbias;
            } else {
                self.running_mean[c] = mean[c];
                self.running_var[c] = var[c] * unbias;
            }
        }
        self.initialized = true;
    }
}

/// Per-channel statistics used to normalize one batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization with learned `gamma`/`beta`. Train mode normalizes
/// with the batch's biased statistics and folds them into `state`; eval mode
/// uses the running statistics. Returns the output and the statistics used.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BatchNormState,
    mode: NormMode,
) -> Result<(Tensor, BatchStats)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || state.running_mean.len() != s.c {
        return dim_err(format!(
            "batch_norm: {} channels vs parameters of length {}",
            s.c,
            gamma.len()
        ));
    }
    let stats = match mode {
        NormMode::Train => {
            let count = s.n * s.plane();
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let m = (0..s.n)
                    .map(|n| x.plane(n, c).iter().sum::<f64>())
                    .sum::<f64>()
                    / count as f64;
                let v = (0..s.n)
                    .map(|n| {
                        x.plane(n, c)
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / count as f64;
                mean[c] = m;
                var[c] = v;
            }
            state.update(&mean, &var, count);
            BatchStats {
                inv_std: var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                mean,
            }
        }
        NormMode::Eval => {
            if !state.initialized {
                return Err(Error::UninitializedStats);
            }
            BatchStats {
                mean: state.running_mean.clone(),
                inv_std: state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect(),
            }
        }
    };
    let y = Tensor::from_fn(s, |n, c, yy, xx| {
        gamma[c] * (x.at(n, c, yy, xx) - stats.mean[c]) * stats.inv_std[c] + beta[c]
    });
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops, straight from the definition.
    fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
        let is = input.shape();
        let ks = kernel.shape();
        let oh = (is.h + 2 * pad - ks.h) / stride + 1;
        let ow = (is.w + 2 * pad - ks.w) / stride + 1;
        Tensor::from_fn(Shape::new(is.n, ks.n, oh, ow), |n, o, y, x| {
            let mut acc = 0.0;
            for i in 0..ks.c {
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (x * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                            acc +=
                                input.at(n, i, iy as usize, ix as usize) * kernel.at(o, i, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_counts_overlapping_ones() {
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let k = Tensor::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random(Shape::new(2, 1, 4, 5), 3);
        let k = Tensor::ones(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(Shape::new(1, 2, 5, 5), 11);
        let k = random(Shape::new(3, 2, 3, 3), 12);
        let fast = conv2d(&x, &k, None, 1, 1).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&x, &k, 1, 1)).unwrap() < 1e-12);
        for (stride, pad) in [(2, 1), (2, 0), (3, 2)] {
            let fast = conv2d(&x, &k, None, stride, pad).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &k, stride, pad)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = random(Shape::new(1, 2, 5, 5), 1);
        let k = random(Shape::new(1, 3, 3, 3), 2);
        assert!(matches!(
            conv2d(&x, &k, None, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_is_linear() {
        let x = random(Shape::new(1, 2, 6, 6), 1);
        let y = random(Shape::new(1, 2, 6, 6), 2);
        let k = random(Shape::new(2, 2, 3, 3), 3);
        let (a, b) = (0.7, -1.3);
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = conv2d(&mix, &k, None, 1, 1).unwrap();
        let rhs = conv2d(&x, &k, None, 1, 1)
            .unwrap()
            .zip_map(&conv2d(&y, &k, None, 1, 1).unwrap(), |u, v| a * u + b * v)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn conv_translation_equivariant_interior() {
        let x = random(Shape::new(1, 1, 9, 9), 4);
        let k = random(Shape::new(1, 1, 3, 3), 5);
        // shift right by one, the vacated column is zero
        let shifted = Tensor::from_fn(
            x.shape(),
            |n, c, y, xx| if xx == 0 { 0.0 } else { x.at(n, c, y, xx - 1) },
        );
        let a = conv2d(&x, &k, None, 1, 1).unwrap();
        let b = conv2d(&shifted, &k, None, 1, 1).unwrap();
        for y in 1..8 {
            for xx in 2..8 {
                assert_eq!(b.at(0, 0, y, xx), a.at(0, 0, y, xx - 1));
            }
        }
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x), g> == <x, conv^T(g)>
        let x = random(Shape::new(2, 2, 5, 6), 7);
        let k = random(Shape::new(3, 2, 3, 3), 8);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let y = conv2d(&x, &k, None, stride, pad).unwrap();
            let g = random(y.shape(), 9);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gi = conv2d_grad_input(&g, &k, x.shape(), stride, pad).unwrap();
            let rhs: f64 = x.data().iter().zip(gi.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            let gk = conv2d_grad_kernel(&g, &x, k.shape(), stride, pad).unwrap();
            let rhs_k: f64 = k.data().iter().zip(gk.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_k).abs() < 1e-10);
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!((Activation::Softplus.apply(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(Activation::Relu.apply(-3.2), 0.0);
        assert_eq!(Activation::Relu.apply(3.2), 3.2);
        assert!(Activation::Softplus.apply(-30.0) > 0.0);
        assert_eq!(Activation::Softplus.apply(800.0), 800.0);
        assert!(Activation::Sigmoid.apply(30.0) < 1.0);
    }

    #[test]
    fn resize_nearest_replicates() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let y = resize(&x, 2, ResizeKind::Nearest).unwrap();
        let want = Tensor::from_rows(&[
            &[1.0, 1.0, 2.0, 2.0],
            &[1.0, 1.0, 2.0, 2.0],
            &[3.0, 3.0, 4.0, 4.0],
            &[3.0, 3.0, 4.0, 4.0],
        ])
        .unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn resize_scale_one_is_identity() {
        let x = random(Shape::new(1, 2, 3, 4), 1);
        assert_eq!(resize(&x, 1, ResizeKind::Nearest).unwrap(), x);
        assert_eq!(resize(&x, 1, ResizeKind::Bilinear).unwrap(), x);
    }

    #[test]
    fn bilinear_reproduces_ramp_interior() {
        let (a, b, c) = (0.3, -1.7, 2.5);
        let x = Tensor::from_fn(Shape::new(1, 1, 6, 7), |_, _, y, xx| {
            a * xx as f64 + b * y as f64 + c
        });
        for scale in [2usize, 3, 4] {
            let up = resize(&x, scale, ResizeKind::Bilinear).unwrap();
            let s = scale as f64;
            for y in 0..up.shape().h {
                for xx in 0..up.shape().w {
                    let sy = (y as f64 + 0.5) / s - 0.5;
                    let sx = (xx as f64 + 0.5) / s - 0.5;
                    if sy < 0.0 || sx < 0.0 || sy > 5.0 || sx > 6.0 {
                        continue;
                    }
                    let want = a * sx + b * sy + c;
                    assert!((up.at(0, 0, y, xx) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_adjoint_identity() {
        for kind in [ResizeKind::Nearest, ResizeKind::Bilinear] {
            let x = random(Shape::new(1, 2, 3, 5), 21);
            let y = resize(&x, 3, kind).unwrap();
            let g = random(y.shape(), 22);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gi = resize_adjoint(&g, x.shape(), 3, kind).unwrap();
            let rhs: f64 = x.data().iter().zip(gi.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_constant_channel_gives_shift() {
        let x = Tensor::full(Shape::new(2, 2, 3, 3), 4.2);
        let mut st = BatchNormState::new(2);
        let (y, _) = batch_norm(&x, &[1.5, -2.0], &[0.25, 3.0], &mut st, NormMode::Train).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let x = random(Shape::new(2, 3, 4, 4), 5).map(|v| 3.0 * v + 1.0);
        let mut st = BatchNormState::new(3);
        let (y, _) = batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut st, NormMode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_requires_stats() {
        let x = random(Shape::new(1, 2, 2, 2), 1);
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            batch_norm(&x, &[1.0; 2], &[0.0; 2], &mut st, NormMode::Eval),
            Err(Error::UninitializedStats)
        ));
        batch_norm(&x, &[1.0; 2], &[0.0; 2], &mut st, NormMode::Train).unwrap();
        assert!(batch_norm(&x, &[1.0; 2], &[0.0; 2], &mut st, NormMode::Eval).is_ok());
    }
}
