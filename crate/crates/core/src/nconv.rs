//! Normalized convolution with confidence propagation, plus the
//! confidence-aware pooling and unpooling used by the interpolation network.
//!
//! For data `d`, confidence `w` and a positive applicability kernel `a`:
//!
//! ```text
//! d_out(x) = Σ_m d(x-m) w(x-m) a(m) / (Σ_m w(x-m) a(m) + EPS)
//! w_out(x) = Σ_m w(x-m) a(m) / Σ_m a(m)
//! ```
//!
//! Padding carries zero confidence, so pixels outside the image never
//! contribute to `d_out`. Kernels are stored in correlation order: tap
//! `[ky, kx]` holds `a(r - ky, r - kx)` for a kernel of radius `r`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, ResizeKind, Shape, Tensor};

/// Absolute epsilon in the data denominator.
pub const EPS: f64 = 1e-10;

/// Raw (unconstrained) parameters of a normalized convolution kernel,
/// shaped (out_channels, in_channels, k, k). The effective kernel is
/// `softplus(raw)`, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct NConvKernel {
    raw: Tensor,
}

impl NConvKernel {
    pub fn from_raw(raw: Tensor) -> Result<Self> {
        let s = raw.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return dim_err(format!(
                "normalized conv kernel must be square and odd, got {s}"
            ));
        }
        Ok(NConvKernel { raw })
    }

    /// All taps equal (raw zero, so each effective tap is ln 2).
    pub fn uniform(in_channels: usize, size: usize) -> Result<Self> {
        Self::from_raw(Tensor::zeros(Shape::new(1, in_channels, size, size)))
    }

    /// Builds raw parameters whose softplus equals `effective`.
    pub fn from_effective(effective: &Tensor) -> Result<Self> {
        assert!(effective.min() > 0.0, "effective kernel must be positive");
        // softplus^-1(a) = a + ln(1 - e^-a)
        Self::from_raw(effective.map(|a| a + (-(-a).exp()).ln_1p()))
    }

    pub fn random(in_channels: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_raw(Tensor::from_fn(
            Shape::new(1, in_channels, size, size),
            |_, _, _, _| rng.gen_range(-0.5..0.5),
        ))
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn into_raw(self) -> Tensor {
        self.raw
    }

    pub fn effective(&self) -> Tensor {
        self.raw.map(|v| Activation::Softplus.apply(v))
    }

    pub fn size(&self) -> usize {
        self.raw.shape().h
    }

    pub fn in_channels(&self) -> usize {
        self.raw.shape().c
    }

    pub fn param_count(&self) -> usize {
        self.raw.len()
    }
}

/// Which cell location pooling carries forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    /// Data and confidence both taken at the most confident location.
    Confidence,
    /// Independent max over data and over confidence.
    Max,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Confidence => "conf",
            PoolKind::Max => "max",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "conf" | "confidence" => Some(PoolKind::Confidence),
            "max" => Some(PoolKind::Max),
            _ => None,
        }
    }
}

/// Differentiable normalized convolution of `data`/`conf` with the kernel
/// whose raw parameters are `raw_kernel`. Returns `(data_out, conf_out)`.
pub fn nconv<'t>(
    data: Var<'t>,
    conf: Var<'t>,
    raw_kernel: Var<'t>,
    pad: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let ds = data.shape();
    if ds != conf.shape() {
        return dim_err(format!("nconv: data {} vs confidence {}", ds, conf.shape()));
    }
    let ks = raw_kernel.shape();
    if ks.c != ds.c {
        return dim_err(format!("nconv: kernel {ks} for {} input channels", ds.c));
    }
    let a = raw_kernel.activation(Activation::Softplus);
    assert!(
        a.value().min() > 0.0,
        "normalized conv kernel has a non-positive tap"
    );
    let num = data.mul(conf)?.conv2d(a, None, 1, pad)?;
    let den = conf.conv2d(a, None, 1, pad)?;
    let data_out = num.div_eps(den, EPS)?;
    let conf_out = den.div_channels(a.kernel_mass())?;
    Ok((data_out, conf_out))
}

/// "Same"-size padding for a kernel of odd size `k`.
pub fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

fn pool_indices(values: &Tensor, window: usize) -> Result<(Rc<Vec<usize>>, Shape)> {
    let s = values.shape();
    if window == 0 || s.h % window != 0 || s.w % window != 0 {
        return dim_err(format!(
            "pool window {window} does not divide {}x{}",
            s.h, s.w
        ));
    }
    let os = Shape::new(s.n, s.c, s.h / window, s.w / window);
    let mut idx = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = values.offset(n, c, oy * window, ox * window);
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = values.offset(n, c, oy * window + dy, ox * window + dx);
                            // strict comparison keeps the row-major-first tie
                            if values.data()[i] > values.data()[best] {
                                best = i;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
    }
    Ok((Rc::new(idx), os))
}

/// Differentiable pooling over `window x window` cells.
pub fn pool<'t>(
    data: Var<'t>,
    conf: Var<'t>,
    window: usize,
    kind: PoolKind,
) -> Result<(Var<'t>, Var<'t>)> {
    if data.shape() != conf.shape() {
        return dim_err(format!(
            "pool: data {} vs confidence {}",
            data.shape(),
            conf.shape()
        ));
    }
    let (conf_idx, os) = pool_indices(&conf.value(), window)?;
    let data_idx = match kind {
        PoolKind::Confidence => Rc::clone(&conf_idx),
        PoolKind::Max => pool_indices(&data.value(), window)?.0,
    };
    Ok((data.gather(data_idx, os)?, conf.gather(conf_idx, os)?))
}

/// Nearest-neighbour replication of data and confidence.
pub fn unpool<'t>(data: Var<'t>, conf: Var<'t>, scale: usize) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        data.resize(scale, ResizeKind::Nearest)?,
        conf.resize(scale, ResizeKind::Nearest)?,
    ))
}

/// Fuses two streams by channel concatenation and one normalized
/// convolution with a two-input-channel kernel.
pub fn fuse<'t>(
    data_a: Var<'t>,
    conf_a: Var<'t>,
    data_b: Var<'t>,
    conf_b: Var<'t>,
    raw_kernel: Var<'t>,
    pad: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = data_a.shape();
    for other in [conf_a.shape(), data_b.shape(), conf_b.shape()] {
        if other != s {
            return dim_err(format!("fuse: stream shapes {s} vs {other}"));
        }
    }
    let data = Var::concat_channels(&[data_a, data_b])?;
    let conf = Var::concat_channels(&[conf_a, conf_b])?;
    nconv(data, conf, raw_kernel, pad)
}

/// Evaluates `nconv` on plain tensors with "same" padding.
pub fn nconv_forward(
    data: &Tensor,
    conf: &Tensor,
    kernel: &NConvKernel,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (d, c) = nconv(
        tape.leaf(data.clone()),
        tape.leaf(conf.clone()),
        tape.leaf(kernel.raw().clone()),
        same_pad(kernel.size()),
    )?;
    Ok(((*d.value()).clone(), (*c.value()).clone()))
}

pub fn conf_pool(
    data: &Tensor,
    conf: &Tensor,
    window: usize,
    kind: PoolKind,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (d, c) = pool(
        tape.leaf(data.clone()),
        tape.leaf(conf.clone()),
        window,
        kind,
    )?;
    Ok(((*d.value()).clone(), (*c.value()).clone()))
}

pub fn conf_unpool(data: &Tensor, conf: &Tensor, scale: usize) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (d, c) = unpool(tape.leaf(data.clone()), tape.leaf(conf.clone()), scale)?;
    Ok(((*d.value()).clone(), (*c.value()).clone()))
}

pub fn nconv_fuse(
    data_a: &Tensor,
    conf_a: &Tensor,
    data_b: &Tensor,
    conf_b: &Tensor,
    kernel: &NConvKernel,
) -> Result<(Tensor, Tensor)> {
    if kernel.in_channels() != 2 {
        return dim_err(format!(
            "fuse kernel needs 2 input channels, has {}",
            kernel.in_channels()
        ));
    }
    let tape = Tape::new();
    let (d, c) = fuse(
        tape.leaf(data_a.clone()),
        tape.leaf(conf_a.clone()),
        tape.leaf(data_b.clone()),
        tape.leaf(conf_b.clone()),
        tape.leaf(kernel.raw().clone()),
        same_pad(kernel.size()),
    )?;
    Ok(((*d.value()).clone(), (*c.value()).clone()))
}
