//! Dense 4-D tensors (batch, channel, height, width) in 64-bit floats.
//!
//! [`Tensor`] is a plain value type. The differentiable side lives in
//! [`tape`], which records operations over tensors and replays their
//! vector-Jacobian products in reverse.

mod ops;
pub mod tape;

use std::fmt;
use std::io::{Read, Write};

use crate::error::{dim_err, Error, Result};

pub use ops::{
    activation, activation_grad, batch_norm, conv2d, conv2d_grad_bias, conv2d_grad_input,
    conv2d_grad_kernel, resize, resize_adjoint, Activation, BatchNormState, NormMode, ResizeKind,
    BN_EPS,
};

/// Magic bytes opening a serialized tensor.
pub const TENSOR_MAGIC: &[u8; 4] = b"NCT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return dim_err(format!("all dimensions must be >= 1, got {shape}"));
        }
        if data.len() != shape.numel() {
            return dim_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be >= 1");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// A 1x1x1x1 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    /// A single-image, single-channel tensor from row-major rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return dim_err("ragged rows");
        }
        Tensor::new(Shape::new(1, 1, h, w), rows.concat())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The contiguous `h*w` slice for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return dim_err(format!("{what}: shape {} != {}", self.shape, shape));
        }
        Ok(())
    }

    /// Extracts channel `c` as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        if c >= self.shape.c {
            return dim_err(format!("channel {c} out of range for {}", self.shape));
        }
        let shape = self.shape.with_channels(1);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            data.extend_from_slice(self.plane(n, c));
        }
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = first.shape;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return dim_err(format!("concat: {} vs {}", s, s0));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let shape = s0.with_channels(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s0.n {
            for p in parts {
                for ci in 0..p.shape.c {
                    data.extend_from_slice(p.plane(n, ci));
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Selects batch items by index, in the given order.
    pub fn select_batch(&self, items: &[usize]) -> Result<Tensor> {
        let per = self.shape.c * self.shape.plane();
        let mut data = Vec::with_capacity(items.len() * per);
        for &i in items {
            if i >= self.shape.n {
                return dim_err(format!("batch index {i} out of range for {}", self.shape));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::new(
            Shape::new(items.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        )
    }

    /// Stacks single-or-multi-item tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let s0 = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return dim_err(format!("stack: {} vs {}", s, s0));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(Shape::new(n, s0.c, s0.h, s0.w), data)
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn area_downsample(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape;
        if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
            return dim_err(format!("area downsample by {factor} of {s}"));
        }
        let (oh, ow) = (s.h / factor, s.w / factor);
        let norm = (factor * factor) as f64;
        Ok(Tensor::from_fn(
            Shape::new(s.n, s.c, oh, ow),
            |n, c, y, x| {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.at(n, c, y * factor + dy, x * factor + dx);
                    }
                }
                acc / norm
            },
        ))
    }

    /// Writes the little-endian checkpoint encoding: magic, four u32 dims,
    /// then the f64 payload.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        for d in self.shape.dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        let mut buf4 = [0u8; 4];
        for d in &mut dims {
            r.read_exact(&mut buf4)?;
            *d = u32::from_le_bytes(buf4) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape.numel() == 0 {
            return Err(Error::Format(format!("zero-sized tensor {shape}")));
        }
        let mut data = Vec::with_capacity(shape.numel());
        let mut buf8 = [0u8; 8];
        for _ in 0..shape.numel() {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.data.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}
