//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation on a [`Var`] appends a node holding its value, the ids of
//! its inputs, and a closure computing the vector-Jacobian product for each
//! input. [`Tape::backward`] walks the nodes in reverse and accumulates the
//! adjoints additively, so a value used twice receives both contributions.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops::{self, Activation, BatchNormState, NormMode, ResizeKind};
use super::{Shape, Tensor};
use crate::error::{dim_err, Result};

type Vjp = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.id, self.shape())
    }
}

/// Adjoints indexed by node; nodes the seed never reaches have none.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// The adjoint of `v`, or zeros if the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input (parameter, data or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, vjp: Option<Vjp>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            vjp,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates `seed` from `output`.
    pub fn backward(&self, output: Var<'_>, seed: &Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        seed.expect_shape(nodes[output.id].value.shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed.clone());
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(vjp) = &node.vjp {
                let parts = vjp(&g)?;
                debug_assert_eq!(parts.len(), node.parents.len());
                for (&p, part) in node.parents.iter().zip(parts) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&part)?,
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Back-propagates from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var<'_>) -> Result<Gradients> {
        let shape = output.shape();
        self.backward(output, &Tensor::ones(shape))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&kernel);
        let x = self.value();
        let k = kernel.value();
        let b = bias.map(|b| b.value());
        let out = ops::conv2d(&x, &k, b.as_deref().map(|t| t.data()), stride, pad)?;
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let bias_shape = b.as_ref().map(|t| t.shape());
        let vjp: Vjp = Box::new(move |g| {
            let mut grads = vec![
                ops::conv2d_grad_input(g, &k, x.shape(), stride, pad)?,
                ops::conv2d_grad_kernel(g, &x, k.shape(), stride, pad)?,
            ];
            if let Some(bs) = bias_shape {
                grads.push(Tensor::new(bs, ops::conv2d_grad_bias(g))?);
            }
            Ok(grads)
        });
        Ok(self.tape.push(out, parents, Some(vjp)))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let x = self.value();
        let out = ops::activation(&x, kind);
        let vjp: Vjp = Box::new(move |g| Ok(vec![ops::activation_grad(&x, g, kind)?]));
        self.tape.push(out, vec![self.id], Some(vjp))
    }

    /// Batch normalization over (batch, height, width) per channel. `gamma`
    /// and `beta` are (1, C, 1, 1). With `enabled == false` this is the
    /// identity and touches neither parameters nor `state`.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        state: &mut BatchNormState,
        mode: NormMode,
        enabled: bool,
    ) -> Result<Var<'t>> {
        if !enabled {
            return Ok(self);
        }
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let (out, stats) = ops::batch_norm(&x, gm.data(), bt.data(), state, mode)?;
        let s = x.shape();
        let vjp: Vjp = Box::new(move |g| {
            let count = (s.n * s.plane()) as f64;
            let mut gx = Tensor::zeros(s);
            let mut gg = vec![0.0; s.c];
            let mut gb = vec![0.0; s.c];
            for c in 0..s.c {
                let (m, is) = (stats.mean[c], stats.inv_std[c]);
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for n in 0..s.n {
                    for (&gv, &xv) in g.plane(n, c).iter().zip(x.plane(n, c)) {
                        sum_g += gv;
                        sum_gx += gv * (xv - m) * is;
                    }
                }
                gg[c] = sum_gx;
                gb[c] = sum_g;
                let gamma_c = gm.data()[c];
                for n in 0..s.n {
                    let base = gx.offset(n, c, 0, 0);
                    for (j, (&gv, &xv)) in g.plane(n, c).iter().zip(x.plane(n, c)).enumerate() {
                        let xhat = (xv - m) * is;
                        gx.data_mut()[base + j] = match mode {
                            NormMode::Train => {
                                gamma_c * is * (gv - sum_g / count - xhat * sum_gx / count)
                            }
                            NormMode::Eval => gamma_c * is * gv,
                        };
                    }
                }
            }
            let ps = Shape::new(1, s.c, 1, 1);
            Ok(vec![gx, Tensor::new(ps, gg)?, Tensor::new(ps, gb)?])
        });
        Ok(self
            .tape
            .push(out, vec![self.id, gamma.id, beta.id], Some(vjp)))
    }

    pub fn resize(self, scale: usize, kind: ResizeKind) -> Result<Var<'t>> {
        let shape = self.shape();
        let out = ops::resize(&self.value(), scale, kind)?;
        let vjp: Vjp = Box::new(move |g| Ok(vec![ops::resize_adjoint(g, shape, scale, kind)?]));
        Ok(self.tape.push(out, vec![self.id], Some(vjp)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        let vjp: Vjp = Box::new(|g| Ok(vec![g.clone(), g.clone()]));
        Ok(self.tape.push(out, vec![self.id, other.id], Some(vjp)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        let vjp: Vjp = Box::new(|g| Ok(vec![g.clone(), g.scale(-1.0)]));
        Ok(self.tape.push(out, vec![self.id, other.id], Some(vjp)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |u, v| u * v)?;
        let vjp: Vjp = Box::new(move |g| {
            Ok(vec![
                g.zip_map(&b, |gv, v| gv * v)?,
                g.zip_map(&a, |gv, u| gv * u)?,
            ])
        });
        Ok(self.tape.push(out, vec![self.id, other.id], Some(vjp)))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().scale(k);
        let vjp: Vjp = Box::new(move |g| Ok(vec![g.scale(k)]));
        self.tape.push(out, vec![self.id], Some(vjp))
    }

    /// `self / (den + eps)` elementwise.
    pub fn div_eps(self, den: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.check_same_tape(&den);
        let (a, b) = (self.value(), den.value());
        let out = a.zip_map(&b, |u, v| u / (v + eps))?;
        let vjp: Vjp = Box::new(move |g| {
            let ga = g.zip_map(&b, |gv, v| gv / (v + eps))?;
            let mut gb = g.clone();
            for ((gv, &u), &v) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *gv *= -u / ((v + eps) * (v + eps));
            }
            Ok(vec![ga, gb])
        });
        Ok(self.tape.push(out, vec![self.id, den.id], Some(vjp)))
    }

    /// Divides channel `c` of `self` by `div[c]`, where `div` is (1, C, 1, 1).
    pub fn div_channels(self, div: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&div);
        let (x, d) = (self.value(), div.value());
        let s = x.shape();
        if d.shape() != Shape::new(1, s.c, 1, 1) {
            return dim_err(format!(
                "div_channels: divisor {} for input {}",
                d.shape(),
                s
            ));
        }
        let out = Tensor::from_fn(s, |n, c, y, xx| x.at(n, c, y, xx) / d.data()[c]);
        let vjp: Vjp = Box::new(move |g| {
            let gx = Tensor::from_fn(s, |n, c, y, xx| g.at(n, c, y, xx) / d.data()[c]);
            let gd: Vec<f64> = (0..s.c)
                .map(|c| {
                    let dc = d.data()[c];
                    let mut acc = 0.0;
                    for n in 0..s.n {
                        for (gv, xv) in g.plane(n, c).iter().zip(x.plane(n, c)) {
                            acc -= gv * xv / (dc * dc);
                        }
                    }
                    acc
                })
                .collect();
            Ok(vec![gx, Tensor::new(d.shape(), gd)?])
        });
        Ok(self.tape.push(out, vec![self.id, div.id], Some(vjp)))
    }

    /// Sum of each output channel's taps of a (O, I, kh, kw) kernel, as a
    /// (1, O, 1, 1) tensor.
    pub fn kernel_mass(self) -> Var<'t> {
        let k = self.value();
        let ks = k.shape();
        let per = ks.c * ks.h * ks.w;
        let sums: Vec<f64> = k.data().chunks(per).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(Shape::new(1, ks.n, 1, 1), sums).expect("kernel has >= 1 output");
        let vjp: Vjp = Box::new(move |g| Ok(vec![Tensor::from_fn(ks, |o, _, _, _| g.data()[o])]));
        self.tape.push(out, vec![self.id], Some(vjp))
    }

    /// Sum of all elements, as a 1x1x1x1 tensor. Per-item partial sums are
    /// added in sorted order, so permuting the batch gives the same bits.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        let item = shape.numel() / shape.n;
        let mut partial: Vec<f64> = x.data().chunks(item).map(|c| c.iter().sum()).collect();
        partial.sort_by(f64::total_cmp);
        let out = Tensor::scalar(partial.iter().sum());
        let vjp: Vjp = Box::new(move |g| Ok(vec![Tensor::full(shape, g.data()[0])]));
        self.tape.push(out, vec![self.id], Some(vjp))
    }

    /// `out[j] = self[index[j]]` over the flat data, reshaped to `shape`.
    /// Indices may repeat; the adjoint scatter-adds.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: Shape) -> Result<Var<'t>> {
        let x = self.value();
        let in_shape = x.shape();
        if index.len() != shape.numel() {
            return dim_err(format!(
                "gather: {} indices for output {}",
                index.len(),
                shape
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return dim_err(format!("gather: index {bad} out of range for {in_shape}"));
        }
        let out = Tensor::new(shape, index.iter().map(|&i| x.data()[i]).collect())?;
        let vjp: Vjp = Box::new(move |g| {
            let mut gx = Tensor::zeros(in_shape);
            let d = gx.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                d[i] += gv;
            }
            Ok(vec![gx])
        });
        Ok(self.tape.push(out, vec![self.id], Some(vjp)))
    }

    /// `out[index[j]] = self[j]`, zeros elsewhere. `index` must be injective.
    pub fn scatter(self, index: Rc<Vec<usize>>, shape: Shape) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.len() {
            return dim_err(format!(
                "scatter: {} indices for input {}",
                index.len(),
                x.shape()
            ));
        }
        let mut out = Tensor::zeros(shape);
        let mut seen = vec![false; shape.numel()];
        for (&i, &v) in index.iter().zip(x.data()) {
            if i >= shape.numel() {
                return dim_err(format!("scatter: index {i} out of range for {shape}"));
            }
            assert!(!seen[i], "scatter: destination {i} written twice");
            seen[i] = true;
            out.data_mut()[i] = v;
        }
        let in_shape = x.shape();
        let vjp: Vjp = Box::new(move |g| {
            Ok(vec![Tensor::new(
                in_shape,
                index.iter().map(|&i| g.data()[i]).collect(),
            )?])
        });
        Ok(self.tape.push(out, vec![self.id], Some(vjp)))
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts[0];
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        let channels: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
        let vjp: Vjp = Box::new(move |g| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(channels.len());
            for &c in &channels {
                let planes: Vec<Tensor> = (start..start + c)
                    .map(|k| g.channel(k))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = planes.iter().collect();
                grads.push(Tensor::concat_channels(&refs)?);
                start += c;
            }
            Ok(grads)
        });
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, ids, Some(vjp)))
    }

    pub fn channel(self, c: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let out = x.channel(c)?;
        let vjp: Vjp = Box::new(move |g| {
            let mut gx = Tensor::zeros(s);
            for n in 0..s.n {
                let base = gx.offset(n, c, 0, 0);
                gx.data_mut()[base..base + s.plane()].copy_from_slice(g.plane(n, 0));
            }
            Ok(vec![gx])
        });
        Ok(self.tape.push(out, vec![self.id], Some(vjp)))
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn area_downsample(self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let out = x.area_downsample(factor)?;
        let vjp: Vjp = Box::new(move |g| {
            let norm = (factor * factor) as f64;
            Ok(vec![Tensor::from_fn(s, |n, c, y, xx| {
                g.at(n, c, y / factor, xx / factor) / norm
            })])
        });
        Ok(self.tape.push(out, vec![self.id], Some(vjp)))
    }
}
