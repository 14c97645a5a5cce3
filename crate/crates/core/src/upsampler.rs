//! The full upsampler: a small CNN estimates per-pixel confidences from the
//! low-resolution flow and guidance, both are forward-mapped onto the sparse
//! high-resolution grid, and a U-shaped cascade of normalized convolutions
//! densifies each flow channel.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::flowio::FlowField;
use crate::nconv::{self, PoolKind};
use crate::sparsify::forward_map_vars;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{resize, Activation, BatchNormState, NormMode, ResizeKind, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsNetConfig {
    pub ch1: usize,
    pub ch2: usize,
    pub guidance_channels: usize,
    pub target_channels: usize,
    pub final_activation: Activation,
    pub batch_norm: bool,
}

impl WeightsNetConfig {
    /// Flow target with RGB guidance: 16 and 8 channels.
    pub fn rgb() -> Self {
        WeightsNetConfig {
            ch1: 16,
            ch2: 8,
            guidance_channels: 3,
            target_channels: 2,
            final_activation: Activation::Sigmoid,
            batch_norm: true,
        }
    }

    /// Flow target with `channels` of intermediate CNN features: 64 and 32.
    pub fn features(channels: usize) -> Self {
        WeightsNetConfig {
            ch1: 64,
            ch2: 32,
            guidance_channels: channels,
            ..Self::rgb()
        }
    }

    /// Whether the widths are one of the two standard pairs.
    pub fn is_default_width(&self) -> bool {
        matches!((self.ch1, self.ch2), (16, 8) | (64, 32))
    }

    pub fn in_channels(&self) -> usize {
        self.guidance_channels + self.target_channels
    }

    pub fn param_count(&self) -> usize {
        param_layout(self, &InterpNetConfig::default())
            .iter()
            .filter(|p| p.name.starts_with("phi."))
            .map(|p| p.shape.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InterpPreset {
    /// Two 5x5 layers per scale, a 2-channel 5x5 fusion, 3x3 head.
    Default,
    /// One more 5x5 encoder layer, one 5x5 layer after fusion, 5x5 head.
    Paper224,
}

impl InterpPreset {
    pub fn name(self) -> &'static str {
        match self {
            InterpPreset::Default => "default",
            InterpPreset::Paper224 => "paper-224",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "default" => Some(InterpPreset::Default),
            "paper-224" => Some(InterpPreset::Paper224),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpNetConfig {
    pub downsamplings: usize,
    pub pooling: PoolKind,
    pub preset: InterpPreset,
}

impl Default for InterpNetConfig {
    fn default() -> Self {
        InterpNetConfig {
            downsamplings: 1,
            pooling: PoolKind::Confidence,
            preset: InterpPreset::Default,
        }
    }
}

impl InterpNetConfig {
    pub fn paper_224() -> Self {
        InterpNetConfig {
            preset: InterpPreset::Paper224,
            ..Self::default()
        }
    }

    pub fn param_count(&self) -> usize {
        param_layout(&WeightsNetConfig::rgb(), self)
            .iter()
            .filter(|p| p.name.starts_with("interp."))
            .map(|p| p.shape.numel())
            .sum()
    }
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
}

fn spec(name: impl Into<String>, shape: Shape) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
    }
}

fn kernel_spec(name: impl Into<String>, in_c: usize, k: usize) -> ParamSpec {
    spec(name, Shape::new(1, in_c, k, k))
}

/// Every parameter of the model in storage order.
pub fn param_layout(w: &WeightsNetConfig, i: &InterpNetConfig) -> Vec<ParamSpec> {
    let vec_shape = |c| Shape::new(1, c, 1, 1);
    let mut out = vec![
        spec("phi.conv1.weight", Shape::new(w.ch1, w.in_channels(), 3, 3)),
        spec("phi.conv1.bias", vec_shape(w.ch1)),
    ];
    if w.batch_norm {
        out.push(spec("phi.bn1.gamma", vec_shape(w.ch1)));
        out.push(spec("phi.bn1.beta", vec_shape(w.ch1)));
    }
    out.push(spec("phi.conv2.weight", Shape::new(w.ch2, w.ch1, 3, 3)));
    out.push(spec("phi.conv2.bias", vec_shape(w.ch2)));
    if w.batch_norm {
        out.push(spec("phi.bn2.gamma", vec_shape(w.ch2)));
        out.push(spec("phi.bn2.beta", vec_shape(w.ch2)));
    }
    out.push(spec(
        "phi.head.weight",
        Shape::new(w.target_channels, w.ch2, 1, 1),
    ));
    out.push(spec("phi.head.bias", vec_shape(w.target_channels)));

    let paper = i.preset == InterpPreset::Paper224;
    out.push(kernel_spec("interp.enc0.0", 1, 5));
    out.push(kernel_spec("interp.enc0.1", 1, 5));
    if paper {
        out.push(kernel_spec("interp.enc0.2", 1, 5));
    }
    for level in 1..=i.downsamplings {
        out.push(kernel_spec(format!("interp.enc{level}.0"), 1, 5));
        out.push(kernel_spec(format!("interp.enc{level}.1"), 1, 5));
    }
    for level in (0..i.downsamplings).rev() {
        out.push(kernel_spec(format!("interp.fuse{level}"), 2, 5));
        if paper && level == 0 {
            out.push(kernel_spec("interp.dec0", 1, 5));
        }
    }
    out.push(kernel_spec("interp.head", 1, if paper { 5 } else { 3 }));
    out
}

/// The weights-estimation network and the interpolation network, with the
/// batch norm running statistics and the scale they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct NcupModel {
    pub weights_cfg: WeightsNetConfig,
    pub interp_cfg: InterpNetConfig,
    pub scale: usize,
    layout: Vec<ParamSpec>,
    params: Vec<Tensor>,
    bn: Vec<BatchNormState>,
}

/// Model parameters recorded on a tape, in layout order.
pub struct BoundParams<'t> {
    pub vars: Vec<Var<'t>>,
}

/// Result of a differentiable forward pass.
pub struct Forward<'t> {
    pub flow: Var<'t>,
    /// Final confidence per flow channel at high resolution.
    pub conf: Var<'t>,
    /// Φ output at low resolution.
    pub weights_lr: Var<'t>,
    /// Set when a channel's sparse grid carried no confidence at all.
    pub empty_grid: bool,
}

/// Output of [`interpolate`].
pub struct Interpolated<'t> {
    pub data: Var<'t>,
    pub conf: Var<'t>,
    pub empty_grid: bool,
}

impl NcupModel {
    /// Randomly initialized model; deterministic per seed.
    pub fn new(
        weights_cfg: WeightsNetConfig,
        interp_cfg: InterpNetConfig,
        scale: usize,
        seed: u64,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be >= 1".into()));
        }
        if weights_cfg.target_channels != 2 {
            return Err(Error::Config(format!(
                "flow upsampling needs 2 target channels, got {}",
                weights_cfg.target_channels
            )));
        }
        let layout = param_layout(&weights_cfg, &interp_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.iter().map(|p| init_param(p, &mut rng)).collect();
        let bn = if weights_cfg.batch_norm {
            vec![
                BatchNormState::new(weights_cfg.ch1),
                BatchNormState::new(weights_cfg.ch2),
            ]
        } else {
            Vec::new()
        };
        Ok(NcupModel {
            weights_cfg,
            interp_cfg,
            scale,
            layout,
            params,
            bn,
        })
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.params[i])
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn weights_net_param_count(&self) -> usize {
        self.weights_cfg.param_count()
    }

    pub fn interp_param_count(&self) -> usize {
        self.interp_cfg.param_count()
    }

    /// Whether every batch norm layer has running statistics.
    pub fn has_running_stats(&self) -> bool {
        self.bn.iter().all(|s| s.initialized)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    fn var<'t>(&self, bound: &BoundParams<'t>, name: &str) -> Var<'t> {
        let i = self
            .layout
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        bound.vars[i]
    }

    /// Φ([target, guidance]) at low resolution.
    pub fn estimate_weights<'t>(
        &mut self,
        bound: &BoundParams<'t>,
        target_lr: Var<'t>,
        guidance_lr: Var<'t>,
        mode: NormMode,
    ) -> Result<Var<'t>> {
        let (ts, gs) = (target_lr.shape(), guidance_lr.shape());
        if (ts.n, ts.h, ts.w) != (gs.n, gs.h, gs.w) {
            return dim_err(format!(
                "weights net: target {ts} and guidance {gs} differ in batch or size"
            ));
        }
        let cfg = &self.weights_cfg;
        if ts.c != cfg.target_channels || gs.c != cfg.guidance_channels {
            return dim_err(format!(
                "weights net expects {}+{} channels, got {}+{}",
                cfg.target_channels, cfg.guidance_channels, ts.c, gs.c
            ));
        }
        let (bn_on, final_act) = (cfg.batch_norm, cfg.final_activation);
        let x = Var::concat_channels(&[target_lr, guidance_lr])?;
        let mut h = x.conv2d(
            self.var(bound, "phi.conv1.weight"),
            Some(self.var(bound, "phi.conv1.bias")),
            1,
            1,
        )?;
        if bn_on {
            let (g, b) = (
                self.var(bound, "phi.bn1.gamma"),
                self.var(bound, "phi.bn1.beta"),
            );
            h = h.batch_norm(g, b, &mut self.bn[0], mode, true)?;
        }
        h = h.activation(Activation::Relu);
        h = h.conv2d(
            self.var(bound, "phi.conv2.weight"),
            Some(self.var(bound, "phi.conv2.bias")),
            1,
            1,
        )?;
        if bn_on {
            let (g, b) = (
                self.var(bound, "phi.bn2.gamma"),
                self.var(bound, "phi.bn2.beta"),
            );
            h = h.batch_norm(g, b, &mut self.bn[1], mode, true)?;
        }
        h = h.activation(Activation::Relu);
        h = h.conv2d(
            self.var(bound, "phi.head.weight"),
            Some(self.var(bound, "phi.head.bias")),
            1,
            0,
        )?;
        Ok(h.activation(final_act))
    }

    /// Differentiable end-to-end pass from low-resolution flow and guidance.
    pub fn forward<'t>(
        &mut self,
        bound: &BoundParams<'t>,
        flow_lr: Var<'t>,
        guidance_lr: Var<'t>,
        mode: NormMode,
    ) -> Result<Forward<'t>> {
        let (fs, gs) = (flow_lr.shape(), guidance_lr.shape());
        if fs.c != 2 {
            return dim_err(format!("flow needs 2 channels, got {fs}"));
        }
        let s = self.scale;
        if s > 1 && (gs.h, gs.w) == (fs.h * s, fs.w * s) {
            return Err(Error::InvalidArgument(format!(
                "guidance is {}x{}, the high resolution; downsample it by {s} to match the {}x{} flow",
                gs.h, gs.w, fs.h, fs.w
            )));
        }
        let weights = self.estimate_weights(bound, flow_lr, guidance_lr, mode)?;
        let kernels: Vec<Var<'t>> = self
            .layout
            .iter()
            .zip(&bound.vars)
            .filter(|(p, _)| p.name.starts_with("interp."))
            .map(|(_, &v)| v)
            .collect();
        let mut flows = Vec::with_capacity(2);
        let mut confs = Vec::with_capacity(2);
        let mut empty = false;
        for c in 0..2 {
            let (d, w) = forward_map_vars(flow_lr.channel(c)?, weights.channel(c)?, s)?;
            let out = interpolate(d, w, &self.interp_cfg, &kernels)?;
            empty |= out.empty_grid;
            flows.push(out.data);
            confs.push(out.conf);
        }
        Ok(Forward {
            flow: Var::concat_channels(&flows)?,
            conf: Var::concat_channels(&confs)?,
            weights_lr: weights,
            empty_grid: empty,
        })
    }

    /// Inference. Uses running batch norm statistics when they exist and
    /// the batch's own statistics otherwise; the model is left unchanged.
    pub fn upsample(&self, flow_lr: &FlowField, guidance_lr: &Tensor) -> Result<UpsampleResult> {
        let mut scratch = self.clone();
        let mode = if self.has_running_stats() {
            NormMode::Eval
        } else {
            NormMode::Train
        };
        let tape = Tape::new();
        let bound = scratch.bind(&tape);
        let out = scratch.forward(
            &bound,
            tape.leaf(flow_lr.tensor().clone()),
            tape.leaf(guidance_lr.clone()),
            mode,
        )?;
        let flow = FlowField::new((*out.flow.value()).clone())?;
        Ok(UpsampleResult {
            flow,
            conf: (*out.conf.value()).clone(),
            weights_lr: (*out.weights_lr.value()).clone(),
            empty_grid: out.empty_grid,
        })
    }

    /// Restores batch norm running statistics, e.g. after a failed step.
    pub fn set_bn_states(&mut self, states: Vec<BatchNormState>) -> Result<()> {
        if states.len() != self.bn.len() {
            return Err(Error::Config("batch norm layer count mismatch".into()));
        }
        self.bn = states;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleResult {
    pub flow: FlowField,
    pub conf: Tensor,
    pub weights_lr: Tensor,
    pub empty_grid: bool,
}

fn init_param(p: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let name = p.name.as_str();
    if name.starts_with("interp.") {
        // raw taps in (-0.5, 0.5): effective taps in (0.47, 0.97)
        return Tensor::from_fn(p.shape, |_, _, _, _| rng.gen_range(-0.5..0.5));
    }
    if name.ends_with(".gamma") {
        return Tensor::ones(p.shape);
    }
    if name.ends_with(".beta") || name.ends_with(".bias") {
        return Tensor::zeros(p.shape);
    }
    let fan_in = (p.shape.c * p.shape.h * p.shape.w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::from_fn(p.shape, |_, _, _, _| rng.gen_range(-bound..bound))
}

/// Densifies one channel of a sparse grid with the interpolation network.
/// `kernels` are the raw interpolation kernels in layout order.
pub fn interpolate<'t>(
    data: Var<'t>,
    conf: Var<'t>,
    cfg: &InterpNetConfig,
    kernels: &[Var<'t>],
) -> Result<Interpolated<'t>> {
    let s = data.shape();
    if s.c != 1 {
        return dim_err(format!("interpolation runs per channel, got {s}"));
    }
    let factor = 1usize << cfg.downsamplings;
    if s.h % factor != 0 || s.w % factor != 0 {
        return dim_err(format!(
            "{}x{} grid is not divisible by {factor} for {} downsamplings",
            s.h, s.w, cfg.downsamplings
        ));
    }
    let empty_grid = conf.value().data().iter().all(|&c| c == 0.0);
    let mut ks = kernels.iter().copied();
    let mut next = || {
        ks.next()
            .ok_or_else(|| Error::Config("too few interpolation kernels".into()))
    };
    let layer =
        |d: Var<'t>, c: Var<'t>, k: Var<'t>| nconv::nconv(d, c, k, nconv::same_pad(k.shape().h));

    let paper = cfg.preset == InterpPreset::Paper224;
    let (mut d, mut c) = layer(data, conf, next()?)?;
    (d, c) = layer(d, c, next()?)?;
    if paper {
        (d, c) = layer(d, c, next()?)?;
    }
    let mut skips = vec![(d, c)];
    for level in 1..=cfg.downsamplings {
        (d, c) = nconv::pool(d, c, 2, cfg.pooling)?;
        (d, c) = layer(d, c, next()?)?;
        (d, c) = layer(d, c, next()?)?;
        if level < cfg.downsamplings {
            skips.push((d, c));
        }
    }
    for level in (0..cfg.downsamplings).rev() {
        (d, c) = nconv::unpool(d, c, 2)?;
        let (sd, sc) = skips[level];
        let k = next()?;
        (d, c) = nconv::fuse(sd, sc, d, c, k, nconv::same_pad(k.shape().h))?;
        if paper && level == 0 {
            (d, c) = layer(d, c, next()?)?;
        }
    }
    (d, c) = layer(d, c, next()?)?;
    if ks.next().is_some() {
        return Err(Error::Config("too many interpolation kernels".into()));
    }
    Ok(Interpolated {
        data: d,
        conf: c,
        empty_grid,
    })
}

/// Bilinear upsampling of each flow channel; with `rescale` the
/// displacements are multiplied by `s` to express them in high-resolution
/// pixels.
pub fn bilinear_baseline(flow_lr: &FlowField, s: usize, rescale: bool) -> Result<FlowField> {
    let up = resize(flow_lr.tensor(), s, ResizeKind::Bilinear)?;
    let up = if rescale && s != 1 {
        up.scale(s as f64)
    } else {
        up
    };
    FlowField::new(up)
}

const CHECKPOINT_HEADER: &str = "NCUP-CHECKPOINT 1";

impl NcupModel {
    /// Checkpoint: a text manifest of `key=value` lines closed by `end`,
    /// then every parameter and batch norm statistic in tensor encoding.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let wc = &self.weights_cfg;
        let ic = &self.interp_cfg;
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        writeln!(w, "scale={}", self.scale)?;
        writeln!(w, "ch1={}", wc.ch1)?;
        writeln!(w, "ch2={}", wc.ch2)?;
        writeln!(w, "guidance_channels={}", wc.guidance_channels)?;
        writeln!(w, "target_channels={}", wc.target_channels)?;
        writeln!(w, "final_activation={}", wc.final_activation.name())?;
        writeln!(w, "batch_norm={}", wc.batch_norm)?;
        writeln!(w, "downsamplings={}", ic.downsamplings)?;
        writeln!(w, "pooling={}", ic.pooling.name())?;
        writeln!(w, "preset={}", ic.preset.name())?;
        writeln!(w, "param_count={}", self.param_count())?;
        for (p, t) in self.layout.iter().zip(&self.params) {
            writeln!(w, "param={} {}", p.name, t.shape())?;
        }
        for (i, st) in self.bn.iter().enumerate() {
            writeln!(w, "bn{}_initialized={}", i + 1, st.initialized)?;
        }
        writeln!(w, "end")?;
        for t in &self.params {
            t.write_to(w)?;
        }
        for st in &self.bn {
            let s = Shape::new(1, st.running_mean.len(), 1, 1);
            Tensor::new(s, st.running_mean.clone())?.write_to(w)?;
            Tensor::new(s, st.running_var.clone())?.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_checkpoint(r: &mut impl BufRead) -> Result<NcupModel> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Format(format!(
                "not a checkpoint (header {:?})",
                line.trim_end()
            )));
        }
        let mut kv: Vec<(String, String)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format(
                    "checkpoint manifest has no end marker".into(),
                ));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line {l:?}")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest {k} is not a count")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest {k} is not a flag")))
        };
        let weights_cfg = WeightsNetConfig {
            ch1: num("ch1")?,
            ch2: num("ch2")?,
            guidance_channels: num("guidance_channels")?,
            target_channels: num("target_channels")?,
            final_activation: Activation::from_name(get("final_activation")?)?,
            batch_norm: flag("batch_norm")?,
        };
        let interp_cfg = InterpNetConfig {
            downsamplings: num("downsamplings")?,
            pooling: PoolKind::from_name(get("pooling")?)
                .ok_or_else(|| Error::Format("unknown pooling".into()))?,
            preset: InterpPreset::from_name(get("preset")?)
                .ok_or_else(|| Error::Format("unknown preset".into()))?,
        };
        let mut model = NcupModel::new(weights_cfg, interp_cfg, num("scale")?, 0)?;
        let declared = num("param_count")?;
        if declared != model.param_count() {
            return Err(Error::Format(format!(
                "parameter count audit: manifest declares {declared}, configuration implies {}",
                model.param_count()
            )));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let mut cur = body.as_slice();
        for (p, slot) in model.layout.iter().zip(model.params.iter_mut()) {
            let t = Tensor::read_from(&mut cur)?;
            if t.shape() != p.shape {
                return Err(Error::Format(format!(
                    "parameter count audit: {} has shape {}, expected {}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            *slot = t;
        }
        for (i, st) in model.bn.iter_mut().enumerate() {
            let mean = Tensor::read_from(&mut cur)?;
            let var = Tensor::read_from(&mut cur)?;
            if mean.len() != st.running_mean.len() || var.len() != st.running_var.len() {
                return Err(Error::Format(format!(
                    "batch norm {} statistics have the wrong size",
                    i + 1
                )));
            }
            st.running_mean = mean.into_data();
            st.running_var = var.into_data();
            st.initialized = flag(&format!("bn{}_initialized", i + 1))?;
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                cur.len()
            )));
        }
        Ok(model)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<NcupModel> {
        Self::read_checkpoint(&mut std::io::Cursor::new(bytes))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<NcupModel> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_flow(h: usize, w: usize) -> FlowField {
        FlowField::new(Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| {
            let (y, x) = (y as f64, x as f64);
            if c == 0 {
                (0.4 * x).sin() * 3.0 + 0.1 * y
            } else {
                (0.3 * y).cos() * 2.0 - 0.05 * x
            }
        }))
        .unwrap()
    }

    fn guidance(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            ((c + 1) * (y + 2 * x)) as f64 % 7.0 / 7.0
        })
    }

    #[test]
    fn parameter_counts() {
        let w = WeightsNetConfig::rgb();
        assert_eq!(
            w.param_count(),
            5 * 16 * 9 + 16 + 2 * 16 + 16 * 8 * 9 + 8 + 2 * 8 + 8 * 2 + 2
        );
        assert_eq!(w.param_count(), 1962);
        assert_eq!(InterpNetConfig::default().param_count(), 159);
        assert_eq!(InterpNetConfig::paper_224().param_count(), 225);
        let two = InterpNetConfig {
            downsamplings: 2,
            ..Default::default()
        };
        assert_eq!(two.param_count(), 259);
        let m = NcupModel::new(w, InterpNetConfig::default(), 4, 1).unwrap();
        assert_eq!(m.param_count(), 1962 + 159);
        let no_bn = WeightsNetConfig {
            batch_norm: false,
            ..WeightsNetConfig::rgb()
        };
        assert_eq!(no_bn.param_count(), 1962 - 48);
        assert!(WeightsNetConfig::features(32).is_default_width());
    }

    #[test]
    fn sigmoid_weights_are_inside_unit_interval() {
        let mut m =
            NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 2, 3).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape);
        let flow = tape.leaf(smooth_flow(6, 5).into_tensor());
        let g = tape.leaf(guidance(6, 5));
        let w = m.estimate_weights(&b, flow, g, NormMode::Train).unwrap();
        let w = w.value();
        assert_eq!(w.shape(), Shape::new(1, 2, 6, 5));
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn no_batch_norm_needs_no_statistics() {
        let cfg = WeightsNetConfig {
            batch_norm: false,
            ..WeightsNetConfig::rgb()
        };
        let m = NcupModel::new(cfg, InterpNetConfig::default(), 2, 3).unwrap();
        assert!(m.has_running_stats());
        let out = m.upsample(&smooth_flow(4, 4), &guidance(4, 4)).unwrap();
        assert_eq!(out.flow.shape(), Shape::new(1, 2, 8, 8));
    }

    #[test]
    fn guidance_mismatch_errors() {
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 4, 3).unwrap();
        let err = m
            .upsample(&smooth_flow(4, 4), &guidance(16, 16))
            .unwrap_err();
        assert!(err.to_string().contains("downsample"), "{err}");
        assert!(matches!(
            m.upsample(&smooth_flow(4, 4), &guidance(4, 5)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_and_constant_flow_preserved() {
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 4, 7).unwrap();
        let z = m
            .upsample(&FlowField::zeros(1, 4, 6), &guidance(4, 6))
            .unwrap();
        assert!(z.flow.tensor().data().iter().all(|v| v.abs() < 1e-6));
        let c = m
            .upsample(&FlowField::constant(1, 4, 6, 2.0, -1.0), &guidance(4, 6))
            .unwrap();
        for y in 0..16 {
            for x in 0..24 {
                let (u, v) = c.flow.at(0, y, x);
                assert!((u - 2.0).abs() < 1e-6 && (v + 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn untrained_model_and_bilinear_agree_on_shape() {
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 4, 11).unwrap();
        let f = smooth_flow(8, 6);
        let ours = m.upsample(&f, &guidance(8, 6)).unwrap().flow;
        let bil = bilinear_baseline(&f, 4, false).unwrap();
        assert_eq!(ours.shape(), bil.shape());
        assert_eq!(ours.shape(), Shape::new(1, 2, 32, 24));
        assert!(ours.tensor().is_finite() && bil.tensor().is_finite());
    }

    #[test]
    fn bilinear_baseline_cases() {
        let f = smooth_flow(3, 4);
        assert_eq!(bilinear_baseline(&f, 1, true).unwrap(), f);
        let c = FlowField::constant(1, 3, 4, 1.5, -0.5);
        let up = bilinear_baseline(&c, 3, false).unwrap();
        assert!(up
            .tensor()
            .channel(0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.5).abs() < 1e-15));
        let up = bilinear_baseline(&c, 3, true).unwrap();
        assert!(up
            .tensor()
            .channel(1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v + 1.5).abs() < 1e-14));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m =
            NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::paper_224(), 4, 5).unwrap();
        // populate running statistics
        let tape = Tape::new();
        let b = m.bind(&tape);
        m.forward(
            &b,
            tape.leaf(smooth_flow(4, 4).into_tensor()),
            tape.leaf(guidance(4, 4)),
            NormMode::Train,
        )
        .unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = NcupModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corrupted_checkpoint_fails_audit() {
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 2, 5).unwrap();
        let text = String::from_utf8_lossy(&m.to_checkpoint_bytes()).into_owned();
        let bytes = m.to_checkpoint_bytes();
        let tampered = {
            let needle = b"param_count=2121";
            let pos = bytes
                .windows(needle.len())
                .position(|w| w == needle)
                .unwrap();
            let mut b = bytes.clone();
            b[pos + needle.len() - 1] = b'2';
            b
        };
        assert!(text.contains("param=interp.head 1x1x3x3"));
        let err = NcupModel::from_checkpoint_bytes(&tampered).unwrap_err();
        assert!(err.to_string().contains("audit"), "{err}");
        assert!(NcupModel::from_checkpoint_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn interpolation_rejects_indivisible_grid() {
        let tape = Tape::new();
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 1, 5).unwrap();
        let b = m.bind(&tape);
        let kernels: Vec<_> = b.vars[b.vars.len() - 6..].to_vec();
        let d = tape.leaf(Tensor::zeros(Shape::new(1, 1, 5, 4)));
        assert!(interpolate(d, d, &InterpNetConfig::default(), &kernels).is_err());
    }

    #[test]
    fn empty_grid_is_flagged_not_fatal() {
        let tape = Tape::new();
        let m = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 1, 5).unwrap();
        let b = m.bind(&tape);
        let kernels: Vec<_> = b.vars[b.vars.len() - 6..].to_vec();
        let d = tape.leaf(Tensor::zeros(Shape::new(1, 1, 8, 8)));
        let out = interpolate(d, d, &InterpNetConfig::default(), &kernels).unwrap();
        assert!(out.empty_grid);
        assert!(out.conf.value().max() < 1e-12);
    }
}
