//! Multi-scale loss, Adam, the synthetic piecewise-constant flow generator
//! and the end-to-end training loop.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::flowio::{epe, FlowField};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{NormMode, Shape, Tensor};
use crate::upsampler::{bilinear_baseline, InterpNetConfig, NcupModel, WeightsNetConfig};

/// Level weights of the multi-scale loss. Level `p` compares flow at
/// 1 / 2^(p-1) of the full resolution, so level 1 is full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alphas: BTreeMap<u32, f64>,
}

/// Coarse-level weights for levels 3..=7.
pub const PYRAMID_ALPHAS: [(u32, f64); 5] =
    [(3, 0.32), (4, 0.08), (5, 0.02), (6, 0.01), (7, 0.005)];

/// Default weight of the full-resolution level.
pub const DEFAULT_ALPHA1: f64 = 0.02;

impl LossConfig {
    pub fn new(alphas: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let cfg = LossConfig {
            alphas: alphas.into_iter().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Levels {1, 3, 4, 5, 6, 7}.
    pub fn pyramid(alpha1: f64) -> Result<Self> {
        Self::new(std::iter::once((1, alpha1)).chain(PYRAMID_ALPHAS))
    }

    /// Full resolution only.
    pub fn full_resolution(alpha1: f64) -> Result<Self> {
        Self::new([(1, alpha1)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("loss needs at least one level".into()));
        }
        for (&p, &a) in &self.alphas {
            if p == 0 {
                return Err(Error::Config("levels start at 1".into()));
            }
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "alpha for level {p} must be positive, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Downsampling factor of level `p`.
pub fn level_factor(p: u32) -> usize {
    1usize << (p - 1)
}

/// Differentiable multi-scale loss: Σ_p α_p · mean over pixels of the
/// squared end-point error at level p.
pub fn multiscale_loss_vars<'t>(
    preds: &BTreeMap<u32, Var<'t>>,
    gts: &BTreeMap<u32, Var<'t>>,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let mut total: Option<Var<'t>> = None;
    for (&p, &alpha) in &cfg.alphas {
        let pred = *preds
            .get(&p)
            .ok_or_else(|| Error::Config(format!("no prediction for level {p}")))?;
        let gt = *gts
            .get(&p)
            .ok_or_else(|| Error::Config(format!("no groundtruth for level {p}")))?;
        let s = pred.shape();
        if gt.shape() != s {
            return dim_err(format!(
                "level {p}: prediction {s} vs groundtruth {}",
                gt.shape()
            ));
        }
        let diff = pred.sub(gt)?;
        let term = diff
            .mul(diff)?
            .sum()
            .scale(alpha / (s.n * s.plane()) as f64);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("validated config has a level"))
}

pub fn multiscale_loss(
    preds: &BTreeMap<u32, FlowField>,
    gts: &BTreeMap<u32, FlowField>,
    cfg: &LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let lift = |m: &BTreeMap<u32, FlowField>| -> BTreeMap<u32, Var<'_>> {
        m.iter()
            .map(|(&p, f)| (p, tape.leaf(f.tensor().clone())))
            .collect()
    };
    let loss = multiscale_loss_vars(&lift(preds), &lift(gts), cfg)?;
    let v = loss.value().data()[0];
    Ok(v)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return dim_err(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            g.expect_shape(p.shape(), "adam gradient")?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return dim_err("adam: parameter list changed between steps");
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub flow_hr_gt: FlowField,
    /// Pseudo-RGB (1, 3, H, W) in roughly [0, 1].
    pub guidance_hr: Tensor,
    /// `s x s` block means of `flow_hr_gt`.
    pub flow_lr: FlowField,
    pub seed: u64,
    pub regions: usize,
}

impl SyntheticSample {
    pub fn scale(&self) -> usize {
        self.flow_hr_gt.height() / self.flow_lr.height()
    }

    pub fn guidance_lr(&self) -> Result<Tensor> {
        self.guidance_hr.area_downsample(self.scale())
    }
}

/// Star-shaped polygon around a center, vertices in angular order.
struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let cx = rng.gen_range(0.0..wf);
        let cy = rng.gen_range(0.0..hf);
        let r = rng.gen_range(0.15..0.5) * hf.min(wf);
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles
            .into_iter()
            .map(|a| {
                let rr = r * rng.gen_range(0.5..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        Polygon { vertices }
    }

    /// Even-odd ray casting.
    fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[(i + n - 1) % n];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    }
}

/// Noise level of the rendered guidance.
pub const GUIDANCE_NOISE: f64 = 0.02;

/// Piecewise-constant flow over 2 to 6 regions (a background plus random
/// polygons), its region image and its area-downsampled version.
pub fn gen_synthetic(seed: u64, h: usize, w: usize, s: usize) -> Result<SyntheticSample> {
    let regions = ChaCha8Rng::seed_from_u64(seed).gen_range(2..=6);
    gen_synthetic_with_regions(seed, h, w, s, regions)
}

/// As [`gen_synthetic`] with an explicit region count (1 gives a constant
/// field).
pub fn gen_synthetic_with_regions(
    seed: u64,
    h: usize,
    w: usize,
    s: usize,
    regions: usize,
) -> Result<SyntheticSample> {
    if s == 0 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return dim_err(format!("{h}x{w} is not divisible by scale {s}"));
    }
    if regions == 0 {
        return Err(Error::InvalidArgument("need at least one region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // consumed here so the region count drawn by gen_synthetic does not
    // correlate with the first polygon
    let _: usize = rng.gen_range(2..=6);
    let flows: Vec<(f64, f64)> = (0..regions)
        .map(|_| (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)))
        .collect();
    let colors: Vec<[f64; 3]> = (0..regions)
        .map(|_| {
            [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ]
        })
        .collect();
    let polygons: Vec<Polygon> = (1..regions)
        .map(|_| Polygon::random(&mut rng, h, w))
        .collect();

    let mut label = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (k, poly) in polygons.iter().enumerate() {
                if poly.contains(px, py) {
                    label[y * w + x] = k + 1;
                }
            }
        }
    }
    let flow = Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| {
        let (u, v) = flows[label[y * w + x]];
        if c == 0 {
            u
        } else {
            v
        }
    });
    let noise = Normal::new(0.0, GUIDANCE_NOISE).expect("valid sigma");
    let guidance = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        colors[label[y * w + x]][c] + noise.sample(&mut rng)
    });
    let flow_lr = FlowField::new(flow.area_downsample(s)?)?;
    Ok(SyntheticSample {
        flow_hr_gt: FlowField::new(flow)?,
        guidance_hr: guidance,
        flow_lr,
        seed,
        regions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub scale: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) from which the learning rate is halved once more.
    pub lr_halve_at: Vec<usize>,
    pub weights_cfg: WeightsNetConfig,
    pub interp_cfg: InterpNetConfig,
    pub loss: LossConfig,
}

/// Seeds of held-out samples start here, far from the training seeds.
pub const VAL_SEED_BASE: u64 = 1 << 40;

impl TrainConfig {
    /// 64x64 samples upsampled by 4, 500 training and 50 held-out samples,
    /// 20 epochs of Adam from 1e-4, halved at epochs 10 and 15.
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            seed,
            train_samples: 500,
            val_samples: 50,
            height: 64,
            width: 64,
            scale: 4,
            epochs: 20,
            batch_size: 1,
            lr: 1e-4,
            lr_halve_at: vec![10, 15],
            weights_cfg: WeightsNetConfig::rgb(),
            interp_cfg: InterpNetConfig::default(),
            loss: LossConfig::full_resolution(DEFAULT_ALPHA1).expect("positive alpha"),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_halve_at.iter().filter(|&&e| epoch >= e).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn val_seed(&self, j: usize) -> u64 {
        VAL_SEED_BASE + j as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Config(
                "batch size and sample count must be positive".into(),
            ));
        }
        if self.scale == 0 || self.height % self.scale != 0 || self.width % self.scale != 0 {
            return Err(Error::Config(format!(
                "{}x{} is not divisible by scale {}",
                self.height, self.width, self.scale
            )));
        }
        for &p in self.loss.alphas.keys() {
            let f = level_factor(p);
            if self.height % f != 0 || self.width % f != 0 {
                return Err(Error::Config(format!(
                    "level {p} does not divide {}x{}",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_epe_ncup: f64,
    pub val_epe_bilinear: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_epe_ncup,val_epe_bilinear";

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.5e},{:.5e},{:.5e}",
            self.epoch, self.train_loss, self.val_epe_ncup, self.val_epe_bilinear
        )
    }
}

/// One optimization step on a batch; returns the loss.
fn train_step(
    model: &mut NcupModel,
    opt: &mut Adam,
    batch: &[&SyntheticSample],
    loss_cfg: &LossConfig,
    epoch: usize,
) -> Result<f64> {
    let flows: Vec<&Tensor> = batch.iter().map(|s| s.flow_lr.tensor()).collect();
    let guid: Vec<Tensor> = batch
        .iter()
        .map(|s| s.guidance_lr())
        .collect::<Result<_>>()?;
    let gts: Vec<&Tensor> = batch.iter().map(|s| s.flow_hr_gt.tensor()).collect();
    let flow_lr = Tensor::stack_batch(&flows)?;
    let guidance_lr = Tensor::stack_batch(&guid.iter().collect::<Vec<_>>())?;
    let gt = Tensor::stack_batch(&gts)?;

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let bn_before = model.bn_states().to_vec();
    let out = model.forward(
        &bound,
        tape.leaf(flow_lr),
        tape.leaf(guidance_lr),
        NormMode::Train,
    )?;
    let gt_var = tape.leaf(gt);
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for &p in loss_cfg.alphas.keys() {
        let f = level_factor(p);
        if f == 1 {
            preds.insert(p, out.flow);
            gts.insert(p, gt_var);
        } else {
            preds.insert(p, out.flow.area_downsample(f)?);
            gts.insert(p, gt_var.area_downsample(f)?);
        }
    }
    let loss = multiscale_loss_vars(&preds, &gts, loss_cfg)?;
    let value = loss.value().data()[0];
    let grads = tape.backward_scalar(loss)?;
    let grads: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        model.set_bn_states(bn_before)?;
        return Err(Error::NonFiniteLoss {
            epoch,
            seeds: batch.iter().map(|s| s.seed).collect(),
        });
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Mean EPE of the model and of bilinear upsampling over `samples`.
pub fn evaluate(model: &NcupModel, samples: &[SyntheticSample]) -> Result<(f64, f64)> {
    let mut ours = 0.0;
    let mut bil = 0.0;
    for s in samples {
        let up = model.upsample(&s.flow_lr, &s.guidance_lr()?)?;
        ours += epe(&up.flow, &s.flow_hr_gt)?;
        bil += epe(
            &bilinear_baseline(&s.flow_lr, s.scale(), false)?,
            &s.flow_hr_gt,
        )?;
    }
    let n = samples.len().max(1) as f64;
    Ok((ours / n, bil / n))
}

pub struct TrainOutcome {
    pub model: NcupModel,
    pub log: Vec<EpochLog>,
}

/// Trains the weights network and interpolation kernels jointly. Fully
/// deterministic given the configuration. `on_epoch` sees each log line as
/// it is produced.
pub fn train_loop(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = NcupModel::new(
        cfg.weights_cfg.clone(),
        cfg.interp_cfg.clone(),
        cfg.scale,
        cfg.seed,
    )?;
    let mut log = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, log });
    }
    let train: Vec<SyntheticSample> = (0..cfg.train_samples)
        .map(|i| gen_synthetic(cfg.train_seed(i), cfg.height, cfg.width, cfg.scale))
        .collect::<Result<_>>()?;
    let val: Vec<SyntheticSample> = (0..cfg.val_samples)
        .map(|j| gen_synthetic(cfg.val_seed(j), cfg.height, cfg.width, cfg.scale))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train[i]).collect();
            total += train_step(&mut model, &mut opt, &batch, &cfg.loss, epoch)?;
            batches += 1;
        }
        let (val_epe_ncup, val_epe_bilinear) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&model, &val)?
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            val_epe_ncup,
            val_epe_bilinear,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
