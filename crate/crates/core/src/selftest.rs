//! Built-in invariant suites: gradient checks, a direct-loop evaluation of
//! normalized convolution, sparsify round trips and the parameter audit.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, random_projection, GradCheckOptions, GradCheckReport};
use crate::nconv::{self, NConvKernel, PoolKind, EPS};
use crate::sparsify::{self, forward_map, read_back};
use crate::tensor::tape::Var;
use crate::tensor::{Activation, BatchNormState, NormMode, ResizeKind, Shape, Tensor};
use crate::train::{multiscale_loss_vars, LossConfig};
use crate::upsampler::{interpolate, BoundParams, InterpNetConfig, NcupModel, WeightsNetConfig};

/// Gradient tolerance of the suites.
pub const GRAD_TOL: f64 = 1e-5;
/// Tolerance of the loop-evaluation comparison.
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

type GradCase = fn(u64) -> Result<GradCheckReport>;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..Default::default()
    }
}

fn grad_conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(2, 2, 5, 6), -1.0, 1.0, &mut rng);
    let k = uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
    let b = uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, &mut rng);
    check_gradients(
        &[x, k, b],
        |_, v| {
            let a = v[0].conv2d(v[1], Some(v[2]), 1, 1)?;
            let s = v[0].conv2d(v[1], None, 2, 0)?;
            random_projection(a, seed)?.add(random_projection(s, seed + 1)?)
        },
        &opts(seed),
    )
}

fn grad_activations(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(1, 2, 4, 4), -3.0, 3.0, &mut rng);
    check_gradients(
        &[x],
        |_, v| {
            let mut acc = None;
            for (i, kind) in [Activation::Relu, Activation::Sigmoid, Activation::Softplus]
                .into_iter()
                .enumerate()
            {
                let t = random_projection(v[0].activation(kind), seed + i as u64)?;
                acc = Some(match acc {
                    Some(a) => t.add(a)?,
                    None => t,
                });
            }
            Ok(acc.expect("three activations"))
        },
        &opts(seed),
    )
}

fn grad_batch_norm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(2, 3, 3, 4), -2.0, 2.0, &mut rng);
    let g = uniform(Shape::new(1, 3, 1, 1), 0.5, 1.5, &mut rng);
    let b = uniform(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut rng);
    check_gradients(
        &[x, g, b],
        |_, v| {
            let mut st = BatchNormState::new(3);
            let y = v[0].batch_norm(v[1], v[2], &mut st, NormMode::Train, true)?;
            random_projection(y, seed)
        },
        &opts(seed),
    )
}

fn grad_resize(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(1, 2, 3, 4), -1.0, 1.0, &mut rng);
    check_gradients(
        &[x],
        |_, v| {
            let a = random_projection(v[0].resize(2, ResizeKind::Nearest)?, seed)?;
            let b = random_projection(v[0].resize(3, ResizeKind::Bilinear)?, seed + 1)?;
            let c = random_projection(v[0].area_downsample(1)?, seed + 2)?;
            a.add(b)?.add(c)
        },
        &opts(seed),
    )
}

fn grad_elementwise(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
    let b = uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
    let d = uniform(Shape::new(1, 2, 4, 4), 0.5, 2.0, &mut rng);
    let m = uniform(Shape::new(1, 2, 1, 1), 0.5, 2.0, &mut rng);
    check_gradients(
        &[a, b, d, m],
        |_, v| {
            let p = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.7);
            let q = p.div_eps(v[2], EPS)?.div_channels(v[3])?;
            let cat = Var::concat_channels(&[q, v[0].channel(1)?])?;
            let pooled = cat.area_downsample(2)?;
            random_projection(pooled, seed)
        },
        &opts(seed),
    )
}

fn grad_kernel_mass(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
    check_gradients(
        &[k],
        |_, v| random_projection(v[0].kernel_mass(), seed),
        &opts(seed),
    )
}

fn grad_gather_scatter(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
    let w = uniform(Shape::new(1, 2, 3, 3), 0.1, 1.0, &mut rng);
    check_gradients(
        &[x, w],
        |_, v| {
            let (d, c) = sparsify::forward_map_vars(v[0], v[1], 3)?;
            let idx = sparsify::scatter_index(v[0].shape(), 3);
            let back = d.gather(idx, v[0].shape())?;
            random_projection(c, seed)?.add(random_projection(
                back.mul(d.area_downsample(3)?)?,
                seed + 1,
            )?)
        },
        &opts(seed),
    )
}

fn grad_nconv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = uniform(Shape::new(1, 2, 6, 6), -2.0, 2.0, &mut rng);
    let c = uniform(Shape::new(1, 2, 6, 6), 0.05, 1.0, &mut rng);
    let k = uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
    check_gradients(
        &[d, c, k],
        |_, v| {
            let (dd, cc) = nconv::nconv(v[0], v[1], v[2], 1)?;
            random_projection(dd, seed)?.add(random_projection(cc, seed + 1)?)
        },
        &opts(seed),
    )
}

fn grad_pool(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = uniform(Shape::new(1, 1, 4, 6), -2.0, 2.0, &mut rng);
    let c = uniform(Shape::new(1, 1, 4, 6), 0.05, 1.0, &mut rng);
    check_gradients(
        &[d, c],
        |_, v| {
            let (a, ac) = nconv::pool(v[0], v[1], 2, PoolKind::Confidence)?;
            let (b, bc) = nconv::pool(v[0], v[1], 2, PoolKind::Max)?;
            let (u, uc) = nconv::unpool(a, ac, 2)?;
            let t = random_projection(u, seed)?.add(random_projection(uc, seed + 1)?)?;
            t.add(random_projection(b.mul(bc)?, seed + 2)?)
        },
        &opts(seed),
    )
}

fn grad_fuse(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(1, 1, 5, 5);
    let da = uniform(s, -2.0, 2.0, &mut rng);
    let ca = uniform(s, 0.05, 1.0, &mut rng);
    let db = uniform(s, -2.0, 2.0, &mut rng);
    let cb = uniform(s, 0.05, 1.0, &mut rng);
    let k = uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
    check_gradients(
        &[da, ca, db, cb, k],
        |_, v| {
            let (d, c) = nconv::fuse(v[0], v[1], v[2], v[3], v[4], 1)?;
            random_projection(d, seed)?.add(random_projection(c, seed + 1)?)
        },
        &opts(seed),
    )
}

fn grad_interpolation(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InterpNetConfig::default();
    let model = NcupModel::new(WeightsNetConfig::rgb(), cfg.clone(), 2, seed)?;
    let mut inputs = vec![
        uniform(Shape::new(1, 1, 4, 4), -2.0, 2.0, &mut rng),
        uniform(Shape::new(1, 1, 4, 4), 0.05, 1.0, &mut rng),
    ];
    for (spec, p) in model.layout().iter().zip(model.params()) {
        if spec.name.starts_with("interp.") {
            inputs.push(p.clone());
        }
    }
    check_gradients(
        &inputs,
        |_, v| {
            let (d, c) = sparsify::forward_map_vars(v[0], v[1], 2)?;
            let out = interpolate(d, c, &cfg, &v[2..])?;
            random_projection(out.data, seed)?.add(random_projection(out.conf, seed + 1)?)
        },
        &opts(seed),
    )
}

fn grad_pipeline(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 2, seed)?;
    let np = model.params().len();
    let mut inputs = model.params().to_vec();
    // non-zero betas and biases so every parameter carries a generic gradient
    for (spec, p) in model.layout().iter().zip(inputs.iter_mut()) {
        if spec.name.ends_with(".bias") || spec.name.ends_with(".beta") {
            *p = uniform(p.shape(), -0.1, 0.1, &mut rng);
        }
    }
    inputs.push(uniform(Shape::new(2, 2, 4, 4), -3.0, 3.0, &mut rng));
    inputs.push(uniform(Shape::new(2, 3, 4, 4), 0.0, 1.0, &mut rng));
    inputs.push(uniform(Shape::new(2, 2, 8, 8), -3.0, 3.0, &mut rng));
    let loss = LossConfig::new([(1, 0.02), (2, 0.08)])?;
    check_gradients(
        &inputs,
        |_, v| {
            let mut m = model.clone();
            let bound = BoundParams {
                vars: v[..np].to_vec(),
            };
            let out = m.forward(&bound, v[np], v[np + 1], NormMode::Train)?;
            let gt = v[np + 2];
            let preds = [(1, out.flow), (2, out.flow.area_downsample(2)?)].into();
            let gts = [(1, gt), (2, gt.area_downsample(2)?)].into();
            multiscale_loss_vars(&preds, &gts, &loss)
        },
        &opts(seed),
    )
}

/// Named gradient cases, each run per seed.
pub const GRADIENT_CASES: [(&str, GradCase); 12] = [
    ("conv2d", grad_conv2d),
    ("activations", grad_activations),
    ("batch_norm", grad_batch_norm),
    ("resize", grad_resize),
    ("elementwise", grad_elementwise),
    ("kernel_mass", grad_kernel_mass),
    ("gather_scatter", grad_gather_scatter),
    ("nconv", grad_nconv),
    ("pool_unpool", grad_pool),
    ("fuse", grad_fuse),
    ("interpolation_net", grad_interpolation),
    ("pipeline", grad_pipeline),
];

/// One result per gradient case, worst relative error over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Vec<SuiteResult> {
    GRADIENT_CASES
        .iter()
        .map(|&(name, case)| {
            let mut worst = 0.0f64;
            let mut checked = 0;
            let mut kinks = 0;
            let mut error = None;
            for &seed in seeds {
                match case(seed) {
                    Ok(r) => {
                        worst = worst.max(r.max_rel_err);
                        checked += r.checked;
                        kinks += r.kinks_skipped;
                    }
                    Err(e) => error = Some(e.to_string()),
                }
            }
            let passed = error.is_none() && worst < GRAD_TOL;
            let detail = match error {
                Some(e) => format!("error={e}"),
                None => format!("max_rel_err={worst:.6e} checked={checked} kinks_skipped={kinks}"),
            };
            SuiteResult {
                name: format!("grad.{name}"),
                passed,
                detail,
            }
        })
        .collect()
}

/// Normalized convolution evaluated term by term, with effective kernel
/// taps `a` and zero padding of `pad`.
pub fn nconv_by_loops(data: &Tensor, conf: &Tensor, a: &Tensor, pad: usize) -> (Tensor, Tensor) {
    let s = data.shape();
    let k = a.shape();
    let os = Shape::new(s.n, k.n, s.h, s.w);
    let mut d_out = Tensor::zeros(os);
    let mut c_out = Tensor::zeros(os);
    for n in 0..s.n {
        for o in 0..k.n {
            let mut mass = 0.0;
            for i in 0..k.c {
                for ky in 0..k.h {
                    for kx in 0..k.w {
                        mass += a.at(o, i, ky, kx);
                    }
                }
            }
            for y in 0..s.h {
                for x in 0..s.w {
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..k.c {
                        for ky in 0..k.h {
                            for kx in 0..k.w {
                                let yy = y as isize + ky as isize - pad as isize;
                                let xx = x as isize + kx as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                let (yy, xx) = (yy as usize, xx as usize);
                                let w = a.at(o, i, ky, kx);
                                num += data.at(n, i, yy, xx) * conf.at(n, i, yy, xx) * w;
                                den += conf.at(n, i, yy, xx) * w;
                            }
                        }
                    }
                    d_out.set(n, o, y, x, num / (den + EPS));
                    c_out.set(n, o, y, x, den / mass);
                }
            }
        }
    }
    (d_out, c_out)
}

/// Worst absolute difference between `nconv_forward` and the loop form over
/// `instances` random problems with inputs up to 7x7.
pub fn nconv_oracle_gap(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let c = rng.gen_range(1..=3);
        let size = [1, 3, 5][rng.gen_range(0..3)];
        let shape = Shape::new(1, c, h, w);
        let data = uniform(shape, -10.0, 10.0, &mut rng);
        let conf = Tensor::from_fn(shape, |_, _, _, _| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        });
        let raw = uniform(
            Shape::new(rng.gen_range(1..=3), c, size, size),
            -2.0,
            2.0,
            &mut rng,
        );
        let kernel = NConvKernel::from_raw(raw)?;
        let (d, cf) = nconv::nconv_forward(&data, &conf, &kernel)?;
        let (od, oc) = nconv_by_loops(&data, &conf, &kernel.effective(), nconv::same_pad(size));
        worst = worst.max(d.max_abs_diff(&od)?).max(cf.max_abs_diff(&oc)?);
    }
    Ok(worst)
}

/// Injectivity, exact mass and bit-exact read-back for every scale in
/// `scales`.
pub fn sparsify_round_trips(seed: u64, scales: &[usize]) -> Result<Vec<(usize, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &s in scales {
        let shape = Shape::new(1, 2, rng.gen_range(1..=9), rng.gen_range(1..=9));
        let x = uniform(shape, -8.0, 8.0, &mut rng);
        let w = uniform(shape, 0.01, 1.0, &mut rng);
        let idx = sparsify::scatter_index(shape, s);
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let injective = sorted.len() == idx.len();
        let g = forward_map(&x, &w, s as f64)?;
        let populated = g.conf.data().iter().filter(|&&c| c != 0.0).count() == shape.numel();
        // every source value lands exactly once, unchanged
        let multiset = |t: &Tensor| {
            let mut v: Vec<u64> = t
                .data()
                .iter()
                .filter(|v| **v != 0.0)
                .map(|v| v.to_bits())
                .collect();
            v.sort_unstable();
            v
        };
        let mass = multiset(&x) == multiset(&g.data) && multiset(&w) == multiset(&g.conf);
        let back = read_back(&g.data, s)? == x && read_back(&g.conf, s)? == w;
        out.push((s, injective && populated && mass && back));
    }
    Ok(out)
}

/// Parameter counts of the default model, and a checkpoint whose manifest
/// count was tampered with must be rejected.
pub fn parameter_audit(seed: u64) -> Result<(bool, String)> {
    let model = NcupModel::new(WeightsNetConfig::rgb(), InterpNetConfig::default(), 4, seed)?;
    let (phi, interp, total) = (
        model.weights_net_param_count(),
        model.interp_param_count(),
        model.param_count(),
    );
    let ranges_ok = (1800..=2200).contains(&phi) && interp <= 300 && (1900..=2600).contains(&total);
    let bytes = model.to_checkpoint_bytes();
    let reloaded = NcupModel::from_checkpoint_bytes(&bytes)?;
    let round_trip = reloaded == model;
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let needle = format!("param_count={total}");
    let tampered_rejected = match text.find(&needle) {
        Some(at) => {
            let mut bad = bytes.clone();
            let digit = at + needle.len() - 1;
            bad[digit] = if bad[digit] == b'9' {
                b'0'
            } else {
                bad[digit] + 1
            };
            NcupModel::from_checkpoint_bytes(&bad).is_err()
        }
        None => false,
    };
    Ok((
        ranges_ok && round_trip && tampered_rejected,
        format!(
            "weights_net={phi} interp={interp} total={total} round_trip={round_trip} tamper_rejected={tampered_rejected}"
        ),
    ))
}

/// All suites, in a fixed order.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let seeds: Vec<u64> = (0..5).map(|i| seed.wrapping_add(i)).collect();
    let mut results = gradient_suite(&seeds);
    results.push(match nconv_oracle_gap(seed, 50) {
        Ok(gap) => SuiteResult {
            name: "nconv.oracle".into(),
            passed: gap < ORACLE_TOL,
            detail: format!("max_abs_diff={gap:.6e}"),
        },
        Err(e) => failed("nconv.oracle", e),
    });
    results.push(match sparsify_round_trips(seed, &[1, 2, 3, 4, 8]) {
        Ok(r) => SuiteResult {
            name: "sparsify.round_trip".into(),
            passed: r.iter().all(|&(_, ok)| ok),
            detail: r
                .iter()
                .map(|(s, ok)| format!("s{s}={}", if *ok { "ok" } else { "bad" }))
                .collect::<Vec<_>>()
                .join(" "),
        },
        Err(e) => failed("sparsify.round_trip", e),
    });
    results.push(match parameter_audit(seed) {
        Ok((passed, detail)) => SuiteResult {
            name: "param.audit".into(),
            passed,
            detail,
        },
        Err(e) => failed("param.audit", e),
    });
    results
}

fn failed(name: &str, e: crate::Error) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        passed: false,
        detail: format!("error={e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_gap_is_tiny() {
        assert!(nconv_oracle_gap(1, 10).unwrap() < ORACLE_TOL);
    }

    #[test]
    fn sparsify_suite_passes() {
        assert!(sparsify_round_trips(2, &[1, 2, 3, 4, 8])
            .unwrap()
            .iter()
            .all(|r| r.1));
    }

    #[test]
    fn audit_passes() {
        let (ok, detail) = parameter_audit(0).unwrap();
        assert!(ok, "{detail}");
    }

    #[test]
    fn cheap_gradient_cases_pass() {
        for (name, case) in &GRADIENT_CASES[..10] {
            let r = case(3).unwrap();
            assert!(r.passes(GRAD_TOL), "{name}: {r:?}");
        }
    }
}
