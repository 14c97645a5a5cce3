//! Library results against independent direct evaluations.

use std::collections::BTreeMap;

use ncup::flowio::{epe, flow_to_color, rgb_hue, weights_map_image, FlowField};
use ncup::nconv::{nconv_forward, NConvKernel, EPS};
use ncup::tensor::{resize, ResizeKind, Shape, Tensor};
use ncup::train::{gen_synthetic, multiscale_loss, train_loop, LossConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Per output pixel: gather the window, normalize the kernel separately.
fn windowed_nconv(data: &Tensor, conf: &Tensor, a: &Tensor) -> (Tensor, Tensor) {
    let (s, k) = (data.shape(), a.shape());
    let r = (k.h / 2) as isize;
    let out = Shape::new(s.n, k.n, s.h, s.w);
    let mut d = vec![0.0; out.numel()];
    let mut c = vec![0.0; out.numel()];
    let mut i = 0;
    for n in 0..s.n {
        for o in 0..k.n {
            let taps: Vec<f64> = (0..k.c * k.h * k.w)
                .map(|j| a.at(o, j / (k.h * k.w), (j / k.w) % k.h, j % k.w))
                .collect();
            let mass: f64 = taps.iter().sum();
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut wsum = 0.0;
                    let mut dsum = 0.0;
                    for (j, &t) in taps.iter().enumerate() {
                        let ch = j / (k.h * k.w);
                        let yy = y + (j / k.w % k.h) as isize - r;
                        let xx = x + (j % k.w) as isize - r;
                        if (0..s.h as isize).contains(&yy) && (0..s.w as isize).contains(&xx) {
                            let cf = conf.at(n, ch, yy as usize, xx as usize);
                            wsum += t * cf;
                            dsum += t * cf * data.at(n, ch, yy as usize, xx as usize);
                        }
                    }
                    d[i] = dsum / (wsum + EPS);
                    c[i] = wsum / mass;
                    i += 1;
                }
            }
        }
    }
    (Tensor::new(out, d).unwrap(), Tensor::new(out, c).unwrap())
}

#[test]
fn nconv_matches_windowed_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let c = rng.gen_range(1..=2);
        let shape = Shape::new(
            rng.gen_range(1..=2),
            c,
            rng.gen_range(1..=7),
            rng.gen_range(1..=7),
        );
        let data = rand_tensor(shape, -5.0, 5.0, &mut rng);
        let conf = rand_tensor(shape, 0.0, 1.0, &mut rng);
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        let kernel =
            NConvKernel::from_raw(rand_tensor(Shape::new(2, c, k, k), -3.0, 3.0, &mut rng))
                .unwrap();
        let (d, cf) = nconv_forward(&data, &conf, &kernel).unwrap();
        let (od, oc) = windowed_nconv(&data, &conf, &kernel.effective());
        assert!(d.max_abs_diff(&od).unwrap() < 1e-10);
        assert!(cf.max_abs_diff(&oc).unwrap() < 1e-10);
    }
}

#[test]
fn epe_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Shape::new(2, 2, 5, 9);
    let a = FlowField::new(rand_tensor(s, -9.0, 9.0, &mut rng)).unwrap();
    let b = FlowField::new(rand_tensor(s, -9.0, 9.0, &mut rng)).unwrap();
    let mut total = 0.0;
    for n in 0..2 {
        for y in 0..5 {
            for x in 0..9 {
                let (pu, pv) = a.at(n, y, x);
                let (gu, gv) = b.at(n, y, x);
                total += (pu - gu).hypot(pv - gv);
            }
        }
    }
    let got = epe(&a, &b).unwrap();
    assert!((got - total / 90.0).abs() < 1e-12);
    assert_eq!(got, epe(&b, &a).unwrap());
}

#[test]
fn synthetic_low_res_is_block_mean() {
    for seed in 0..5 {
        let smp = gen_synthetic(seed, 32, 48, 4).unwrap();
        for y in 0..8 {
            for x in 0..12 {
                let (mut su, mut sv) = (0.0, 0.0);
                for dy in 0..4 {
                    for dx in 0..4 {
                        let (u, v) = smp.flow_hr_gt.at(0, 4 * y + dy, 4 * x + dx);
                        su += u;
                        sv += v;
                    }
                }
                let (u, v) = smp.flow_lr.at(0, y, x);
                assert!((u - su / 16.0).abs() < 1e-12 && (v - sv / 16.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loss_is_direct_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    let alphas = [(1u32, 0.02), (2, 0.08), (3, 0.32)];
    let mut expected = 0.0;
    for &(p, alpha) in &alphas {
        let side = 16 >> (p - 1);
        let s = Shape::new(2, 2, side, side);
        let a = FlowField::new(rand_tensor(s, -3.0, 3.0, &mut rng)).unwrap();
        let b = FlowField::new(rand_tensor(s, -3.0, 3.0, &mut rng)).unwrap();
        let mut sq = 0.0;
        for n in 0..2 {
            for y in 0..side {
                for x in 0..side {
                    let (pu, pv) = a.at(n, y, x);
                    let (gu, gv) = b.at(n, y, x);
                    sq += (pu - gu).powi(2) + (pv - gv).powi(2);
                }
            }
        }
        expected += alpha * sq / (2 * side * side) as f64;
        preds.insert(p, a);
        gts.insert(p, b);
    }
    let cfg = LossConfig::new(alphas).unwrap();
    let got = multiscale_loss(&preds, &gts, &cfg).unwrap();
    assert!((got - expected).abs() < 1e-12 * expected.max(1.0));

    // permuting the batch of every level leaves the loss unchanged
    let swap = |m: &BTreeMap<u32, FlowField>| -> BTreeMap<u32, FlowField> {
        m.iter()
            .map(|(&p, f)| {
                (
                    p,
                    FlowField::new(f.tensor().select_batch(&[1, 0]).unwrap()).unwrap(),
                )
            })
            .collect()
    };
    assert_eq!(
        multiscale_loss(&swap(&preds), &swap(&gts), &cfg).unwrap(),
        got
    );
}

#[test]
fn bilinear_reproduces_linear_ramp_inside() {
    // a linear ramp is reproduced exactly away from the clamped border
    let lr = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_, _, y, x| {
        2.0 * x as f64 - y as f64
    });
    let up = resize(&lr, 4, ResizeKind::Bilinear).unwrap();
    for y in 2..22 {
        for x in 2..22 {
            let sx = (x as f64 + 0.5) / 4.0 - 0.5;
            let sy = (y as f64 + 0.5) / 4.0 - 0.5;
            assert!((up.at(0, 0, y, x) - (2.0 * sx - sy)).abs() < 1e-12);
        }
    }
}

#[test]
fn opposite_vectors_have_opposite_hues() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (u, v) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let t = Tensor::from_fn(Shape::new(1, 2, 1, 2), |_, c, _, x| {
            let sign = if x == 0 { 1.0 } else { -1.0 };
            sign * if c == 0 { u } else { v }
        });
        let img = flow_to_color(&FlowField::new(t).unwrap(), Some(4.0 * 2f64.sqrt()));
        let (h0, h1) = (
            rgb_hue(img.get(0, 0)).unwrap(),
            rgb_hue(img.get(1, 0)).unwrap(),
        );
        let diff = (h0 - h1).rem_euclid(360.0);
        // 8-bit quantization moves hues by a few degrees at low saturation
        assert!((diff - 180.0).abs() < 6.0, "{u} {v}: {h0} vs {h1}");
    }
}

#[test]
fn weights_map_is_direct_grey_mapping() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let conf = rand_tensor(Shape::new(1, 1, 7, 5), -0.3, 1.3, &mut rng);
    let img = weights_map_image(&conf);
    for y in 0..7 {
        for x in 0..5 {
            let g = (255.0 * conf.at(0, 0, y, x).clamp(0.0, 1.0)).round() as u8;
            assert_eq!(img.get(x, y), [g, g, g]);
        }
    }
}

#[test]
fn overfitting_one_sample_lowers_the_loss() {
    let cfg = TrainConfig {
        train_samples: 1,
        val_samples: 0,
        height: 16,
        width: 16,
        epochs: 200,
        lr: 1e-3,
        lr_halve_at: vec![],
        ..TrainConfig::desk_scale(21)
    };
    let out = train_loop(&cfg, |_| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    assert!(
        losses[..10].windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        &losses[..10]
    );
    assert!(losses[199] < losses[0], "{} -> {}", losses[0], losses[199]);
}
