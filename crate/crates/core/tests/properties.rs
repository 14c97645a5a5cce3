use ncup::flowio::{decode_flo, encode_flo, FlowField};
use ncup::nconv::{conf_pool, nconv_forward, NConvKernel, PoolKind};
use ncup::sparsify::{forward_map, read_back};
use ncup::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Shape, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, shape.numel()).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

/// (data, conf, raw kernel) on a small random problem.
fn problem() -> impl Strategy<Value = (Tensor, Tensor, NConvKernel)> {
    (
        1usize..=2,
        1usize..=6,
        1usize..=6,
        prop::sample::select(vec![1usize, 3, 5]),
    )
        .prop_flat_map(|(c, h, w, k)| {
            let s = Shape::new(1, c, h, w);
            (
                tensor(s, -10.0, 10.0),
                tensor(s, 1e-3, 1.0),
                tensor(Shape::new(2, c, k, k), -2.0, 2.0)
                    .prop_map(|t| NConvKernel::from_raw(t).unwrap()),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn data_path_ignores_confidence_scale((d, c, k) in problem(), factor in 0.1f64..10.0) {
        let (a, _) = nconv_forward(&d, &c, &k).unwrap();
        let (b, _) = nconv_forward(&d, &c.scale(factor), &k).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn zero_confidence_data_is_invisible((d, c, k) in problem(), noise in -50.0f64..50.0) {
        let masked = c.map(|v| if v < 0.4 { 0.0 } else { v });
        let mut other = d.clone();
        for (x, m) in other.data_mut().iter_mut().zip(masked.data()) {
            if *m == 0.0 {
                *x += noise;
            }
        }
        let a = nconv_forward(&d, &masked, &k).unwrap();
        let b = nconv_forward(&other, &masked, &k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn output_stays_in_input_range((d, c, k) in problem()) {
        let (out, conf) = nconv_forward(&d, &c, &k).unwrap();
        let (lo, hi) = (d.min(), d.max());
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        prop_assert!(conf.data().iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-12));
    }

    #[test]
    fn confidence_pool_keeps_window_maximum(d in tensor(Shape::new(1, 1, 4, 6), -5.0, 5.0),
                                            c in tensor(Shape::new(1, 1, 4, 6), 0.0, 1.0)) {
        let (pd, pc) = conf_pool(&d, &c, 2, PoolKind::Confidence).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| (2 * y + dy, 2 * x + dx));
                let best = cells.iter().map(|&(yy, xx)| c.at(0, 0, yy, xx)).fold(f64::MIN, f64::max);
                prop_assert_eq!(pc.at(0, 0, y, x), best);
                let carried = cells.iter().any(|&(yy, xx)| {
                    c.at(0, 0, yy, xx) == best && d.at(0, 0, yy, xx) == pd.at(0, 0, y, x)
                });
                prop_assert!(carried);
            }
        }
    }

    #[test]
    fn sparsify_round_trips(d in tensor(Shape::new(1, 2, 3, 5), -8.0, 8.0), s in 1usize..=8) {
        let w = d.map(|v| v.abs() + 0.01);
        let g = forward_map(&d, &w, s as f64).unwrap();
        prop_assert_eq!(read_back(&g.data, s).unwrap(), d);
        prop_assert_eq!(read_back(&g.conf, s).unwrap(), w);
    }

    #[test]
    fn flo_round_trip_is_bit_exact(v in prop::collection::vec(-1e3f32..1e3, 2 * 3 * 4)) {
        let t = Tensor::new(Shape::new(1, 2, 3, 4), v.iter().map(|&x| x as f64).collect()).unwrap();
        let flow = FlowField::new(t).unwrap();
        let mut buf = Vec::new();
        encode_flo(&mut buf, &flow).unwrap();
        let back = decode_flo(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &flow);
        let mut again = Vec::new();
        encode_flo(&mut again, &FlowField::new(back.into_tensor()).unwrap()).unwrap();
        prop_assert_eq!(again, buf);
    }
}
