mod common;

use common::{naive_conv, rel_err, softplus, tent_sdc, uniform};
use mhe_core::real::softplus_inv;
use mhe_core::sdc::{
    predict_params, sdc_backward, sdc_forward, sdc_forward_saved, sdc_oracle, ParamHead, SamplingGrid, SdcParams,
};
use mhe_core::tensor::{conv2d, conv2d_backward};
use mhe_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn dilated(w: &Tensor<f64>, n: usize, h: usize, wd: usize, d: f64) -> SdcParams<f64> {
    let k = w.dims()[2];
    SdcParams {
        weight: w.clone(),
        offsets: Tensor::zeros(&[n, 2 * k * k, h, wd]),
        dil_raw: Tensor::full(&[n, 2, h, wd], softplus_inv(d)),
    }
}

fn random_params(r: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize, co: usize, h: usize, w: usize, k: usize) -> SdcParams<f64> {
    SdcParams {
        weight: uniform(r, &[co, c, k, k], -1.0, 1.0),
        offsets: uniform(r, &[n, 2 * k * k, h, w], -2.0, 2.0),
        dil_raw: uniform(r, &[n, 2, h, w], -1.5, 2.0),
    }
}

#[test]
fn fractional_centre_tap_is_bilinear_mean() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = SdcParams {
        weight: Tensor::full(&[1, 1, 1, 1], 1.0),
        offsets: Tensor::full(&[1, 2, 2, 2], 0.5),
        dil_raw: Tensor::zeros(&[1, 2, 2, 2]),
    };
    let y = sdc_forward(&x, &p).unwrap();
    assert_eq!(y.data()[0], 2.5);
    assert_eq!(sdc_oracle(&x, &p).unwrap().data()[0], 2.5);
}

#[test]
fn zero_input_or_weight_gives_zero_output() {
    let mut r = common::rng(3);
    let p = random_params(&mut r, 1, 2, 2, 5, 5, 3);
    let x = Tensor::zeros(&[1, 2, 5, 5]);
    assert!(sdc_oracle(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(sdc_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    let x = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let p = SdcParams { weight: Tensor::zeros(&[2, 2, 3, 3]), ..p };
    assert!(sdc_oracle(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(sdc_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn oracle_matches_independent_tent_evaluation() {
    for seed in 0..10 {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[2, 2, 6, 5], -1.0, 1.0);
        let p = random_params(&mut r, 2, 2, 3, 6, 5, 3);
        let want = tent_sdc(&x, &p.weight, &p.offsets, &p.dil_raw);
        assert!(rel_err(&sdc_oracle(&x, &p).unwrap(), &want, 1e-12) <= 1e-12);
    }
}

#[test]
fn grid_follows_the_coordinate_equation() {
    let mut r = common::rng(8);
    let p = random_params(&mut r, 2, 1, 1, 4, 5, 3);
    let grid = SamplingGrid::new(&p).unwrap();
    let eta = p.eta();
    let (h, w) = (4, 5);
    for b in 0..2 {
        for tap in 0..9 {
            let (ti, tj) = ((tap % 3) as f64 - 1.0, (tap / 3) as f64 - 1.0);
            for y in 0..h {
                for x in 0..w {
                    let q = y * w + x;
                    let off = |ch: usize| p.offsets.data()[((b * 18 + ch) * h * w) + q];
                    let e = |ch: usize| eta.data()[((b * 2 + ch) * h * w) + q];
                    let (pi, pj) = grid.get(b, tap, y, x);
                    assert_eq!(pi, x as f64 + e(0) * ti + off(2 * tap));
                    assert_eq!(pj, y as f64 + e(1) * tj + off(2 * tap + 1));
                }
            }
        }
    }
    let std = SdcParams::standard(p.weight.clone(), 1, 3, 3).unwrap();
    let grid = SamplingGrid::new(&std).unwrap();
    for tap in 0..9 {
        let (pi, pj) = grid.get(0, tap, 1, 1);
        assert!((pi - (tap % 3) as f64).abs() < 1e-12 && (pj - (tap / 3) as f64).abs() < 1e-12);
    }
}

/// Coordinates land exactly on pixel centres, so every bilinear weight is 0
/// or 1 and the scatter must coincide with the convolution adjoint.
#[test]
fn integral_coordinates_reduce_input_gradient_to_conv() {
    for seed in 0..10 {
        let mut r = common::rng(40 + seed);
        let (n, c, co, h, w) = (2, 3, 2, 6, 7);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[co, c, 3, 3], -1.0, 1.0);
        let gy = uniform(&mut r, &[n, co, h, w], -1.0, 1.0);
        let mut p = SdcParams::standard(wt.clone(), n, h, w).unwrap();
        // softplus(softplus_inv(1)) may miss 1 by an ulp; use a rate of
        // exactly 1 by shifting the offsets instead.
        p.dil_raw = Tensor::full(&[n, 2, h, w], -800.0);
        for b in 0..n {
            for tap in 0..9 {
                let (ti, tj) = ((tap % 3) as f64 - 1.0, (tap / 3) as f64 - 1.0);
                for q in 0..h * w {
                    p.offsets.data_mut()[(b * 18 + 2 * tap) * h * w + q] = ti;
                    p.offsets.data_mut()[(b * 18 + 2 * tap + 1) * h * w + q] = tj;
                }
            }
        }
        let (_, saved) = sdc_forward_saved(&x, &p).unwrap();
        let grads = sdc_backward(&x, &p, &saved, &gy).unwrap();
        let (gx, _) = conv2d_backward(&x, &wt, 1, 1, &gy, true, false).unwrap();
        let gx = gx.unwrap();
        let worst = grads
            .input
            .data()
            .iter()
            .zip(gx.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst <= 1e-14, "integral-coordinate input gradient differs by {worst:e}");
    }
}

#[test]
fn constant_input_has_no_coordinate_gradient_in_the_interior() {
    let mut r = common::rng(17);
    let (h, w) = (9, 9);
    let x = Tensor::full(&[1, 2, h, w], 0.7);
    let mut p = random_params(&mut r, 1, 2, 2, h, w, 3);
    p.offsets = uniform(&mut r, &[1, 18, h, w], -0.4, 0.4);
    p.dil_raw = uniform(&mut r, &[1, 2, h, w], -0.5, 0.5);
    let gy = uniform(&mut r, &[1, 2, h, w], -1.0, 1.0);
    let (_, saved) = sdc_forward_saved(&x, &p).unwrap();
    let g = sdc_backward(&x, &p, &saved, &gy).unwrap();
    // Pixels at least 3 from the border keep every tap and its bilinear
    // footprint inside the raster.
    for y in 3..h - 3 {
        for xx in 3..w - 3 {
            let q = y * w + xx;
            for ch in 0..18 {
                assert_eq!(g.offsets.data()[ch * h * w + q], 0.0);
            }
            for ch in 0..2 {
                assert_eq!(g.dil_raw.data()[ch * h * w + q], 0.0);
            }
        }
    }
}

#[test]
fn out_of_range_taps_contribute_nothing() {
    let mut r = common::rng(21);
    let x = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let mut p = random_params(&mut r, 1, 2, 2, 5, 5, 3);
    p.offsets = Tensor::full(&[1, 18, 5, 5], 40.0);
    let (y, saved) = sdc_forward_saved(&x, &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let gy = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let g = sdc_backward(&x, &p, &saved, &gy).unwrap();
    for t in [&g.input, &g.weight, &g.offsets, &g.dil_raw] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn locality_outside_bilinear_footprints() {
    let mut r = common::rng(33);
    let (h, w) = (9, 9);
    let x = uniform(&mut r, &[1, 1, h, w], -1.0, 1.0);
    let p = SdcParams {
        weight: uniform(&mut r, &[1, 1, 3, 3], -1.0, 1.0),
        offsets: uniform(&mut r, &[1, 18, h, w], -0.3, 0.3),
        dil_raw: Tensor::full(&[1, 2, h, w], softplus_inv(1.0)),
    };
    let y0 = sdc_forward(&x, &p).unwrap();
    let grid = SamplingGrid::new(&p).unwrap();
    let (py, px) = (4, 4);
    let mut footprint = vec![false; h * w];
    for tap in 0..9 {
        let (pi, pj) = grid.get(0, tap, py, px);
        for u in pj.floor() as i64..=pj.floor() as i64 + 1 {
            for v in pi.floor() as i64..=pi.floor() as i64 + 1 {
                if (0..h as i64).contains(&u) && (0..w as i64).contains(&v) {
                    footprint[u as usize * w + v as usize] = true;
                }
            }
        }
    }
    let mut x2 = x.clone();
    for (i, inside) in footprint.iter().enumerate() {
        if !inside {
            x2.data_mut()[i] += r.random_range(-5.0..5.0);
        }
    }
    let y2 = sdc_forward(&x2, &p).unwrap();
    assert_eq!(y0.data()[py * w + px].to_bits(), y2.data()[py * w + px].to_bits());
}

#[test]
fn fresh_branches_start_as_standard_convolution() {
    let mut r = common::rng(2);
    let feats = uniform(&mut r, &[2, 4, 6, 6], -3.0, 3.0);
    let head = ParamHead::<f64>::identity(4, 3);
    let p = predict_params(&feats, &uniform(&mut r, &[4, 4, 3, 3], -1.0, 1.0), &head).unwrap();
    assert!(p.eta().data().iter().all(|&e| (e - 1.0).abs() <= 1e-6));
    assert!(p.offsets.data().iter().all(|&o| o == 0.0));

    let mut head = ParamHead::<f64>::identity(4, 3);
    head.dil_weight = Tensor::zeros(&[2, 4, 1, 1]);
    head.dil_bias = Tensor::new(&[2], vec![-0.7, 2.2]).unwrap();
    let p = predict_params(&feats, &p.weight, &head).unwrap();
    let eta = p.eta();
    let plane = 36;
    for b in 0..2 {
        for (ch, bias) in [(0, -0.7f64), (1, 2.2)] {
            for q in 0..plane {
                assert!((eta.data()[(b * 2 + ch) * plane + q] - softplus(bias)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn one_sgd_step_moves_dilation_downhill() {
    let mut r = common::rng(12);
    let x = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    let mut p = random_params(&mut r, 1, 2, 2, 6, 6, 3);
    let gy = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    // loss = <gy, y>
    let loss = |p: &SdcParams<f64>| -> f64 {
        let y = sdc_forward(&x, p).unwrap();
        y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
    };
    let (_, saved) = sdc_forward_saved(&x, &p).unwrap();
    let g = sdc_backward(&x, &p, &saved, &gy).unwrap();
    assert!(g.dil_raw.max_abs() > 0.0);
    let before = p.dil_raw.clone();
    let lr = 1e-3;
    for (v, d) in p.dil_raw.data_mut().iter_mut().zip(g.dil_raw.data()) {
        *v -= lr * d;
    }
    for i in 0..before.len() {
        let moved = p.dil_raw.data()[i] - before.data()[i];
        let grad = g.dil_raw.data()[i];
        assert!(grad == 0.0 || moved.signum() == -grad.signum());
    }
    let mut q = p.clone();
    q.dil_raw = before;
    assert!(loss(&p) < loss(&q));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduces_to_conv_at_unit_rate(
        seed in any::<u64>(), n in 1usize..3, c in 1usize..4, co in 1usize..4,
        h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[co, c, k, k], -1.0, 1.0);
        let p = SdcParams::standard(wt.clone(), n, h, w).unwrap();
        let got = sdc_forward(&x, &p).unwrap();
        prop_assert!(rel_err(&got, &conv2d(&x, &wt, 1, k / 2).unwrap(), 1e-12) <= 1e-6);
    }

    #[test]
    fn integer_rate_matches_dilated_conv(
        seed in any::<u64>(), c in 1usize..4, co in 1usize..4,
        h in 3usize..10, w in 3usize..10, d in 1usize..4,
    ) {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[co, c, 3, 3], -1.0, 1.0);
        let got = sdc_forward(&x, &dilated(&wt, 1, h, w, d as f64)).unwrap();
        prop_assert!(rel_err(&got, &naive_conv(&x, &wt, 1, d, d), 1e-12) <= 1e-6);
    }

    #[test]
    fn forward_matches_oracle(
        seed in any::<u64>(), n in 1usize..3, c in 1usize..3, co in 1usize..3,
        h in 1usize..8, w in 1usize..8,
    ) {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let p = random_params(&mut r, n, c, co, h, w, 3);
        let got = sdc_forward(&x, &p).unwrap();
        prop_assert!(rel_err(&got, &sdc_oracle(&x, &p).unwrap(), 1e-12) <= 1e-6);
    }

    #[test]
    fn dilation_is_always_positive(raw in -700.0f64..700.0) {
        let p = SdcParams {
            weight: Tensor::<f64>::zeros(&[1, 1, 1, 1]),
            offsets: Tensor::zeros(&[1, 2, 1, 1]),
            dil_raw: Tensor::full(&[1, 2, 1, 1], raw),
        };
        prop_assert!(p.eta().data().iter().all(|&e| e > 0.0 && e.is_finite()));
    }

    #[test]
    fn f32_forward_tracks_f64(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
        let p = random_params(&mut r, 1, 2, 2, 6, 6, 3);
        let p32 = SdcParams { weight: p.weight.cast(), offsets: p.offsets.cast(), dil_raw: p.dil_raw.cast() };
        let y32: Tensor<f64> = sdc_forward(&x.cast::<f32>(), &p32).unwrap().cast();
        prop_assert!(rel_err(&y32, &sdc_forward(&x, &p).unwrap(), 1e-6) <= 1e-4);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let good = SdcParams::standard(Tensor::zeros(&[1, 2, 3, 3]), 1, 4, 4).unwrap();
    let wrong_c = SdcParams::standard(Tensor::zeros(&[1, 3, 3, 3]), 1, 4, 4).unwrap();
    let even_k = SdcParams::standard(Tensor::zeros(&[1, 2, 2, 2]), 1, 4, 4).unwrap();
    let wrong_hw = SdcParams::standard(Tensor::zeros(&[1, 2, 3, 3]), 1, 5, 4).unwrap();
    assert!(sdc_forward(&x, &good).is_ok());
    assert!(sdc_forward(&x, &wrong_c).is_err());
    assert!(sdc_forward(&x, &even_k).is_err());
    assert!(sdc_forward(&x, &wrong_hw).is_err());
    let mut nan = good.clone();
    nan.offsets.data_mut()[0] = f64::NAN;
    assert!(sdc_forward(&x, &nan).is_err());
}
