mod common;

use common::*;
use falcon_core::tensor::{BatchNormMode, BnBatchStats, OpKind};
use falcon_core::{Error, Tensor, Var};
use proptest::prelude::*;

const FD_EPS: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn c(t: Tensor) -> Var {
    Var::constant(t)
}

#[test]
fn conv_of_ones_sums_the_window() {
    let x = Tensor::full([1, 1, 3, 3], 1.0);
    let w = Tensor::full([1, 1, 3, 3], 1.0);
    let y = c(x).conv2d(&c(w), None, 1, 1).unwrap();
    assert_eq!(y.dims(), [1, 1, 3, 3]);
    assert_eq!(y.value().at(0, 0, 1, 1), 9.0);
    assert_eq!(y.value().at(0, 0, 0, 0), 4.0);
}

#[test]
fn pointwise_identity_kernel_is_identity() {
    let x = uniform([2, 1, 5, 7], -1.0, 1.0, 1);
    let w = Tensor::full([1, 1, 1, 1], 1.0);
    let b = Tensor::zeros([1, 1, 1, 1]);
    let y = c(x.clone()).conv2d(&c(w), Some(&c(b)), 1, 0).unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = uniform([2, 4, 8, 8], -1.0, 1.0, 2);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 1, 0), (2, 2, 0)] {
        let w = uniform([6, 4, k, k], -0.5, 0.5, 3 + k as u64);
        let b = uniform([1, 6, 1, 1], -0.5, 0.5, 4);
        let got = c(x.clone()).conv2d(&c(w.clone()), Some(&c(b.clone())), stride, pad).unwrap();
        let want = naive_conv2d(&x, &w, Some(&b), stride, pad);
        assert!(got.value().max_abs_diff(&want).unwrap() < 1e-5, "k={k} s={stride} p={pad}");
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_the_axis() {
    let x = Tensor::zeros([1, 3, 4, 4]);
    let w = Tensor::zeros([2, 4, 3, 3]);
    match c(x).conv2d(&c(w), None, 1, 1) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channel"),
        other => panic!("expected dimension error, got {other:?}"),
    }
    let x = Tensor::zeros([1, 1, 2, 2]);
    let w = Tensor::zeros([1, 1, 5, 5]);
    assert!(matches!(c(x).conv2d(&c(w), None, 1, 1), Err(Error::Dimension { axis: "height", .. })));
}

#[test]
fn transpose_conv_matches_scatter_oracle() {
    let x = uniform([2, 3, 4, 5], -1.0, 1.0, 5);
    let w = uniform([3, 2, 2, 2], -1.0, 1.0, 6);
    let b = uniform([1, 2, 1, 1], -1.0, 1.0, 7);
    let y = c(x.clone()).conv_transpose2d(&c(w.clone()), Some(&c(b.clone())), 2).unwrap();
    assert_eq!(y.dims(), [2, 2, 8, 10]);
    let mut want = Tensor::from_fn([2, 2, 8, 10], |_, o, _, _| b.data()[o]);
    for n in 0..2 {
        for ci in 0..3 {
            for yy in 0..4 {
                for xx in 0..5 {
                    for o in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let idx = ((n * 2 + o) * 8 + yy * 2 + ky) * 10 + xx * 2 + kx;
                                want.data_mut()[idx] += x.at(n, ci, yy, xx) * w.at(ci, o, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(y.value().max_abs_diff(&want).unwrap() < 1e-5);
}

#[test]
fn max_pool_of_constant_is_constant() {
    let x = Tensor::full([1, 2, 6, 6], 0.37);
    for grad in [false, true] {
        let v = if grad { Var::parameter(x.clone()) } else { c(x.clone()) };
        let y = v.max_pool2d(3, 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.37));
    }
}

#[test]
fn max_pool_small_case_matches_brute_force() {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    for pad in [0, 1] {
        let want = naive_max_pool(&x, 2, 1, pad);
        for grad in [false, true] {
            let v = if grad { Var::parameter(x.clone()) } else { c(x.clone()) };
            let y = v.max_pool2d(2, 1, pad).unwrap();
            assert_eq!(y.value(), &want);
        }
    }
}

#[test]
fn max_pool_random_matches_brute_force_on_both_paths() {
    let x = uniform([2, 3, 9, 7], -1.0, 1.0, 8);
    for (k, s, p) in [(3, 1, 1), (5, 1, 2), (2, 2, 0), (15, 1, 7), (3, 2, 1)] {
        let want = naive_max_pool(&x, k, s, p);
        let fast = c(x.clone()).max_pool2d(k, s, p).unwrap();
        let tracked = Var::parameter(x.clone()).max_pool2d(k, s, p).unwrap();
        assert_eq!(fast.value(), &want);
        assert_eq!(tracked.value(), &want);
    }
}

#[test]
fn max_pool_gradient_is_one_hot_per_window() {
    // Strict maximum per window: a single peak inside a flat background.
    let mut x = Tensor::full([1, 1, 4, 4], 0.0);
    x.data_mut()[5] = 1.0;
    let v = Var::parameter(x);
    let y = v.max_pool2d(2, 2, 0).unwrap();
    y.sum().backward().unwrap();
    let g = v.grad().unwrap();
    // Window (0,0) routes to the peak; the other windows tie on zeros and
    // route to their first element in scan order.
    let mut want = vec![0.0; 16];
    want[5] = 1.0;
    want[2] = 1.0;
    want[8] = 1.0;
    want[10] = 1.0;
    assert_eq!(g, want);
}

#[test]
fn max_pool_backward_conserves_gradient_mass() {
    let x = uniform([2, 2, 8, 8], 0.0, 1.0, 9);
    let v = Var::parameter(x);
    let y = v.max_pool2d(5, 1, 2).unwrap();
    let seed = projection(y.value().numel());
    y.backward_with(&seed).unwrap();
    let routed: f64 = v.grad().unwrap().iter().map(|&g| g as f64).sum();
    let incoming: f64 = seed.iter().map(|&g| g as f64).sum();
    assert!((routed - incoming).abs() < 1e-4);
}

#[test]
fn max_pool_rejects_kernel_beyond_padded_extent() {
    let x = Tensor::zeros([1, 1, 3, 3]);
    assert!(matches!(c(x).max_pool2d(7, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn channel_min_cases() {
    let single = uniform([1, 1, 4, 4], 0.0, 1.0, 10);
    assert_eq!(c(single.clone()).channel_min().unwrap().value(), &single);

    let px = Tensor::new([1, 3, 1, 1], vec![0.2, 0.7, 0.5]).unwrap();
    assert_eq!(c(px).channel_min().unwrap().item(), 0.2);

    let x = uniform([1, 3, 8, 8], 0.0, 1.0, 11);
    let want = Tensor::from_fn([1, 1, 8, 8], |_, _, y, xx| {
        (0..3).map(|ch| x.at(0, ch, y, xx)).fold(f32::INFINITY, f32::min)
    });
    assert_eq!(c(x.clone()).channel_min().unwrap().value(), &want);
    assert_eq!(Var::parameter(x).channel_min().unwrap().value(), &want);
}

#[test]
fn channel_min_ties_route_to_first_channel() {
    let x = Tensor::new([1, 3, 1, 1], vec![0.5, 0.2, 0.2]).unwrap();
    let v = Var::parameter(x);
    v.channel_min().unwrap().sum().backward().unwrap();
    assert_eq!(v.grad().unwrap(), vec![0.0, 1.0, 0.0]);
}

#[test]
fn channel_reductions_conserve_gradient_mass() {
    let x = uniform([2, 3, 5, 5], 0.0, 1.0, 12);
    for max in [false, true] {
        let v = Var::parameter(x.clone());
        let y = if max { v.channel_max() } else { v.channel_min() }.unwrap();
        let seed = projection(y.value().numel());
        y.backward_with(&seed).unwrap();
        let routed: f64 = v.grad().unwrap().iter().map(|&g| g as f64).sum();
        let incoming: f64 = seed.iter().map(|&g| g as f64).sum();
        assert!((routed - incoming).abs() < 1e-4);
    }
}

#[test]
fn rfft2_of_constant_is_dc_only() {
    let (h, w) = (6, 8);
    let x = Tensor::full([1, 1, h, w], 0.25);
    let s = c(x).rfft2().unwrap();
    assert_eq!(s.dims(), [1, 2, h, w / 2 + 1]);
    let d = s.value().data();
    assert!((d[0] - 0.25 * (h * w) as f32).abs() < 1e-5);
    assert!(d[1..].iter().all(|v| v.abs() < 1e-5));
}

#[test]
fn fft_round_trip_is_identity() {
    let x = uniform([1, 4, 16, 16], -1.0, 1.0, 13);
    let y = c(x.clone()).rfft2().unwrap().irfft2(16, 16).unwrap();
    assert!(y.value().max_abs_diff(&x).unwrap() < 1e-5);
    for (h, w) in [(5, 7), (3, 4), (1, 1), (8, 3)] {
        let x = uniform([2, 2, h, w], -1.0, 1.0, 14);
        let y = c(x.clone()).rfft2().unwrap().irfft2(h, w).unwrap();
        assert!(y.value().max_abs_diff(&x).unwrap() < 1e-5, "{h}x{w}");
    }
}

#[test]
fn rfft2_matches_full_dft_and_parseval_holds() {
    for (h, w) in [(4, 4), (8, 8), (5, 6), (7, 3)] {
        let x = uniform([1, 1, h, w], -1.0, 1.0, 15 + h as u64);
        let (re, im) = full_dft(x.data(), h, w);
        let s = c(x.clone()).rfft2().unwrap();
        let wh = w / 2 + 1;
        for k in 0..h {
            for l in 0..wh {
                assert!((s.value().at(0, 0, k, l) as f64 - re[k * w + l]).abs() < 1e-4);
                assert!((s.value().at(0, 1, k, l) as f64 - im[k * w + l]).abs() < 1e-4);
            }
        }
        let energy: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral: f64 = re.iter().zip(&im).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
        assert!((energy - spectral).abs() / energy < 1e-4);
    }
}

#[test]
fn irfft2_rejects_inconsistent_declared_extent() {
    let s = c(Tensor::zeros([1, 2, 4, 3]));
    assert!(matches!(s.irfft2(4, 8), Err(Error::Dimension { axis: "width", .. })));
    assert!(matches!(s.irfft2(5, 4), Err(Error::Dimension { axis: "height", .. })));
    assert!(s.irfft2(4, 4).is_ok());
    assert!(s.irfft2(4, 5).is_ok());
    let odd = c(Tensor::zeros([1, 3, 4, 3]));
    assert!(matches!(odd.irfft2(4, 4), Err(Error::Dimension { axis: "channel", .. })));
}

#[test]
fn batch_norm_standardized_input_passes_through() {
    // Each channel exactly zero-mean with unit biased variance.
    let pattern = [1.0f32, -1.0, 1.0, -1.0];
    let x = Tensor::from_fn([2, 2, 2, 2], |n, ch, y, xx| {
        let s = if ch == 0 { 1.0 } else { -1.0 };
        s * pattern[(n * 2 + y + xx) % 4]
    });
    let mut stats = BnBatchStats::default();
    let y = c(x.clone())
        .batch_norm(&c(Tensor::full([1, 2, 1, 1], 1.0)), &c(Tensor::zeros([1, 2, 1, 1])), &mut stats, BatchNormMode::Train)
        .unwrap();
    assert!(y.value().max_abs_diff(&x).unwrap() < 1e-4);
}

#[test]
fn batch_norm_zero_scale_yields_shift() {
    let x = uniform([2, 3, 4, 4], -2.0, 2.0, 16);
    let beta = Tensor::new([1, 3, 1, 1], vec![0.1, -0.2, 0.3]).unwrap();
    let mut stats = BnBatchStats::default();
    let y = c(x)
        .batch_norm(&c(Tensor::zeros([1, 3, 1, 1])), &c(beta.clone()), &mut stats, BatchNormMode::Train)
        .unwrap();
    for n in 0..2 {
        for ch in 0..3 {
            assert!(y.value().plane(n, ch).iter().all(|&v| v == beta.data()[ch]));
        }
    }
}

#[test]
fn batch_norm_running_stats_and_eval() {
    let x = uniform([2, 1, 3, 3], 0.0, 4.0, 17);
    let gamma = c(Tensor::full([1, 1, 1, 1], 1.0));
    let beta = c(Tensor::zeros([1, 1, 1, 1]));
    let mut stats = BnBatchStats::default();
    assert!(matches!(
        c(x.clone()).batch_norm(&gamma, &beta, &mut stats, BatchNormMode::Eval),
        Err(Error::State(_))
    ));
    c(x.clone()).batch_norm(&gamma, &beta, &mut stats, BatchNormMode::Train).unwrap();
    let vals: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mean = vals.iter().sum::<f64>() / 18.0;
    let var_unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
    let m = stats.mean.as_ref().unwrap()[0] as f64;
    let v = stats.var.as_ref().unwrap()[0] as f64;
    assert!((m - 0.1 * mean).abs() < 1e-5);
    assert!((v - (0.9 + 0.1 * var_unbiased)).abs() < 1e-5);

    let before = stats.clone();
    let y = c(x.clone()).batch_norm(&gamma, &beta, &mut stats, BatchNormMode::Eval).unwrap();
    assert_eq!(stats, before);
    let want = (x.data()[0] as f64 - m) / (v + 1e-5).sqrt();
    assert!((y.value().data()[0] as f64 - want).abs() < 1e-5);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let x = uniform([2, 3, 4, 4], -1.0, 1.0, 18);
    let gamma = uniform([1, 3, 1, 1], 0.5, 1.5, 19);
    let beta = uniform([1, 3, 1, 1], -0.5, 0.5, 20);
    let errs = grad_check(&[x, gamma, beta], FD_EPS, |v| {
        let mut stats = BnBatchStats::default();
        v[0].batch_norm(&v[1], &v[2], &mut stats, BatchNormMode::Train).unwrap()
    });
    assert!(errs.iter().all(|&e| e < FD_TOL), "{errs:?}");
}

#[test]
fn concat_then_split_round_trips() {
    let a = uniform([2, 3, 4, 4], 0.0, 1.0, 21);
    let b = uniform([2, 1, 4, 4], 0.0, 1.0, 22);
    let cat = Var::concat_channels(&[c(a.clone()), c(b.clone())]).unwrap();
    assert_eq!(cat.dims(), [2, 4, 4, 4]);
    let parts = cat.split_channels(&[3, 1]).unwrap();
    assert_eq!(parts[0].value(), &a);
    assert_eq!(parts[1].value(), &b);
    assert!(cat.split_channels(&[2, 1]).is_err());
    assert!(Var::concat_channels(&[c(a), c(Tensor::zeros([2, 1, 4, 5]))]).is_err());
}

#[test]
fn relu_clips_negatives_only() {
    let x = Tensor::new([1, 1, 1, 4], vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
    assert_eq!(c(x).relu().value().data(), &[0.0, 0.0, 0.0, 3.0]);
}

#[test]
fn weighted_sum_rounds_once() {
    let x = Tensor::new([1, 1, 1, 2], vec![1.0, 1e8]).unwrap();
    let y = Tensor::new([1, 1, 1, 2], vec![1e-8, -1e8]).unwrap();
    let s = Var::weighted_sum(&[(&c(x.clone()), 1.0), (&c(y.clone()), 1.0), (&c(x), 0.5)]).unwrap();
    assert_eq!(s.value().data(), &[1.5, 5e7]);
    let bad = Tensor::zeros([1, 1, 2, 1]);
    assert!(Var::weighted_sum(&[(&c(y), 1.0), (&c(bad), 1.0)]).is_err());
    assert!(Var::weighted_sum(&[]).is_err());
}

#[test]
fn upsample_repeats_pixels() {
    let x = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(c(x).upsample_nearest2x().value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn elementwise_and_reshaping_ops_pass_gradient_checks() {
    let a = well_separated([2, 3, 4, 4], -0.95, 0.02, 23);
    let b = uniform([2, 3, 4, 4], -1.0, 1.0, 24);
    let cases: Vec<(&str, Box<dyn Fn(&[Var]) -> Var>)> = vec![
        ("add", Box::new(|v: &[Var]| v[0].add(&v[1]).unwrap())),
        ("sub", Box::new(|v: &[Var]| v[0].sub(&v[1]).unwrap())),
        ("neg_scale", Box::new(|v: &[Var]| v[0].neg().scale(1.7).add(&v[1]).unwrap())),
        ("weighted_sum", Box::new(|v: &[Var]| Var::weighted_sum(&[(&v[0], 0.3), (&v[1], -2.0), (&v[0], 1.5)]).unwrap())),
        ("relu", Box::new(|v: &[Var]| v[0].relu().add(&v[1]).unwrap())),
        ("concat", Box::new(|v: &[Var]| Var::concat_channels(&[v[1].clone(), v[0].clone()]).unwrap())),
        ("narrow", Box::new(|v: &[Var]| v[0].add(&v[1]).unwrap().narrow_channels(1, 2).unwrap())),
        ("upsample", Box::new(|v: &[Var]| v[0].add(&v[1]).unwrap().upsample_nearest2x())),
        ("mse", Box::new(|v: &[Var]| v[0].mse(&v[1]).unwrap())),
        ("sum_squares", Box::new(|v: &[Var]| v[0].sub(&v[1]).unwrap().sum_squares())),
        ("mean", Box::new(|v: &[Var]| v[0].add(&v[1]).unwrap().mean())),
        ("gram", Box::new(|v: &[Var]| v[0].add(&v[1]).unwrap().gram().unwrap())),
        ("channel_max", Box::new(|v: &[Var]| v[0].channel_max().unwrap().add(&v[1].channel_min().unwrap()).unwrap())),
        ("max_pool", Box::new(|v: &[Var]| v[0].max_pool2d(3, 1, 1).unwrap())),
        ("max_pool_strided", Box::new(|v: &[Var]| v[0].max_pool2d(2, 2, 0).unwrap())),
    ];
    for (name, f) in cases {
        let errs = grad_check(&[a.clone(), b.clone()], FD_EPS, f);
        assert!(errs.iter().all(|&e| e < FD_TOL), "{name}: {errs:?}");
    }
}

#[test]
fn convolution_gradients_match_finite_differences() {
    let x = uniform([2, 3, 6, 6], -1.0, 1.0, 25);
    let w = uniform([4, 3, 3, 3], -0.5, 0.5, 26);
    let b = uniform([1, 4, 1, 1], -0.5, 0.5, 27);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let errs = grad_check(&[x.clone(), w.clone(), b.clone()], FD_EPS, |v| {
            v[0].conv2d(&v[1], Some(&v[2]), stride, pad).unwrap()
        });
        assert!(errs.iter().all(|&e| e < FD_TOL), "s={stride} p={pad}: {errs:?}");
    }
    let w1 = uniform([4, 3, 1, 1], -0.5, 0.5, 28);
    let errs = grad_check(&[x.clone(), w1, b.clone()], FD_EPS, |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 0).unwrap());
    assert!(errs.iter().all(|&e| e < FD_TOL), "pointwise: {errs:?}");

    let wt = uniform([3, 4, 2, 2], -0.5, 0.5, 29);
    let errs = grad_check(&[x, wt, b], FD_EPS, |v| v[0].conv_transpose2d(&v[1], Some(&v[2]), 2).unwrap());
    assert!(errs.iter().all(|&e| e < FD_TOL), "transpose: {errs:?}");
}

#[test]
fn spectral_ops_pass_gradient_checks() {
    for (h, w) in [(4, 4), (5, 6), (6, 5)] {
        let x = uniform([2, 2, h, w], -1.0, 1.0, 30);
        let errs = grad_check(&[x.clone()], FD_EPS, |v| v[0].rfft2().unwrap());
        assert!(errs[0] < FD_TOL, "rfft2 {h}x{w}: {errs:?}");
        let spec = uniform([2, 4, h, w / 2 + 1], -1.0, 1.0, 31);
        let errs = grad_check(&[spec], FD_EPS, |v| v[0].irfft2(h, w).unwrap());
        assert!(errs[0] < FD_TOL, "irfft2 {h}x{w}: {errs:?}");
    }
}

#[test]
fn two_layer_network_gradients_match_finite_differences() {
    let x = uniform([2, 2, 6, 6], -1.0, 1.0, 32);
    let w1 = uniform([4, 2, 3, 3], -0.5, 0.5, 33);
    // Keep every hidden pre-activation clear of the ReLU kink by more than
    // any single-coordinate finite-difference step can move it.
    let b1 = (34..)
        .map(|seed| uniform([1, 4, 1, 1], -0.1, 0.1, seed))
        .find(|b| {
            let pre = Var::constant(x.clone())
                .conv2d(&Var::constant(w1.clone()), Some(&Var::constant(b.clone())), 1, 1)
                .unwrap();
            pre.value().data().iter().all(|v| v.abs() > 5e-3)
        })
        .unwrap();
    let w2 = uniform([1, 4, 3, 3], -0.5, 0.5, 35);
    let b2 = uniform([1, 1, 1, 1], -0.1, 0.1, 36);
    let target = uniform([2, 1, 3, 3], -1.0, 1.0, 37);
    let errs = grad_check_with(&[x, w1, b1, w2, b2, target], FD_EPS, &[5], |v| {
        let h = v[0].conv2d(&v[1], Some(&v[2]), 1, 1).unwrap().relu();
        let y = h.conv2d(&v[3], Some(&v[4]), 2, 1).unwrap();
        y.mse(&v[5]).unwrap()
    });
    assert!(errs.iter().all(|&e| e < FD_TOL), "{errs:?}");
}

#[test]
fn backward_replay_is_bit_identical() {
    let x = Var::parameter(uniform([2, 3, 8, 8], -1.0, 1.0, 38));
    let w = Var::parameter(uniform([4, 3, 3, 3], -0.5, 0.5, 39));
    let y = x.conv2d(&w, None, 1, 1).unwrap().relu().rfft2().unwrap().irfft2(8, 8).unwrap();
    let loss = y.max_pool2d(3, 1, 1).unwrap().sum_squares();
    loss.backward().unwrap();
    let (gx, gw) = (x.grad().unwrap(), w.grad().unwrap());
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), gx);
    assert_eq!(w.grad().unwrap(), gw);
    assert!(x.to_tensor().grad().is_some());
}

#[test]
fn every_reachable_parameter_receives_a_gradient() {
    let a = Var::parameter(uniform([1, 2, 4, 4], 0.0, 1.0, 40));
    let unused = Var::parameter(Tensor::zeros([1, 1, 1, 1]));
    let b = Var::parameter(uniform([1, 2, 4, 4], 0.0, 1.0, 41));
    let loss = a.add(&b).unwrap().channel_max().unwrap().mean();
    let grads = loss.backward().unwrap();
    assert!(grads.get(&a).is_some() && grads.get(&b).is_some());
    assert!(grads.get(&unused).is_none());
    let kinds = loss.tape_kinds();
    assert_eq!(kinds.iter().filter(|k| **k == OpKind::Leaf).count(), 2);
}

#[test]
fn constants_stay_off_the_tape() {
    let x = c(uniform([1, 3, 4, 4], 0.0, 1.0, 42));
    let p = Var::parameter(Tensor::full([1, 1, 4, 4], 0.5));
    let y = x.channel_min().unwrap().max_pool2d(3, 1, 1).unwrap().add(&p).unwrap();
    let kinds = y.tape_kinds();
    assert_eq!(kinds, vec![OpKind::Leaf, OpKind::Add]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_agrees_with_oracle_for_random_shapes(
        n in 1usize..3, ci in 1usize..5, co in 1usize..5, h in 3usize..10, w in 3usize..10,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let x = uniform([n, ci, h, w], -1.0, 1.0, seed);
        let wt = uniform([co, ci, k, k], -1.0, 1.0, seed + 1);
        let got = c(x.clone()).conv2d(&c(wt.clone()), None, stride, pad).unwrap();
        let want = naive_conv2d(&x, &wt, None, stride, pad);
        prop_assert!(got.value().max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn fft_is_linear_and_invertible(h in 1usize..12, w in 1usize..12, a in -2.0f32..2.0, b in -2.0f32..2.0, seed in 0u64..1000) {
        let x = uniform([1, 2, h, w], -1.0, 1.0, seed);
        let y = uniform([1, 2, h, w], -1.0, 1.0, seed + 7);
        let combo = c(x.clone()).scale(a).add(&c(y.clone()).scale(b)).unwrap();
        let lhs = combo.rfft2().unwrap();
        let rhs = c(x.clone()).rfft2().unwrap().scale(a).add(&c(y).rfft2().unwrap().scale(b)).unwrap();
        let peak = lhs.value().data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        prop_assert!(lhs.value().max_abs_diff(rhs.value()).unwrap() / peak < 1e-5);
        let back = c(x.clone()).rfft2().unwrap().irfft2(h, w).unwrap();
        prop_assert!(back.value().max_abs_diff(&x).unwrap() < 1e-5);
    }
}
