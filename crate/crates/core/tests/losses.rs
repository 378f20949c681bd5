mod common;

use common::*;
use falcon_core::density::PatchSpec;
use falcon_core::losses::*;
use falcon_core::{Error, Tensor, Var};

fn c(t: &Tensor) -> Var {
    Var::constant(t.clone())
}

fn small_extractor() -> FeatureExtractor {
    FeatureExtractor::with_divisor(16, EXTRACTOR_SEED).unwrap()
}

fn naive_gram(x: &Tensor) -> Vec<f64> {
    let [n, ch, h, w] = x.dims();
    let mut out = vec![0.0; n * ch * ch];
    for s in 0..n {
        for a in 0..ch {
            for b in 0..ch {
                let mut acc = 0.0f64;
                for y in 0..h {
                    for xx in 0..w {
                        acc += x.at(s, a, y, xx) as f64 * x.at(s, b, y, xx) as f64;
                    }
                }
                out[(s * ch + a) * ch + b] = acc / (ch * h * w) as f64;
            }
        }
    }
    out
}

#[test]
fn all_losses_vanish_at_the_target() {
    let j = uniform([2, 3, 16, 16], 0.0, 1.0, 1);
    let ex = small_extractor();
    assert_eq!(loss_img(&c(&j), &c(&j)).unwrap().item(), 0.0);
    assert_eq!(loss_perceptual(&c(&j), &c(&j), &ex).unwrap().item(), 0.0);
    assert_eq!(loss_map(&c(&j), &c(&j), PatchSpec::default()).unwrap().item(), 0.0);
    let f = loss_final(&c(&j), &c(&j), &LossWeights::default(), &ex, PatchSpec::default()).unwrap();
    assert_eq!(f.breakdown.total, 0.0);
}

#[test]
fn constant_offset_gives_squared_offset() {
    let j = uniform([1, 3, 5, 5], 0.0, 0.5, 2);
    let jh = Tensor::new(j.dims(), j.data().iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((loss_img(&c(&jh), &c(&j)).unwrap().item() - 0.01).abs() < 1e-6);
}

#[test]
fn loss_img_matches_scalar_loop() {
    let a = uniform([2, 3, 7, 9], 0.0, 1.0, 3);
    let b = uniform([2, 3, 7, 9], 0.0, 1.0, 4);
    let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>()
        / a.numel() as f64;
    let got = loss_img(&c(&a), &c(&b)).unwrap().item() as f64;
    assert!((got - oracle).abs() / oracle < 1e-6);
    assert!(matches!(loss_img(&c(&a), &c(&Tensor::zeros([2, 3, 7, 8]))), Err(Error::Dimension { .. })));
}

#[test]
fn gram_matches_triple_loop_and_is_symmetric() {
    let x = uniform([1, 3, 4, 4], -1.0, 1.0, 5);
    let g = gram(&c(&x)).unwrap().to_tensor();
    assert_eq!(g.dims(), [1, 1, 3, 3]);
    for (got, want) in g.data().iter().zip(naive_gram(&x)) {
        assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1e-12));
    }
    let big = gram(&c(&uniform([2, 7, 5, 3], -1.0, 1.0, 6))).unwrap().to_tensor();
    for s in 0..2 {
        for a in 0..7 {
            for b in 0..7 {
                assert_eq!(big.at(s, 0, a, b), big.at(s, 0, b, a));
            }
        }
    }
}

#[test]
fn orthogonal_channels_give_diagonal_gram() {
    let x = Tensor::from_fn([1, 2, 2, 2], |_, ch, y, xx| if (y * 2 + xx) % 2 == ch { 1.0 } else { 0.0 });
    let g = gram(&c(&x)).unwrap().to_tensor();
    assert_eq!(g.data(), &[0.25, 0.0, 0.0, 0.25]);
}

#[test]
fn map_loss_of_uniform_images() {
    let j = Tensor::full([1, 3, 8, 8], 0.2);
    let jh = Tensor::full([1, 3, 8, 8], 0.5);
    let v = loss_map(&c(&jh), &c(&j), PatchSpec::default()).unwrap().item();
    assert!((v - 0.09).abs() < 1e-7);
}

#[test]
fn extractor_weights_stay_frozen() {
    let ex = small_extractor();
    let jh = Var::parameter(uniform([1, 3, 8, 8], 0.0, 1.0, 7));
    let j = c(&uniform([1, 3, 8, 8], 0.0, 1.0, 8));
    let loss = loss_perceptual(&jh, &j, &ex).unwrap();
    let grads = loss.backward().unwrap();
    assert!(jh.grad().is_some());
    // Only the image leaf and nodes derived from it are on the tape.
    assert!(loss.tape().iter().all(|v| v.requires_grad()));
    assert!(ex.weights().params().values().all(|t| t.grad().is_none() && !t.requires_grad()));
    assert!(grads.len() >= 1);
}

#[test]
fn perceptual_loss_sees_channel_permutation() {
    // Channels with clearly different statistics: a ramp, a checkerboard and a constant.
    let j = Tensor::from_fn([1, 3, 16, 16], |_, ch, y, x| match ch {
        0 => x as f32 / 15.0,
        1 => ((x + y) % 2) as f32,
        _ => 0.3,
    });
    let perm = Tensor::from_fn([1, 3, 16, 16], |_, ch, y, x| j.at(0, [1, 2, 0][ch], y, x));
    let ex = small_extractor();
    assert!(loss_perceptual(&c(&perm), &c(&j), &ex).unwrap().item() > 0.0);
}

#[test]
fn taps_outside_the_stack_are_rejected() {
    let ex = small_extractor();
    let j = c(&uniform([1, 3, 8, 8], 0.0, 1.0, 9));
    assert!(matches!(loss_perceptual_taps(&j, &j, &ex, 16, &[3]), Err(Error::Config(_))));
    assert!(matches!(ex.features(&j, &[20]), Err(Error::Config(_))));
}

#[test]
fn extractor_layout_matches_vgg16() {
    let ex = FeatureExtractor::seeded().unwrap();
    let convs: Vec<(usize, usize)> = ex
        .layers()
        .iter()
        .filter_map(|l| match l {
            FeatureLayer::Conv { cin, cout } => Some((*cin, *cout)),
            _ => None,
        })
        .collect();
    assert_eq!(convs, [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256)]);
    assert_eq!(ex.layers()[4], FeatureLayer::MaxPool);
    assert_eq!(ex.layers()[15], FeatureLayer::Relu);
    let x = c(&uniform([1, 3, 16, 16], 0.0, 1.0, 1));
    let f = ex.features(&x, &STYLE_TAPS).unwrap();
    let dims: Vec<_> = f.iter().map(|v| v.dims()).collect();
    assert_eq!(dims, [[1, 64, 16, 16], [1, 128, 8, 8], [1, 256, 4, 4]]);
}

#[test]
fn pretrained_weights_load_through_the_weight_format() {
    let ex = small_extractor();
    let bytes = ex.weights().to_bytes();
    let loaded = falcon_core::network::ModelWeights::from_bytes(&bytes).unwrap();
    let back = FeatureExtractor::from_weights(loaded, true).unwrap();
    assert_eq!(back.layers(), ex.layers());
    let x = c(&uniform([1, 3, 8, 8], 0.0, 1.0, 2));
    let plain = ex.features(&x, &[0]).unwrap()[0].to_tensor();
    let normed = back.features(&x, &[0]).unwrap()[0].to_tensor();
    assert_ne!(plain, normed);
}

#[test]
fn loss_weights_validation() {
    assert!(matches!(LossWeights::new(0.0, 0.0, 0.0), Err(Error::Config(_))));
    assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
    assert!(LossWeights::new(f32::NAN, 1.0, 1.0).is_err());
    let d = LossWeights::default();
    assert_eq!((d.alpha(), d.beta(), d.gamma()), (1.0, 0.01, 1.0));
}

#[test]
fn final_loss_is_the_weighted_sum() {
    let j = uniform([2, 3, 16, 16], 0.0, 1.0, 10);
    let jh = uniform([2, 3, 16, 16], 0.0, 1.0, 11);
    let ex = small_extractor();
    let p = PatchSpec::new(5).unwrap();
    let w = LossWeights::new(0.7, 0.03, 1.9).unwrap();
    let f = loss_final(&c(&jh), &c(&j), &w, &ex, p).unwrap();
    let b = f.breakdown;
    let dot = 0.7 * b.img as f64 + 0.03 * b.per.unwrap() as f64 + 1.9 * b.map.unwrap() as f64;
    assert!((f.total.item() as f64 - dot).abs() < 1e-7, "{} vs {dot}", f.total.item());

    let only_img = loss_final(&c(&jh), &c(&j), &LossWeights::new(1.0, 0.0, 0.0).unwrap(), &ex, p).unwrap();
    assert_eq!(only_img.total.item(), loss_img(&c(&jh), &c(&j)).unwrap().item());
    assert_eq!((only_img.breakdown.per, only_img.breakdown.map), (None, None));

    let w2 = LossWeights::new(0.7, 0.03, 3.8).unwrap();
    let f2 = loss_final(&c(&jh), &c(&j), &w2, &ex, p).unwrap();
    let map_part = |f: &FinalLoss, g: f64| g * f.breakdown.map.unwrap() as f64;
    assert!((map_part(&f2, 3.8) - 2.0 * map_part(&f, 1.9)).abs() < 1e-7);
}

#[test]
fn zero_gamma_keeps_density_pooling_off_the_tape() {
    use falcon_core::tensor::OpKind;
    let j = uniform([1, 3, 8, 8], 0.0, 1.0, 12);
    let jh = Var::parameter(uniform([1, 3, 8, 8], 0.0, 1.0, 13));
    let kinds = |w: LossWeights| {
        loss_final(&jh, &c(&j), &w, &small_extractor(), PatchSpec::default()).unwrap().total.tape_kinds()
    };
    let with = kinds(LossWeights::new(1.0, 0.0, 1.0).unwrap());
    assert!(with.contains(&OpKind::MaxPool2d) && with.contains(&OpKind::ChannelMax));
    let without = kinds(LossWeights::new(1.0, 0.0, 0.0).unwrap());
    assert!(!without.iter().any(|k| matches!(k, OpKind::MaxPool2d | OpKind::ChannelMax)));
}

#[test]
fn map_loss_gradient_matches_finite_differences() {
    let j = well_separated([1, 3, 8, 8], 0.0, 0.005, 14);
    let jh = well_separated([1, 3, 8, 8], 0.001, 0.005, 15);
    let errs = grad_check_with(&[jh, j], 1e-3, &[1], |v| {
        loss_map(&v[0], &v[1], PatchSpec::new(3).unwrap()).unwrap()
    });
    assert!(errs[0] < 1e-3, "{errs:?}");
}

#[test]
fn final_loss_gradient_matches_finite_differences_with_default_extractor() {
    // The extractor's gates and pool winners are recorded at the base point
    // and replayed, so every probe sees the same smooth branch. The step
    // stays below the input gap so the density map keeps its winners too.
    let ex = FeatureExtractor::seeded().unwrap();
    let j = well_separated([1, 3, 8, 8], 0.0, 0.005, 16);
    let jh = well_separated([1, 3, 8, 8], 0.001, 0.005, 17);
    let w = LossWeights::default();
    let patch = PatchSpec::new(3).unwrap();
    let mut rec = FrozenFeatures::default();
    let free = loss_final_with(&Var::constant(jh.clone()), &Var::constant(j.clone()), &w, &ex, patch, Pattern::Record(&mut rec)).unwrap();
    let replayed = loss_final_with(&Var::constant(jh.clone()), &Var::constant(j.clone()), &w, &ex, patch, Pattern::Replay(&rec)).unwrap();
    assert_eq!(free.total.value().data(), replayed.total.value().data());
    let errs = grad_check_with(&[jh, j], 3e-3, &[1], |v| {
        loss_final_with(&v[0], &v[1], &w, &ex, patch, Pattern::Replay(&rec)).unwrap().total
    });
    assert!(errs[0] < 1e-3, "{errs:?}");
}
