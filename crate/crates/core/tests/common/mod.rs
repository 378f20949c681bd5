#![allow(dead_code)]

use falcon_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: [usize; 4], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(dims, |_, _, _, _| r.random_range(lo..hi))
}

/// Values that are pairwise at least `gap` apart (a shuffled grid), so max,
/// min and ReLU kinks stay clear of finite-difference steps.
pub fn well_separated(dims: [usize; 4], lo: f32, gap: f32, seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| lo + gap * i as f32).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(dims, vals).unwrap()
}

/// Fixed pseudo-random projection used to turn a tensor output into a
/// scalar objective `Σ r_i y_i`.
pub fn projection(len: usize) -> Vec<f32> {
    let mut r = rng(0x5eed);
    (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

fn objective(out: &Tensor, proj: &[f32]) -> f64 {
    out.data()
        .iter()
        .zip(proj)
        .map(|(&y, &r)| y as f64 * r as f64)
        .sum()
}

/// Norm-relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and
/// central-difference gradients, one entry per input. The objective is a
/// fixed random projection of `f`'s output. Inputs listed in `frozen` are
/// not perturbed (their entry is 0).
pub fn grad_check_with(
    inputs: &[Tensor],
    eps: f32,
    frozen: &[usize],
    f: impl Fn(&[Var]) -> Var,
) -> Vec<f64> {
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if frozen.contains(&i) {
                Var::constant(t.clone())
            } else {
                Var::parameter(t.clone())
            }
        })
        .collect();
    let out = f(&vars);
    let proj = projection(out.value().numel());
    out.backward_with(&proj).unwrap();

    let mut errs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        if frozen.contains(&i) {
            errs.push(0.0);
            continue;
        }
        // Inputs the output does not depend on get no gradient at all.
        let analytic = vars[i].grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0f64; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f32| {
                let consts: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                objective(f(&consts).value(), &proj)
            };
            // Divide by the step f32 can actually represent around this value.
            let x = input.data()[j];
            let step = ((x + eps) as f64) - ((x - eps) as f64);
            *slot = (eval(eps) - eval(-eps)) / step;
        }
        errs.push(relative_error(&analytic, &numeric));
    }
    errs
}

pub fn grad_check(inputs: &[Tensor], eps: f32, f: impl Fn(&[Var]) -> Var) -> Vec<f64> {
    grad_check_with(inputs, eps, &[], f)
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Direct nested-loop convolution with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims();
    let [co, _, k, _] = w.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, co, oh, ow], |i, o, y, xx| {
        let mut acc = b.map(|b| b.data()[o] as f64).unwrap_or(0.0);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(i, ci, iy as usize, ix as usize) as f64 * w.at(o, ci, ky, kx) as f64;
                    }
                }
            }
        }
        acc as f32
    })
}

/// Window max with edge replication, by brute force.
pub fn naive_max_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, c, oh, ow], |i, ch, y, xx| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = ((y * stride + ky) as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                let ix = ((xx * stride + kx) as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                m = m.max(x.at(i, ch, iy, ix));
            }
        }
        m
    })
}

/// Dark channel by direct double minimum: over channels, then over the
/// replicate-padded `patch × patch` window.
pub fn naive_dark_channel(x: &Tensor, patch: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let r = (patch / 2) as isize;
    Tensor::from_fn([n, 1, h, w], |i, _, y, xx| {
        let mut m = f32::INFINITY;
        for ch in 0..c {
            for dy in -r..=r {
                for dx in -r..=r {
                    let iy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let ix = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                    m = m.min(x.at(i, ch, iy, ix));
                }
            }
        }
        m
    })
}

/// Full complex 2-D DFT of one real plane, in f64: (re, im), each h×w.
pub fn full_dft(plane: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for k in 0..h {
        for l in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let theta = -2.0 * std::f64::consts::PI * ((k * y) as f64 / h as f64 + (l * x) as f64 / w as f64);
                    let v = plane[y * w + x] as f64;
                    sr += v * theta.cos();
                    si += v * theta.sin();
                }
            }
            re[k * w + l] = sr;
            im[k * w + l] = si;
        }
    }
    (re, im)
}
