//! Finite-difference verification of the network's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{falcon_forward, FrozenPoint, Mode, Model};
use crate::density::{network_input, PatchSpec};
use crate::error::Result;
use crate::par;
use crate::tensor::{Tensor, Var};

/// Step for [`check_model_gradients`]. At a frozen point the output is
/// affine in any single parameter, so central differences carry no
/// truncation error and only f32 rounding remains, which shrinks as 1/ε.
pub const FROZEN_FD_EPS: f32 = 0.1;

/// Norm-relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks every parameter of `model` on input `x4` against central
/// differences with step `eps`.
///
/// The objective is a fixed random projection `Σ r_i y_i` of the raw
/// (train-mode) output. Batch statistics and ReLU patterns are recorded at
/// the unperturbed point and replayed for every evaluation, so no step
/// crosses a kink and batch norm is affine; the analytic gradient is taken at
/// the same frozen point.
pub fn check_model_gradients(model: &Model, x4: &Tensor, eps: f32, seed: u64) -> Result<Vec<ParamCheck>> {
    let arch = *model.arch();
    let weights = model.weights();
    let input = Var::constant(x4.clone());

    let mut point = FrozenPoint::default();
    let y = falcon_forward(&input, &arch, &weights.bind(false), Mode::Calibrate(&mut point))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f32> = (0..y.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let params = weights.bind(true);
    let y = falcon_forward(&input, &arch, &params, Mode::Fixed(&point))?;
    let grads = y.backward_with(&proj)?;

    let objective = |name: &str, index: usize, delta: f32| -> Result<f64> {
        let mut w = weights.clone();
        w.params_mut()[name].data_mut()[index] += delta;
        let out = falcon_forward(&Var::constant(x4.clone()), &arch, &w.bind(false), Mode::Fixed(&point))?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(&proj)
            .map(|(&v, &r)| v as f64 * r as f64)
            .sum())
    };

    let mut out = Vec::new();
    for (name, var) in params.iter() {
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; var.value().numel()],
        };
        let values = var.value().data();
        let numeric = par::map_collect(values.len(), |j| {
            let x = values[j];
            let step = ((x + eps) as f64) - ((x - eps) as f64);
            Ok((objective(name, j, eps)? - objective(name, j, -eps)?) / step)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        out.push(ParamCheck {
            name: name.to_string(),
            numel: values.len(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Input for a gradient check: seeded uniform RGB in [0, 1] plus its
/// density mask.
pub fn random_input(n: usize, height: usize, width: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::from_fn([n, 3, height, width], |_, _, _, _| rng.random::<f32>());
    network_input(&rgb, PatchSpec::default(), true)
}
