use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f32]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
///
/// Every parameter must have a gradient of matching length; nothing is
/// modified when one is missing.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("no gradient for parameter {name}")))?;
        if g.len() != p.numel() {
            return Err(Error::State(format!(
                "gradient for {name} has {} elements, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        for moments in [&state.m, &state.v] {
            if moments.get(name).is_some_and(|b| b.len() != p.numel()) {
                return Err(Error::State(format!("moment buffer for {name} does not match its parameter")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        // f32 storage, f64 arithmetic: 1 − β2 is not representable in f32
        // to better than 1e-5 relative.
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = f64::from(g);
            let mn = ADAM_BETA1 * f64::from(*m) + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * f64::from(*v) + (1.0 - ADAM_BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = f64::from(lr) * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *w = (f64::from(*w) - step) as f32;
        }
    }
    Ok(())
}
