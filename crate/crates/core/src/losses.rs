//! Training objectives: pixel MSE, a perceptual term on frozen convolutional
//! features, and MSE between density maps, combined with fixed weights.

use crate::density::{ddp, PatchSpec};
use crate::error::{Error, Result};
use crate::network::{LayerSpecs, ModelWeights};
use crate::tensor::{Tensor, Var};

pub const EXTRACTOR_SEED: u64 = 42;
/// Layer whose output carries the content term.
pub const CONTENT_TAP: usize = 8;
/// Layers whose Gram matrices carry the style term.
pub const STYLE_TAPS: [usize; 3] = [3, 8, 15];

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    alpha: f32,
    beta: f32,
    gamma: f32,
}

impl LossWeights {
    pub fn new(alpha: f32, beta: f32, gamma: f32) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if alpha == 0.0 && beta == 0.0 && gamma == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(LossWeights { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn beta(&self) -> f32 {
        self.beta
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.01, gamma: 1.0 }
    }
}

/// ReLU gates and pool winners of one extractor pass, in layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenFeatures {
    masks: Vec<Vec<bool>>,
}

/// How the extractor treats its non-smooth layers.
pub enum Pattern<'a> {
    Free,
    /// Records ReLU on/off states and the winning element of every pool
    /// window.
    Record(&'a mut FrozenFeatures),
    /// Replays a recording: ReLUs become fixed masks and each pool window
    /// passes its recorded winner, so the stack is smooth around the
    /// recorded input.
    Replay(&'a FrozenFeatures),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    Conv { cin: usize, cout: usize },
    Relu,
    MaxPool,
}

/// Frozen feature stack shaped like the first sixteen layers of VGG-16's
/// feature extractor. Weights are plain tensors, wrapped as constants on
/// every call, so they never collect gradients.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<FeatureLayer>,
    weights: ModelWeights,
    normalize: bool,
}

/// VGG-16 feature layers 0..=15 with channel widths divided by `divisor`.
pub fn vgg16_layers(divisor: usize) -> Result<Vec<FeatureLayer>> {
    if divisor == 0 || 64 % divisor != 0 {
        return Err(Error::Config(format!("width divisor {divisor} must divide 64")));
    }
    let [a, b, c] = [64 / divisor, 128 / divisor, 256 / divisor];
    use FeatureLayer::*;
    Ok(vec![
        Conv { cin: 3, cout: a },
        Relu,
        Conv { cin: a, cout: a },
        Relu,
        MaxPool,
        Conv { cin: a, cout: b },
        Relu,
        Conv { cin: b, cout: b },
        Relu,
        MaxPool,
        Conv { cin: b, cout: c },
        Relu,
        Conv { cin: c, cout: c },
        Relu,
        Conv { cin: c, cout: c },
        Relu,
    ])
}

fn layer_specs(layers: &[FeatureLayer]) -> LayerSpecs {
    let mut s = LayerSpecs::default();
    for (i, l) in layers.iter().enumerate() {
        if let FeatureLayer::Conv { cin, cout } = *l {
            s.conv(&format!("features.{i}"), cin, cout, 3, true);
        }
    }
    s
}

impl FeatureExtractor {
    /// Seeded stand-in for pretrained weights, full VGG widths.
    pub fn seeded() -> Result<Self> {
        Self::with_divisor(1, EXTRACTOR_SEED)
    }

    pub fn with_divisor(divisor: usize, seed: u64) -> Result<Self> {
        let layers = vgg16_layers(divisor)?;
        let weights = ModelWeights::init(&layer_specs(&layers), seed)?;
        Ok(FeatureExtractor { layers, weights, normalize: false })
    }

    /// Pretrained weights named `features.<i>.weight` / `features.<i>.bias`.
    /// Channel widths are read from the tensors.
    pub fn from_weights(mut weights: ModelWeights, normalize: bool) -> Result<Self> {
        let w0 = weights
            .get("features.0.weight")
            .ok_or_else(|| Error::Config("missing tensor features.0.weight".into()))?;
        let first = w0.dims()[0];
        if first == 0 || 64 % first != 0 {
            return Err(Error::Config(format!("first feature layer has {first} channels")));
        }
        let layers = vgg16_layers(64 / first)?;
        weights.conform(&layer_specs(&layers))?;
        Ok(FeatureExtractor { layers, weights, normalize })
    }

    /// Switches ImageNet mean/std input normalization (for pretrained weights).
    pub fn set_normalize(&mut self, on: bool) {
        self.normalize = on;
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Outputs after each layer in `taps` (ascending, deduplicated).
    pub fn features(&self, x: &Var, taps: &[usize]) -> Result<Vec<Var>> {
        self.features_with(x, taps, Pattern::Free)
    }

    pub fn features_with(&self, x: &Var, taps: &[usize], mut pattern: Pattern) -> Result<Vec<Var>> {
        if let Some(&bad) = taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::Config(format!(
                "tap {bad} outside the {}-layer feature stack",
                self.layers.len()
            )));
        }
        if x.dims()[1] != 3 {
            return Err(Error::dim("channel", format!("extractor expects 3 channels, got {}", x.dims()[1])));
        }
        let last = taps.iter().copied().max().unwrap_or(0);
        let mut h = if self.normalize { imagenet_normalize(x)? } else { x.clone() };
        let mut out = Vec::with_capacity(taps.len());
        let mut replayed = 0;
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            if let (FeatureLayer::Relu | FeatureLayer::MaxPool, Pattern::Replay(rec)) = (layer, &pattern) {
                let keep = rec
                    .masks
                    .get(replayed)
                    .ok_or_else(|| Error::State(format!("no recorded pattern for layer {i}")))?;
                replayed += 1;
                h = match layer {
                    FeatureLayer::Relu => h.mask(keep)?,
                    _ => h.mask_fill(keep, f32::NEG_INFINITY)?.max_pool2d(2, 2, 0)?,
                };
            } else {
                h = match layer {
                    FeatureLayer::Conv { .. } => {
                        let w = Var::constant(self.weights.params()[&format!("features.{i}.weight")].clone());
                        let b = Var::constant(self.weights.params()[&format!("features.{i}.bias")].clone());
                        h.conv2d(&w, Some(&b), 1, 1)?
                    }
                    FeatureLayer::Relu => {
                        if let Pattern::Record(rec) = &mut pattern {
                            rec.masks.push(h.value().data().iter().map(|&v| v > 0.0).collect());
                        }
                        h.relu()
                    }
                    FeatureLayer::MaxPool => {
                        if let Pattern::Record(rec) = &mut pattern {
                            rec.masks.push(pool_winners(h.value()));
                        }
                        h.max_pool2d(2, 2, 0)?
                    }
                };
            }
            if taps.contains(&i) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}

/// Marks the first maximum of every 2×2 stride-2 window.
fn pool_winners(t: &Tensor) -> Vec<bool> {
    let [n, c, h, w] = t.dims();
    let mut keep = vec![false; t.numel()];
    for p in 0..n * c {
        let plane = t.plane(p / c, p % c);
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                keep[p * h * w + best] = true;
            }
        }
    }
    keep
}

/// (x − mean) / std per channel, as a diagonal 1×1 convolution.
fn imagenet_normalize(x: &Var) -> Result<Var> {
    let w = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 / IMAGENET_STD[o] } else { 0.0 });
    let b = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
    x.conv2d(&Var::constant(w), Some(&Var::constant(b)), 1, 0)
}

fn same_dims(a: &Var, b: &Var) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim("shape", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn detach(v: &Var) -> Var {
    if v.requires_grad() {
        Var::constant(v.to_tensor())
    } else {
        v.clone()
    }
}

/// Mean squared pixel error.
pub fn loss_img(j_hat: &Var, j: &Var) -> Result<Var> {
    j_hat.mse(j)
}

/// Per-sample Gram matrices normalized by C·H·W, dims (N, 1, C, C).
pub fn gram(features: &Var) -> Result<Var> {
    features.gram()
}

/// Content plus style distance on the frozen features: squared Euclidean
/// distance of the layer-8 features plus squared Frobenius distances of the
/// Gram matrices at layers 3, 8 and 15. Sums run over each sample and are
/// averaged over the batch. The reference side is detached.
pub fn loss_perceptual(j_hat: &Var, j: &Var, extractor: &FeatureExtractor) -> Result<Var> {
    loss_perceptual_taps(j_hat, j, extractor, CONTENT_TAP, &STYLE_TAPS)
}

pub fn loss_perceptual_taps(
    j_hat: &Var,
    j: &Var,
    extractor: &FeatureExtractor,
    content: usize,
    style: &[usize],
) -> Result<Var> {
    perceptual(j_hat, j, extractor, content, style, Pattern::Free)
}

/// [`loss_perceptual`] with the output's extractor pass recorded or replayed.
pub fn loss_perceptual_with(j_hat: &Var, j: &Var, extractor: &FeatureExtractor, pattern: Pattern) -> Result<Var> {
    perceptual(j_hat, j, extractor, CONTENT_TAP, &STYLE_TAPS, pattern)
}

fn perceptual(
    j_hat: &Var,
    j: &Var,
    extractor: &FeatureExtractor,
    content: usize,
    style: &[usize],
    pattern: Pattern,
) -> Result<Var> {
    same_dims(j_hat, j)?;
    let mut taps: Vec<usize> = style.iter().copied().chain([content]).collect();
    taps.sort_unstable();
    taps.dedup();
    let fa = extractor.features_with(j_hat, &taps, pattern)?;
    let fb = extractor.features(&detach(j), &taps)?;
    let at = |t: usize| taps.iter().position(|&x| x == t).expect("tap requested");
    let n = j_hat.dims()[0].max(1) as f32;
    let c = at(content);
    let mut total = fa[c].sub(&fb[c])?.sum_squares();
    for &s in style {
        let i = at(s);
        let d = gram(&fa[i])?.sub(&gram(&fb[i])?)?.sum_squares();
        total = total.add(&d)?;
    }
    Ok(total.scale(1.0 / n))
}

/// MSE between the density maps of the output and of the reference.
pub fn loss_map(j_hat: &Var, j: &Var, patch: PatchSpec) -> Result<Var> {
    same_dims(j_hat, j)?;
    ddp(j_hat, patch)?.mse(&ddp(&detach(j), patch)?)
}

/// Unweighted components of one loss evaluation. Components whose weight is
/// zero are not computed, except the pixel term, which is always reported.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub img: f32,
    pub per: Option<f32>,
    pub map: Option<f32>,
    pub total: f32,
}

pub struct FinalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// α·L_img + β·L_per + γ·L_map. Terms with zero weight stay off the tape.
pub fn loss_final(
    j_hat: &Var,
    j: &Var,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    patch: PatchSpec,
) -> Result<FinalLoss> {
    loss_final_with(j_hat, j, weights, extractor, patch, Pattern::Free)
}

/// [`loss_final`] with the perceptual pass on `j_hat` recorded or replayed.
pub fn loss_final_with(
    j_hat: &Var,
    j: &Var,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    patch: PatchSpec,
    pattern: Pattern,
) -> Result<FinalLoss> {
    same_dims(j_hat, j)?;
    let img = if weights.alpha > 0.0 {
        loss_img(j_hat, j)?
    } else {
        loss_img(&detach(j_hat), j)?
    };
    let mut terms = Vec::new();
    if weights.alpha > 0.0 {
        terms.push((img.clone(), weights.alpha));
    }
    let mut per = None;
    if weights.beta > 0.0 {
        let p = loss_perceptual_with(j_hat, j, extractor, pattern)?;
        per = Some(p.item());
        terms.push((p, weights.beta));
    }
    let mut map = None;
    if weights.gamma > 0.0 {
        let m = loss_map(j_hat, j, patch)?;
        map = Some(m.item());
        terms.push((m, weights.gamma));
    }
    let total = Var::weighted_sum(&terms.iter().map(|(v, w)| (v, *w)).collect::<Vec<_>>())?;
    let breakdown = LossBreakdown {
        img: img.item(),
        per,
        map,
        total: total.item(),
    };
    Ok(FinalLoss { total, breakdown })
}
