//! The dehazing generator: a U-Net whose bottleneck is a frequency link
//! built around a fast Fourier convolution block.
//!
//! Layer names follow the module tree, e.g. `down1.0.weight`,
//! `fal.ffcb.mix2.bn_g.gamma`, `up2.tconv.bias`, `head.weight`.

pub mod gradcheck;
mod summary;
mod weights;

use std::path::Path;

pub use summary::{summarize, LayerCost, ModelSummary};
pub use weights::{Init, LayerSpecs, ModelWeights, NormStats, ParamSpec, Params, MAGIC, VERSION};

use crate::density::{network_input, PatchSpec};
use crate::error::{Error, Result};
use crate::image_synth::ImageBuffer;
use crate::tensor::{BatchNormMode, BnBatchStats, Tensor, Var};

pub const DEFAULT_ALPHA_IN: f32 = 0.75;

/// How a forward pass treats batch normalization.
pub enum Mode<'a> {
    /// Batch statistics; running statistics are updated in place.
    Train(&'a mut NormStats),
    /// Running statistics, read only.
    Eval(&'a NormStats),
    /// Behaves like train mode (batch statistics, unclamped output) and
    /// records the batch statistics and every ReLU on/off pattern, without
    /// touching running stats.
    Calibrate(&'a mut FrozenPoint),
    /// Replays a recorded point: batch norm uses the recorded statistics and
    /// ReLUs the recorded patterns. The network is then smooth around that
    /// point and its gradient there equals the train-mode gradient with
    /// batch statistics held fixed.
    Fixed(&'a FrozenPoint),
    /// Batch norm and ReLU act as the identity, leaving the linear skeleton
    /// of the network. Used to probe linearity of individual paths.
    Linearized,
}

impl Mode<'_> {
    /// Eval is the only mode whose output is clamped.
    fn clamps(&self) -> bool {
        matches!(self, Mode::Eval(_))
    }
}

/// Batch statistics and ReLU patterns of one forward pass, in call order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenPoint {
    pub stats: NormStats,
    pub gates: Vec<Vec<bool>>,
}

/// Channel partition of a fast Fourier convolution block. `alpha_in` is the
/// share of channels routed through the global (spectral) path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfcbConfig {
    channels: usize,
    alpha_in: f32,
    global: usize,
}

impl FfcbConfig {
    pub fn new(channels: usize, alpha_in: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha_in) {
            return Err(Error::Config(format!("alpha_in {alpha_in} outside [0, 1)")));
        }
        let exact = alpha_in as f64 * channels as f64;
        let global = exact.round() as usize;
        if (exact - global as f64).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "alpha_in {alpha_in} does not split {channels} channels into whole parts"
            )));
        }
        if global == channels || channels == 0 {
            return Err(Error::Config(format!("no local channels left out of {channels}")));
        }
        Ok(FfcbConfig { channels, alpha_in, global })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha_in(&self) -> f32 {
        self.alpha_in
    }

    pub fn local_channels(&self) -> usize {
        self.channels - self.global
    }

    pub fn global_channels(&self) -> usize {
        self.global
    }

    pub fn specs(&self, prefix: &str) -> LayerSpecs {
        let (cl, cg) = (self.local_channels(), self.global);
        let mut s = LayerSpecs::default();
        for mix in ["mix1", "mix2"] {
            let p = format!("{prefix}.{mix}");
            s.conv(&format!("{p}.l2l"), cl, cl, 3, false);
            if cg > 0 {
                s.conv(&format!("{p}.g2l"), cg, cl, 3, false);
                s.conv(&format!("{p}.l2g"), cl, cg, 3, false);
                s.conv(&format!("{p}.spec_in"), cg, cg, 1, false);
                s.norm(&format!("{p}.spec_in_bn"), cg);
                s.conv(&format!("{p}.spec_freq"), 2 * cg, 2 * cg, 1, false);
                s.norm(&format!("{p}.spec_freq_bn"), 2 * cg);
            }
            s.norm(&format!("{p}.bn_l"), cl);
            if cg > 0 {
                s.norm(&format!("{p}.bn_g"), cg);
            }
        }
        s
    }
}

/// Declares a 3×3 conv + batch norm + ReLU block.
fn conv_block_specs(s: &mut LayerSpecs, name: &str, cin: usize, cout: usize) {
    s.conv(name, cin, cout, 3, false);
    s.norm(&format!("{name}.bn"), cout);
}

pub fn fal_specs(cfg: &FfcbConfig, prefix: &str) -> LayerSpecs {
    let mut s = cfg.specs(&format!("{prefix}.ffcb"));
    conv_block_specs(&mut s, &format!("{prefix}.conv"), cfg.channels, cfg.channels);
    s
}

/// U-Net shape: `depth` stride-2 levels starting from `base` channels, with
/// channels doubling per level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub depth: usize,
    pub base: usize,
    pub alpha_in: f32,
}

impl ArchConfig {
    pub fn new(depth: usize, base: usize, alpha_in: f32) -> Result<Self> {
        let arch = ArchConfig { depth, base, alpha_in };
        arch.validate()?;
        Ok(arch)
    }

    pub fn toy() -> Self {
        ArchConfig { depth: 2, base: 8, alpha_in: DEFAULT_ALPHA_IN }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset {other} (toy or default)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("depth {} outside 1..=8", self.depth)));
        }
        if self.base == 0 {
            return Err(Error::Config("base channel count must be positive".into()));
        }
        self.ffcb().map(|_| ())
    }

    /// Spatial extents must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base << self.depth
    }

    pub fn ffcb(&self) -> Result<FfcbConfig> {
        FfcbConfig::new(self.bottleneck_channels(), self.alpha_in)
    }

    pub fn specs(&self) -> Result<LayerSpecs> {
        let ffcb = self.ffcb()?;
        let b = self.base;
        let mut s = LayerSpecs::default();
        conv_block_specs(&mut s, "stem.0", 4, b);
        conv_block_specs(&mut s, "stem.1", b, b);
        for i in 1..=self.depth {
            let c = b << (i - 1);
            conv_block_specs(&mut s, &format!("down{i}.0"), c, 2 * c);
            conv_block_specs(&mut s, &format!("down{i}.1"), 2 * c, 2 * c);
        }
        s.extend(fal_specs(&ffcb, "fal"));
        for i in (1..=self.depth).rev() {
            let c = b << (i - 1);
            s.tconv(&format!("up{i}.tconv"), 2 * c, c, 2);
            conv_block_specs(&mut s, &format!("up{i}.0"), 2 * c, c);
            conv_block_specs(&mut s, &format!("up{i}.1"), c, c);
        }
        s.conv("head", b, 3, 1, true);
        Ok(s)
    }

    /// Recovers the architecture from tensor shapes.
    pub fn infer(weights: &ModelWeights) -> Result<Self> {
        let depth = (1..).take_while(|i| weights.get(&format!("down{i}.0.weight")).is_some()).count();
        let stem = weights
            .get("stem.0.weight")
            .ok_or_else(|| Error::Config("missing tensor stem.0.weight".into()))?;
        let base = stem.dims()[0];
        let local = weights
            .get("fal.ffcb.mix1.l2l.weight")
            .ok_or_else(|| Error::Config("missing tensor fal.ffcb.mix1.l2l.weight".into()))?
            .dims()[0];
        let c = base << depth;
        let alpha_in = (c - local.min(c)) as f32 / c as f32;
        Self::new(depth, base, alpha_in)
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { depth: 4, base: 32, alpha_in: DEFAULT_ALPHA_IN }
    }
}

/// Walks the layer graph for one forward pass.
struct Runner<'p, 'm> {
    params: &'p Params,
    mode: Mode<'m>,
    gate: usize,
}

impl Runner<'_, '_> {
    fn p(&self, name: &str) -> Result<&Var> {
        self.params.get(name)
    }

    fn conv(&self, x: &Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        x.conv2d(self.p(&format!("{name}.weight"))?, None, stride, pad)
    }

    fn bn_relu(&mut self, x: &Var, name: &str) -> Result<Var> {
        let gamma = self.params.get(&format!("{name}.gamma"))?;
        let beta = self.params.get(&format!("{name}.beta"))?;
        let missing = || Error::Config(format!("no running statistics for {name}"));
        let y = match &mut self.mode {
            Mode::Train(stats) => {
                let s = stats.get_mut(name).ok_or_else(missing)?;
                x.batch_norm(gamma, beta, s, BatchNormMode::Train)?
            }
            Mode::Eval(stats) => {
                let mut s = stats.get(name).ok_or_else(missing)?.clone();
                x.batch_norm(gamma, beta, &mut s, BatchNormMode::Eval)?
            }
            Mode::Calibrate(point) => {
                let mut s = BnBatchStats::from_batch(x.value());
                let y = x.batch_norm(gamma, beta, &mut s, BatchNormMode::Eval)?;
                point.stats.insert(name.to_string(), s);
                point.gates.push(y.value().data().iter().map(|&v| v > 0.0).collect());
                y
            }
            Mode::Fixed(point) => {
                let mut s = point.stats.get(name).ok_or_else(missing)?.clone();
                let y = x.batch_norm(gamma, beta, &mut s, BatchNormMode::Eval)?;
                let gate = point
                    .gates
                    .get(self.gate)
                    .ok_or_else(|| Error::State(format!("no recorded ReLU pattern for {name}")))?;
                self.gate += 1;
                return y.mask(gate);
            }
            Mode::Linearized => return Ok(x.clone()),
        };
        Ok(y.relu())
    }

    fn conv_block(&mut self, x: &Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv(x, name, stride, 1)?;
        self.bn_relu(&y, &format!("{name}.bn"))
    }

    fn spectral(&mut self, g: &Var, p: &str) -> Result<Var> {
        let [_, _, h, w] = g.dims();
        let y = self.conv(g, &format!("{p}.spec_in"), 1, 0)?;
        let y = self.bn_relu(&y, &format!("{p}.spec_in_bn"))?;
        let f = y.rfft2()?;
        let f = self.conv(&f, &format!("{p}.spec_freq"), 1, 0)?;
        let f = self.bn_relu(&f, &format!("{p}.spec_freq_bn"))?;
        f.irfft2(h, w)
    }

    fn ffcb_mix(&mut self, l: &Var, g: Option<&Var>, p: &str) -> Result<(Var, Option<Var>)> {
        let l_s1 = self.conv(l, &format!("{p}.l2l"), 1, 1)?;
        let Some(g) = g else {
            return Ok((self.bn_relu(&l_s1, &format!("{p}.bn_l"))?, None));
        };
        let g_s = self.conv(g, &format!("{p}.g2l"), 1, 1)?;
        let l_s2 = self.conv(l, &format!("{p}.l2g"), 1, 1)?;
        let g_f = self.spectral(g, p)?;
        let new_l = self.bn_relu(&l_s1.add(&g_s)?, &format!("{p}.bn_l"))?;
        let new_g = self.bn_relu(&l_s2.add(&g_f)?, &format!("{p}.bn_g"))?;
        Ok((new_l, Some(new_g)))
    }

    fn ffcb(&mut self, x: &Var, cfg: &FfcbConfig, prefix: &str) -> Result<Var> {
        if x.dims()[1] != cfg.channels {
            return Err(Error::dim(
                "channel",
                format!("block expects {} channels, input has {}", cfg.channels, x.dims()[1]),
            ));
        }
        let (mut l, mut g) = if cfg.global > 0 {
            let mut parts = x.split_channels(&[cfg.local_channels(), cfg.global])?;
            let g = parts.pop();
            (parts.pop().expect("two parts"), g)
        } else {
            (x.clone(), None)
        };
        for mix in ["mix1", "mix2"] {
            (l, g) = self.ffcb_mix(&l, g.as_ref(), &format!("{prefix}.{mix}"))?;
        }
        match g {
            Some(g) => Var::concat_channels(&[l, g]),
            None => Ok(l),
        }
    }

    fn fal(&mut self, x: &Var, cfg: &FfcbConfig, prefix: &str) -> Result<Var> {
        let y = self.ffcb(x, cfg, &format!("{prefix}.ffcb"))?;
        let y = self.conv_block(&y, &format!("{prefix}.conv"), 1)?;
        y.add(x)
    }

    fn unet(&mut self, x: &Var, arch: &ArchConfig) -> Result<Var> {
        let mut h = self.conv_block(x, "stem.0", 1)?;
        h = self.conv_block(&h, "stem.1", 1)?;
        let mut skips = Vec::with_capacity(arch.depth);
        for i in 1..=arch.depth {
            skips.push(h.clone());
            h = self.conv_block(&h, &format!("down{i}.0"), 2)?;
            h = self.conv_block(&h, &format!("down{i}.1"), 1)?;
        }
        h = self.fal(&h, &arch.ffcb()?, "fal")?;
        for i in (1..=arch.depth).rev() {
            let up = h.conv_transpose2d(
                self.p(&format!("up{i}.tconv.weight"))?,
                Some(self.p(&format!("up{i}.tconv.bias"))?),
                2,
            )?;
            let skip = skips.pop().expect("one skip per level");
            h = Var::concat_channels(&[up, skip])?;
            h = self.conv_block(&h, &format!("up{i}.0"), 1)?;
            h = self.conv_block(&h, &format!("up{i}.1"), 1)?;
        }
        h.conv2d(self.p("head.weight")?, Some(self.p("head.bias")?), 1, 0)
    }
}

/// One fast Fourier convolution block under `prefix`.
pub fn ffcb_forward(x: &Var, cfg: &FfcbConfig, prefix: &str, params: &Params, mode: Mode) -> Result<Var> {
    Runner { params, mode, gate: 0 }.ffcb(x, cfg, prefix)
}

/// Frequency link: block, conv block, plus the input.
pub fn fal_forward(x: &Var, cfg: &FfcbConfig, prefix: &str, params: &Params, mode: Mode) -> Result<Var> {
    Runner { params, mode, gate: 0 }.fal(x, cfg, prefix)
}

/// Full network on an (N, 4, H, W) input of RGB plus density mask. Eval
/// output is clamped to [0, 1] and detached; train output is raw.
pub fn falcon_forward(x4: &Var, arch: &ArchConfig, params: &Params, mode: Mode) -> Result<Var> {
    let [_, c, h, w] = x4.dims();
    if c != 4 {
        return Err(Error::dim("channel", format!("expected RGB + mask (4 channels), got {c}")));
    }
    let m = arch.multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::dim(
            "spatial",
            format!("{h}x{w} must be a non-zero multiple of {m} (2^depth) on both axes"),
        ));
    }
    let clamp = mode.clamps();
    let y = Runner { params, mode, gate: 0 }.unet(x4, arch)?;
    if !clamp {
        return Ok(y);
    }
    let mut t = y.to_tensor();
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Var::constant(t))
}

/// An architecture with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&arch.specs()?, seed)?;
        Ok(Model { arch, weights })
    }

    /// Infers the architecture from tensor shapes and checks that every
    /// declared tensor is present.
    pub fn from_weights(mut weights: ModelWeights) -> Result<Self> {
        let arch = ArchConfig::infer(&weights)?;
        weights.conform(&arch.specs()?)?;
        Ok(Model { arch, weights })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(ModelWeights::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.weights.save(path)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    /// Eval-mode forward on a prepared (N, 4, H, W) input.
    pub fn infer(&self, x4: &Tensor) -> Result<Tensor> {
        let params = self.weights.bind(false);
        let y = falcon_forward(&Var::constant(x4.clone()), &self.arch, &params, Mode::Eval(self.weights.stats()))?;
        Ok(y.to_tensor())
    }

    /// Dehazes an (N, 3, H, W) batch: mask, concat, network.
    pub fn dehaze(&self, image: &Tensor, patch: PatchSpec, use_cdm: bool) -> Result<Tensor> {
        self.infer(&network_input(image, patch, use_cdm)?)
    }

    /// Dehazes one image of any size: replicate-pads to the next multiple of
    /// 2^depth, runs the network and crops back.
    pub fn dehaze_image(&self, image: &ImageBuffer, patch: PatchSpec, use_cdm: bool) -> Result<ImageBuffer> {
        let m = self.arch.multiple();
        let (w, h) = (image.width(), image.height());
        let padded = image.pad_replicate(w.div_ceil(m) * m, h.div_ceil(m) * m)?;
        let out = self.dehaze(&padded.to_tensor(), patch, use_cdm)?;
        ImageBuffer::from_tensor(&out, 0)?.crop(0, 0, w, h)
    }

    pub fn summary(&self, height: usize, width: usize) -> Result<ModelSummary> {
        summarize(&self.arch, height, width)
    }
}
