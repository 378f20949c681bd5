//! Analytic parameter and FLOP accounting.
//!
//! Conventions: a convolution costs 2 FLOPs per multiply-accumulate plus one
//! per bias add; a 2-D FFT over N = H·W points costs 5·N·log2(N) per
//! channel; batch norm (folded to scale and shift) costs 2 per element, ReLU
//! and addition 1 per element. Concatenation, splitting and the output clamp
//! move data and are free.

use super::{ArchConfig, FfcbConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub height: usize,
    pub width: usize,
    pub items: Vec<LayerCost>,
}

impl ModelSummary {
    pub fn params(&self) -> u64 {
        self.items.iter().map(|i| i.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.items.iter().map(|i| i.flops).sum()
    }

    /// FLOPs of items whose kind is `kind`.
    pub fn flops_of(&self, kind: &str) -> u64 {
        self.items.iter().filter(|i| i.kind == kind).map(|i| i.flops).sum()
    }

    fn push(&mut self, name: String, kind: &'static str, params: u64, flops: u64) {
        self.items.push(LayerCost { name, kind, params, flops });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, out_hw: usize) {
        let (cin, cout, k, hw) = (cin as u64, cout as u64, k as u64, out_hw as u64);
        let b = bias as u64;
        self.push(name.into(), "conv", cin * cout * k * k + b * cout, 2 * cin * cout * k * k * hw + b * cout * hw);
    }

    fn bn_relu(&mut self, name: &str, c: usize, hw: usize) {
        let e = (c * hw) as u64;
        self.push(name.into(), "batch_norm", 2 * c as u64, 2 * e);
        self.push(format!("{name}.relu"), "relu", 0, e);
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, out_hw: usize) {
        self.conv(name, cin, cout, 3, false, out_hw);
        self.bn_relu(&format!("{name}.bn"), cout, out_hw);
    }

    fn fft(&mut self, name: String, channels: usize, h: usize, w: usize) {
        let n = (h * w) as f64;
        let flops = (channels as f64 * 5.0 * n * n.log2()).round() as u64;
        self.push(name, "fft", 0, flops);
    }

    fn ffcb(&mut self, cfg: &FfcbConfig, prefix: &str, h: usize, w: usize) {
        let (cl, cg, hw) = (cfg.local_channels(), cfg.global_channels(), h * w);
        let half = h * (w / 2 + 1);
        for mix in ["mix1", "mix2"] {
            let p = format!("{prefix}.{mix}");
            self.conv(&format!("{p}.l2l"), cl, cl, 3, false, hw);
            if cg > 0 {
                self.conv(&format!("{p}.g2l"), cg, cl, 3, false, hw);
                self.conv(&format!("{p}.l2g"), cl, cg, 3, false, hw);
                self.conv(&format!("{p}.spec_in"), cg, cg, 1, false, hw);
                self.bn_relu(&format!("{p}.spec_in_bn"), cg, hw);
                self.fft(format!("{p}.rfft2"), cg, h, w);
                self.conv(&format!("{p}.spec_freq"), 2 * cg, 2 * cg, 1, false, half);
                self.items.last_mut().expect("just pushed").kind = "spectral_conv";
                self.bn_relu(&format!("{p}.spec_freq_bn"), 2 * cg, half);
                self.fft(format!("{p}.irfft2"), cg, h, w);
                self.push(format!("{p}.add"), "add", 0, (cfg.channels() * hw) as u64);
            }
            self.bn_relu(&format!("{p}.bn_l"), cl, hw);
            if cg > 0 {
                self.bn_relu(&format!("{p}.bn_g"), cg, hw);
            }
        }
    }
}

/// Per-layer parameters and FLOPs of one forward pass at `height`×`width`
/// with batch size 1.
pub fn summarize(arch: &ArchConfig, height: usize, width: usize) -> Result<ModelSummary> {
    let m = arch.multiple();
    if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
        return Err(Error::param(
            "resolution",
            format!("{height}x{width} must be a non-zero multiple of {m}"),
        ));
    }
    let ffcb = arch.ffcb()?;
    let b = arch.base;
    let mut s = ModelSummary { height, width, items: Vec::new() };
    let hw0 = height * width;
    s.conv_block("stem.0", 4, b, hw0);
    s.conv_block("stem.1", b, b, hw0);
    for i in 1..=arch.depth {
        let c = b << (i - 1);
        let hw = hw0 >> (2 * i);
        s.conv_block(&format!("down{i}.0"), c, 2 * c, hw);
        s.conv_block(&format!("down{i}.1"), 2 * c, 2 * c, hw);
    }
    let (bh, bw) = (height >> arch.depth, width >> arch.depth);
    let cb = arch.bottleneck_channels();
    s.ffcb(&ffcb, "fal.ffcb", bh, bw);
    s.conv_block("fal.conv", cb, cb, bh * bw);
    s.push("fal.residual".into(), "add", 0, (cb * bh * bw) as u64);
    for i in (1..=arch.depth).rev() {
        let c = b << (i - 1);
        let hw = hw0 >> (2 * (i - 1));
        let in_hw = (hw / 4) as u64;
        let (ci, co) = ((2 * c) as u64, c as u64);
        s.push(format!("up{i}.tconv"), "tconv", ci * co * 4 + co, 2 * ci * co * 4 * in_hw + co * hw as u64);
        s.conv_block(&format!("up{i}.0"), 2 * c, c, hw);
        s.conv_block(&format!("up{i}.1"), c, c, hw);
    }
    s.conv("head", b, 3, 1, true, hw0);
    Ok(s)
}
