use super::graph::{Node, OpKind, Var};
use super::kernels::conv::{self, Geometry};
use super::kernels::{fft, pool};
use super::{numel, Dims, Tensor};
use crate::error::{Error, Result};
use crate::par;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

const AXES: [&str; 4] = ["batch", "channel", "height", "width"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and fold them into the running stats.
    Train,
    /// Normalize with the running stats.
    Eval,
}

/// Running mean/variance of one batch-norm layer. `None` until the first
/// training batch has been seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnBatchStats {
    pub mean: Option<Vec<f32>>,
    pub var: Option<Vec<f32>>,
}

impl BnBatchStats {
    pub fn is_initialized(&self) -> bool {
        self.mean.is_some() && self.var.is_some()
    }

    /// Exact statistics of one batch: mean and biased variance per channel,
    /// the values train mode normalizes with.
    pub fn from_batch(x: &Tensor) -> Self {
        let (mean, biased, _) = batch_moments(x);
        BnBatchStats {
            mean: Some(mean),
            var: Some(biased),
        }
    }

    /// Momentum update; an uninitialized layer blends from mean 0, variance 1.
    fn update(&mut self, batch_mean: &[f32], batch_var_unbiased: &[f32]) {
        let c = batch_mean.len();
        let mean = self.mean.get_or_insert_with(|| vec![0.0; c]);
        for (m, b) in mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = self.var.get_or_insert_with(|| vec![1.0; c]);
        for (v, b) in var.iter_mut().zip(batch_var_unbiased) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Per-channel mean, biased and unbiased variance over (N, H, W), summed in f64.
fn batch_moments(t: &Tensor) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = t.dims();
    let hw = h * w;
    let m = n * hw;
    let x = t.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for (ch, mu) in mean.iter_mut().enumerate() {
            *mu += x[(i * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m.max(1) as f64);
    for i in 0..n {
        for (ch, s) in var.iter_mut().enumerate() {
            let mu = mean[ch];
            *s += x[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
    }
    let biased = var.iter().map(|s| (s / m.max(1) as f64) as f32).collect();
    let unbiased = var.iter().map(|s| (s / (m.max(2) - 1) as f64) as f32).collect();
    (mean.iter().map(|&v| v as f32).collect(), biased, unbiased)
}

/// Operation record with whatever the backward pass needs.
pub(crate) enum Op {
    Leaf,
    Constant,
    Neg,
    Add,
    Sub,
    Scale(f32),
    WeightedSum(Vec<f32>),
    Relu,
    Mask(Vec<bool>),
    Conv2d { stride: usize, padding: usize },
    ConvTranspose2d { stride: usize },
    MaxPool2d { argmax: Vec<u32> },
    ChannelReduce { kind: ReduceKind, arg: Vec<u16> },
    Concat,
    Narrow { start: usize },
    Upsample2x,
    Rfft2 { width: usize },
    Irfft2,
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Mse,
    SumSquares,
    Gram,
    Mean,
    Sum,
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Neg => OpKind::Neg,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Scale(_) => OpKind::Scale,
            Op::WeightedSum(_) => OpKind::WeightedSum,
            Op::Relu => OpKind::Relu,
            Op::Mask(_) => OpKind::Mask,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::ChannelReduce { kind: ReduceKind::Min, .. } => OpKind::ChannelMin,
            Op::ChannelReduce { kind: ReduceKind::Max, .. } => OpKind::ChannelMax,
            Op::Concat => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Upsample2x => OpKind::Upsample2x,
            Op::Rfft2 { .. } => OpKind::Rfft2,
            Op::Irfft2 => OpKind::Irfft2,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Mse => OpKind::Mse,
            Op::SumSquares => OpKind::SumSquares,
            Op::Gram => OpKind::Gram,
            Op::Mean => OpKind::Mean,
            Op::Sum => OpKind::Sum,
        }
    }

    /// Gradients for each parent given the gradient of this node's output.
    /// Entries for parents that do not require gradients may be `None`.
    pub(crate) fn backward(&self, node: &Node, grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let parents = &node.parents;
        let wants = |i: usize| parents[i].requires_grad();
        let out_dims = node.value.dims();
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Neg => vec![Some(grad.iter().map(|g| -g).collect())],
            Op::Add => vec![Some(grad.to_vec()), Some(grad.to_vec())],
            Op::Sub => vec![Some(grad.to_vec()), Some(grad.iter().map(|g| -g).collect())],
            Op::Scale(s) => vec![Some(grad.iter().map(|g| g * s).collect())],
            Op::WeightedSum(ws) => ws.iter().map(|w| Some(grad.iter().map(|g| g * w).collect())).collect(),
            Op::Mask(keep) => vec![Some(
                grad.iter()
                    .zip(keep)
                    .map(|(g, &k)| if k { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Relu => {
                let x = parents[0].value().data();
                vec![Some(
                    grad.iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Conv2d { stride, padding } => {
                conv_backward(parents, grad, *stride, *padding, out_dims, &wants)
            }
            Op::ConvTranspose2d { stride } => tconv_backward(parents, grad, *stride, out_dims, &wants),
            Op::MaxPool2d { argmax } => {
                let in_dims = parents[0].dims();
                let in_plane = in_dims[2] * in_dims[3];
                let out_plane = out_dims[2] * out_dims[3];
                let mut dx = vec![0.0; numel(in_dims)];
                for (p, (g_plane, idx)) in grad.chunks(out_plane).zip(argmax.chunks(out_plane)).enumerate() {
                    let dst = &mut dx[p * in_plane..(p + 1) * in_plane];
                    for (g, &i) in g_plane.iter().zip(idx) {
                        dst[i as usize] += g;
                    }
                }
                vec![Some(dx)]
            }
            Op::ChannelReduce { arg, .. } => {
                let [n, c, h, w] = parents[0].dims();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n {
                    for p in 0..hw {
                        let ch = arg[i * hw + p] as usize;
                        dx[(i * c + ch) * hw + p] = grad[i * hw + p];
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat => {
                let [n, c_total, h, w] = out_dims;
                let hw = h * w;
                let mut offset = 0;
                parents
                    .iter()
                    .map(|p| {
                        let c = p.dims()[1];
                        let mut d = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let start = (i * c_total + offset) * hw;
                            d.extend_from_slice(&grad[start..start + c * hw]);
                        }
                        offset += c;
                        Some(d)
                    })
                    .collect()
            }
            Op::Narrow { start } => {
                let [n, c, h, w] = parents[0].dims();
                let len = out_dims[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&grad[i * len * hw..(i + 1) * len * hw]);
                }
                vec![Some(dx)]
            }
            Op::Upsample2x => {
                let [n, c, h, w] = parents[0].dims();
                let ow = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &grad[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..ow {
                            dst[(y / 2) * w + x / 2] += src[y * ow + x];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Rfft2 { width } => {
                let [n, c2, h, wh] = out_dims;
                let c = c2 / 2;
                let width = *width;
                let mut dx = vec![0.0; n * c * h * width];
                par::for_each_chunk_mut(&mut dx, h * width, |p, out| {
                    let (i, ch) = (p / c, p % c);
                    let re = &grad[((i * c2) + ch) * h * wh..][..h * wh];
                    let im = &grad[((i * c2) + c + ch) * h * wh..][..h * wh];
                    fft::half_inverse_plane(re, im, h, width, |_| 1.0, 1.0, out);
                });
                vec![Some(dx)]
            }
            Op::Irfft2 => {
                let [n, c, h, w] = out_dims;
                let wh = fft::half_width(w);
                let scale = 1.0 / (h * w) as f32;
                let weight = fft::hermitian_weight(w);
                let mut dx = vec![0.0; n * 2 * c * h * wh];
                for i in 0..n {
                    for ch in 0..c {
                        let mut re = vec![0.0; h * wh];
                        let mut im = vec![0.0; h * wh];
                        let g = &grad[(i * c + ch) * h * w..][..h * w];
                        fft::rfft2_plane(g, h, w, &mut re, &mut im);
                        let re_dst = (i * 2 * c + ch) * h * wh;
                        let im_dst = (i * 2 * c + c + ch) * h * wh;
                        for k in 0..h {
                            for l in 0..wh {
                                let s = weight(l) * scale;
                                dx[re_dst + k * wh + l] = re[k * wh + l] * s;
                                dx[im_dst + k * wh + l] = im[k * wh + l] * s;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::BatchNorm { xhat, inv_std, train } => {
                let [n, c, h, w] = out_dims;
                let hw = h * w;
                let m = (n * hw) as f32;
                let gamma = parents[1].value().data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            dgamma[ch] += grad[base + p] * xhat[base + p];
                            dbeta[ch] += grad[base + p];
                        }
                    }
                }
                let dx = wants(0).then(|| {
                    let mut dx = vec![0.0; n * c * hw];
                    for ch in 0..c {
                        let gs = gamma[ch] * inv_std[ch];
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                dx[base + p] = if *train {
                                    gs * (grad[base + p] - dbeta[ch] / m - xhat[base + p] * dgamma[ch] / m)
                                } else {
                                    gs * grad[base + p]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }
            Op::Mse => {
                let a = parents[0].value().data();
                let b = parents[1].value().data();
                let s = 2.0 * grad[0] / a.len() as f32;
                let da: Vec<f32> = a.iter().zip(b).map(|(x, y)| s * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![Some(da), Some(db)]
            }
            Op::SumSquares => {
                let a = parents[0].value().data();
                vec![Some(a.iter().map(|x| 2.0 * x * grad[0]).collect())]
            }
            Op::Gram => {
                let [n, c, h, w] = parents[0].dims();
                let hw = h * w;
                let norm = 1.0 / (c * hw) as f32;
                let f = parents[0].value().data();
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n {
                    let g = &grad[i * c * c..(i + 1) * c * c];
                    let mut sym = vec![0.0; c * c];
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = (g[r * c + q] + g[q * c + r]) * norm;
                        }
                    }
                    super::kernels::gemm(
                        c,
                        c,
                        hw,
                        &sym,
                        false,
                        &f[i * c * hw..(i + 1) * c * hw],
                        false,
                        0.0,
                        &mut dx[i * c * hw..(i + 1) * c * hw],
                    );
                }
                vec![Some(dx)]
            }
            Op::Mean => {
                let len = parents[0].value().numel();
                vec![Some(vec![grad[0] / len as f32; len])]
            }
            Op::Sum => vec![Some(vec![grad[0]; parents[0].value().numel()])],
        }
    }
}

fn conv_backward(
    parents: &[Var],
    grad: &[f32],
    stride: usize,
    padding: usize,
    out_dims: Dims,
    wants: &dyn Fn(usize) -> bool,
) -> Vec<Option<Vec<f32>>> {
    let x = parents[0].value();
    let w = parents[1].value();
    let [n, c, h, wd] = x.dims();
    let [co, _, k, _] = w.dims();
    let [_, _, oh, ow] = out_dims;
    let g = Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad: padding,
        out_h: oh,
        out_w: ow,
    };
    let in_len = c * h * wd;
    let out_len = co * oh * ow;
    let dx = wants(0).then(|| {
        let mut dx = vec![0.0; n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |i, d| {
            conv::conv_backward_input(&g, &grad[i * out_len..(i + 1) * out_len], w.data(), co, d);
        });
        dx
    });
    let dw = wants(1).then(|| {
        let partials = par::map_collect(n, |i| {
            let mut dw = vec![0.0; w.numel()];
            conv::conv_backward_weight(
                &g,
                &x.data()[i * in_len..(i + 1) * in_len],
                &grad[i * out_len..(i + 1) * out_len],
                co,
                &mut dw,
            );
            dw
        });
        sum_in_order(partials, w.numel())
    });
    let mut out = vec![dx, dw];
    if parents.len() > 2 {
        out.push(Some(bias_grad(grad, n, co, oh * ow)));
    }
    out
}

fn tconv_backward(
    parents: &[Var],
    grad: &[f32],
    stride: usize,
    out_dims: Dims,
    wants: &dyn Fn(usize) -> bool,
) -> Vec<Option<Vec<f32>>> {
    let x = parents[0].value();
    let w = parents[1].value();
    let [n, ci, h, wd] = x.dims();
    let [_, co, k, _] = w.dims();
    let [_, _, oh, ow] = out_dims;
    let g = Geometry {
        channels: co,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad: 0,
        out_h: h,
        out_w: wd,
    };
    let in_len = ci * h * wd;
    let out_len = co * oh * ow;
    let dx = wants(0).then(|| {
        let mut dx = vec![0.0; n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |i, d| {
            conv::tconv_backward_input(&g, &grad[i * out_len..(i + 1) * out_len], w.data(), ci, d);
        });
        dx
    });
    let dw = wants(1).then(|| {
        let partials = par::map_collect(n, |i| {
            let mut dw = vec![0.0; w.numel()];
            conv::tconv_backward_weight(
                &g,
                &x.data()[i * in_len..(i + 1) * in_len],
                &grad[i * out_len..(i + 1) * out_len],
                ci,
                &mut dw,
            );
            dw
        });
        sum_in_order(partials, w.numel())
    });
    let mut out = vec![dx, dw];
    if parents.len() > 2 {
        out.push(Some(bias_grad(grad, n, co, oh * ow)));
    }
    out
}

fn sum_in_order(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0; len];
    for p in parts {
        acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
    }
    acc
}

fn bias_grad(grad: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut db = vec![0.0; c];
    for i in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += grad[(i * c + ch) * hw..][..hw].iter().sum::<f32>();
        }
    }
    db
}

fn check_same_dims(a: &Var, b: &Var) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    match (0..4).find(|&i| da[i] != db[i]) {
        None => Ok(()),
        Some(i) => Err(Error::dim(AXES[i], format!("{:?} vs {:?}", da, db))),
    }
}

fn add_bias(out: &mut [f32], bias: Option<&[f32]>, hw: usize) {
    if let Some(b) = bias {
        for (plane, bv) in out.chunks_mut(hw).zip(b) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn unary(x: &Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
    let data = x.value().data().iter().map(|&v| f(v)).collect();
    Var::from_op(Tensor::from_parts(x.dims(), data), op, vec![x.clone()])
}

impl Var {
    pub fn neg(&self) -> Var {
        unary(self, Op::Neg, |v| -v)
    }

    pub fn scale(&self, s: f32) -> Var {
        unary(self, Op::Scale(s), |v| v * s)
    }

    pub fn relu(&self) -> Var {
        unary(self, Op::Relu, |v| v.max(0.0))
    }

    /// Keeps elements where `keep` is set and zeroes the rest; linear, so a
    /// recorded ReLU on/off pattern can be replayed without its kink.
    pub fn mask(&self, keep: &[bool]) -> Result<Var> {
        self.mask_fill(keep, 0.0)
    }

    /// Keeps elements where `keep` is set and replaces the rest with `fill`.
    /// Gradients flow only to kept elements.
    pub fn mask_fill(&self, keep: &[bool], fill: f32) -> Result<Var> {
        if keep.len() != self.value().numel() {
            return Err(Error::dim(
                "data",
                format!("mask of {} for {} elements", keep.len(), self.value().numel()),
            ));
        }
        let data = self
            .value()
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        Ok(Var::from_op(
            Tensor::from_parts(self.dims(), data),
            Op::Mask(keep.to_vec()),
            vec![self.clone()],
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        check_same_dims(self, other)?;
        let data = self.value().data().iter().zip(other.value().data()).map(|(a, b)| a + b).collect();
        Ok(Var::from_op(
            Tensor::from_parts(self.dims(), data),
            Op::Add,
            vec![self.clone(), other.clone()],
        ))
    }

    /// Σ wᵢ·xᵢ over same-shaped terms, accumulated in f64 and rounded once.
    pub fn weighted_sum(terms: &[(&Var, f32)]) -> Result<Var> {
        let (first, _) = terms
            .first()
            .ok_or_else(|| Error::param("terms", "weighted sum of nothing"))?;
        for (t, _) in &terms[1..] {
            check_same_dims(first, t)?;
        }
        let data = (0..first.value().numel())
            .map(|i| {
                terms
                    .iter()
                    .map(|(t, w)| f64::from(*w) * f64::from(t.value().data()[i]))
                    .sum::<f64>() as f32
            })
            .collect();
        Ok(Var::from_op(
            Tensor::from_parts(first.dims(), data),
            Op::WeightedSum(terms.iter().map(|(_, w)| *w).collect()),
            terms.iter().map(|(t, _)| (*t).clone()).collect(),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        check_same_dims(self, other)?;
        let data = self.value().data().iter().zip(other.value().data()).map(|(a, b)| a - b).collect();
        Ok(Var::from_op(
            Tensor::from_parts(self.dims(), data),
            Op::Sub,
            vec![self.clone(), other.clone()],
        ))
    }

    /// Zero-padded 2-D convolution with a square (Cout, Cin, k, k) kernel.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        let [co, ci, kh, kw] = weight.dims();
        if kh != kw {
            return Err(Error::dim("kernel", format!("non-square kernel {kh}x{kw}")));
        }
        if ci != c {
            return Err(Error::dim("channel", format!("input has {c} channels, weight expects {ci}")));
        }
        if let Some(b) = bias {
            if b.value().numel() != co {
                return Err(Error::dim("bias", format!("{} values for {co} output channels", b.value().numel())));
            }
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        let oh = conv::out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::dim("height", format!("kernel {kh} exceeds padded height {}", h + 2 * padding)))?;
        let ow = conv::out_extent(w, kh, stride, padding)
            .ok_or_else(|| Error::dim("width", format!("kernel {kh} exceeds padded width {}", w + 2 * padding)))?;
        let g = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad: padding,
            out_h: oh,
            out_w: ow,
        };
        let in_len = c * h * w;
        let mut out = vec![0.0; n * co * oh * ow];
        let x = self.value().data();
        let wd = weight.value().data();
        let bd = bias.map(|b| b.value().data());
        par::for_each_chunk_mut(&mut out, co * oh * ow, |i, o| {
            conv::conv_forward(&g, &x[i * in_len..(i + 1) * in_len], wd, co, o);
            add_bias(o, bd, oh * ow);
        });
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Var::from_op(
            Tensor::from_parts([n, co, oh, ow], out),
            Op::Conv2d { stride, padding },
            parents,
        ))
    }

    /// Transposed convolution, weight (Cin, Cout, k, k), no padding.
    /// Output extent is `(in - 1)·stride + k`.
    pub fn conv_transpose2d(&self, weight: &Var, bias: Option<&Var>, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        let [ci, co, kh, kw] = weight.dims();
        if kh != kw {
            return Err(Error::dim("kernel", format!("non-square kernel {kh}x{kw}")));
        }
        if ci != c {
            return Err(Error::dim("channel", format!("input has {c} channels, weight expects {ci}")));
        }
        if let Some(b) = bias {
            if b.value().numel() != co {
                return Err(Error::dim("bias", format!("{} values for {co} output channels", b.value().numel())));
            }
        }
        if stride == 0 || h == 0 || w == 0 {
            return Err(Error::param("stride", "stride and input extents must be at least 1"));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kh);
        let g = Geometry {
            channels: co,
            height: oh,
            width: ow,
            kernel: kh,
            stride,
            pad: 0,
            out_h: h,
            out_w: w,
        };
        let in_len = c * h * w;
        let mut out = vec![0.0; n * co * oh * ow];
        let x = self.value().data();
        let wd = weight.value().data();
        let bd = bias.map(|b| b.value().data());
        par::for_each_chunk_mut(&mut out, co * oh * ow, |i, o| {
            conv::tconv_forward(&g, &x[i * in_len..(i + 1) * in_len], wd, ci, o);
            add_bias(o, bd, oh * ow);
        });
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Var::from_op(
            Tensor::from_parts([n, co, oh, ow], out),
            Op::ConvTranspose2d { stride },
            parents,
        ))
    }

    /// Window max with `pad` replicated edge pixels on every side.
    ///
    /// Backward routes each output gradient to the first maximal input in
    /// row-major window order.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        if kernel == 0 {
            return Err(Error::param("kernel", "must be at least 1"));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be at least 1"));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("height", "empty plane"));
        }
        let oh = conv::out_extent(h, kernel, stride, pad)
            .ok_or_else(|| Error::dim("height", format!("kernel {kernel} exceeds padded height {}", h + 2 * pad)))?;
        let ow = conv::out_extent(w, kernel, stride, pad)
            .ok_or_else(|| Error::dim("width", format!("kernel {kernel} exceeds padded width {}", w + 2 * pad)))?;
        let x = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        let op = if self.requires_grad() {
            let mut argmax = vec![0u32; out.len()];
            let (ol, il) = (oh * ow, h * w);
            par::for_each_chunk_pair_mut(&mut out, ol, &mut argmax, ol, |p, o, a| {
                pool::max_pool_plane(&x[p * il..(p + 1) * il], h, w, kernel, stride, pad, oh, ow, o, a);
            });
            Op::MaxPool2d { argmax }
        } else {
            par::for_each_chunk_mut(&mut out, oh * ow, |p, o| {
                pool::max_pool_plane_fast(&x[p * h * w..(p + 1) * h * w], h, w, kernel, stride, pad, oh, ow, o);
            });
            Op::Constant
        };
        Ok(Var::from_op(Tensor::from_parts([n, c, oh, ow], out), op, vec![self.clone()]))
    }

    fn channel_reduce(&self, kind: ReduceKind) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        if c == 0 {
            return Err(Error::dim("channel", "no channels to reduce"));
        }
        if c > u16::MAX as usize {
            return Err(Error::dim("channel", format!("{c} channels exceed the supported 65535")));
        }
        let hw = h * w;
        let x = self.value().data();
        let mut out = vec![0.0; n * hw];
        let want_max = kind == ReduceKind::Max;
        let op = if self.requires_grad() {
            let mut arg = vec![0u16; n * hw];
            for ((i, o), a) in out.chunks_mut(hw).enumerate().zip(arg.chunks_mut(hw)) {
                pool::channel_reduce(&x[i * c * hw..(i + 1) * c * hw], c, hw, want_max, o, Some(a));
            }
            Op::ChannelReduce { kind, arg }
        } else {
            for (i, o) in out.chunks_mut(hw).enumerate() {
                pool::channel_reduce(&x[i * c * hw..(i + 1) * c * hw], c, hw, want_max, o, None);
            }
            Op::Constant
        };
        Ok(Var::from_op(Tensor::from_parts([n, 1, h, w], out), op, vec![self.clone()]))
    }

    /// Per-pixel minimum over channels; ties resolve to the lowest channel.
    pub fn channel_min(&self) -> Result<Var> {
        self.channel_reduce(ReduceKind::Min)
    }

    /// Per-pixel maximum over channels; ties resolve to the lowest channel.
    pub fn channel_max(&self) -> Result<Var> {
        self.channel_reduce(ReduceKind::Max)
    }

    pub fn concat_channels(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("channel", "nothing to concatenate"))?;
        let [n, _, h, w] = first.dims();
        for p in parts {
            let d = p.dims();
            for (i, axis) in [(0, "batch"), (2, "height"), (3, "width")] {
                if d[i] != first.dims()[i] {
                    return Err(Error::dim(axis, format!("{:?} vs {:?}", d, first.dims())));
                }
            }
        }
        let c_total: usize = parts.iter().map(|p| p.dims()[1]).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for i in 0..n {
            for p in parts {
                let c = p.dims()[1];
                out.extend_from_slice(&p.value().data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts([n, c_total, h, w], out),
            Op::Concat,
            parts.to_vec(),
        ))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        if start + len > c {
            return Err(Error::dim("channel", format!("range {start}..{} of {c} channels", start + len)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let s = (i * c + start) * hw;
            out.extend_from_slice(&self.value().data()[s..s + len * hw]);
        }
        Ok(Var::from_op(
            Tensor::from_parts([n, len, h, w], out),
            Op::Narrow { start },
            vec![self.clone()],
        ))
    }

    /// Splits along channels into consecutive groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if total != self.dims()[1] {
            return Err(Error::dim(
                "channel",
                format!("split sizes sum to {total}, tensor has {}", self.dims()[1]),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.narrow_channels(start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn upsample_nearest2x(&self) -> Var {
        let [n, c, h, w] = self.dims();
        let ow = 2 * w;
        let x = self.value().data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (p, dst) in out.chunks_mut(4 * h * w).enumerate() {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Var::from_op(Tensor::from_parts([n, c, 2 * h, 2 * w], out), Op::Upsample2x, vec![self.clone()])
    }

    /// Unnormalized real 2-D FFT over (h, w). The result has dims
    /// (N, 2C, h, w/2 + 1): real parts in channels `0..C`, imaginary parts
    /// in `C..2C`.
    pub fn rfft2(&self) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::dim("height", "empty plane"));
        }
        let wh = fft::half_width(w);
        let x = self.value().data();
        let mut out = vec![0.0; n * 2 * c * h * wh];
        // One chunk per sample: [re planes | im planes].
        par::for_each_chunk_mut(&mut out, 2 * c * h * wh, |i, o| {
            let (re, im) = o.split_at_mut(c * h * wh);
            for ch in 0..c {
                fft::rfft2_plane(
                    &x[(i * c + ch) * h * w..][..h * w],
                    h,
                    w,
                    &mut re[ch * h * wh..(ch + 1) * h * wh],
                    &mut im[ch * h * wh..(ch + 1) * h * wh],
                );
            }
        });
        Ok(Var::from_op(
            Tensor::from_parts([n, 2 * c, h, wh], out),
            Op::Rfft2 { width: w },
            vec![self.clone()],
        ))
    }

    /// Inverse of [`Var::rfft2`], scaled by `1/(height·width)`.
    pub fn irfft2(&self, height: usize, width: usize) -> Result<Var> {
        let [n, c2, h, wh] = self.dims();
        if c2 % 2 != 0 {
            return Err(Error::dim("channel", format!("{c2} spectrum channels is not a re/im pair count")));
        }
        if h != height || height == 0 {
            return Err(Error::dim("height", format!("spectrum height {h} for declared height {height}")));
        }
        if width == 0 || wh != fft::half_width(width) {
            return Err(Error::dim(
                "width",
                format!("spectrum width {wh} for declared width {width} (expected {})", fft::half_width(width.max(1))),
            ));
        }
        let c = c2 / 2;
        let spec = self.value().data();
        let scale = 1.0 / (height * width) as f32;
        let mut out = vec![0.0; n * c * h * width];
        par::for_each_chunk_mut(&mut out, h * width, |p, o| {
            let (i, ch) = (p / c, p % c);
            let re = &spec[(i * c2 + ch) * h * wh..][..h * wh];
            let im = &spec[(i * c2 + c + ch) * h * wh..][..h * wh];
            fft::half_inverse_plane(re, im, h, width, fft::hermitian_weight(width), scale, o);
        });
        Ok(Var::from_op(Tensor::from_parts([n, c, h, width], out), Op::Irfft2, vec![self.clone()]))
    }

    /// Batch normalization over (N, H, W) per channel, eps 1e-5.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into `stats` with momentum 0.1. Eval
    /// mode reads `stats` and fails if they were never initialized.
    pub fn batch_norm(&self, gamma: &Var, beta: &Var, stats: &mut BnBatchStats, mode: BatchNormMode) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        if gamma.value().numel() != c || beta.value().numel() != c {
            return Err(Error::dim(
                "channel",
                format!(
                    "batch norm over {c} channels with {} scales and {} shifts",
                    gamma.value().numel(),
                    beta.value().numel()
                ),
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let x = self.value().data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if m == 0 {
                    return Err(Error::dim("batch", "empty batch"));
                }
                let (mean, biased, unbiased) = batch_moments(self.value());
                stats.update(&mean, &unbiased);
                (mean, biased, true)
            }
            BatchNormMode::Eval => match (&stats.mean, &stats.var) {
                (Some(mu), Some(v)) if mu.len() == c && v.len() == c => (mu.clone(), v.clone(), false),
                (Some(_), Some(_)) => {
                    return Err(Error::State(format!("running stats do not cover {c} channels")));
                }
                _ => {
                    return Err(Error::State(
                        "batch norm in eval mode before running stats were initialized".into(),
                    ))
                }
            },
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = gamma.value().data();
        let b = beta.value().data();
        let mut xhat = vec![0.0; n * c * hw];
        let mut out = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in base..base + hw {
                    xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                    out[p] = g[ch] * xhat[p] + b[ch];
                }
            }
        }
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Ok(Var::from_op(
            Tensor::from_parts([n, c, h, w], out),
            Op::BatchNorm { xhat, inv_std, train },
            parents,
        ))
    }

    /// Mean squared difference over all elements, as a (1,1,1,1) scalar.
    pub fn mse(&self, other: &Var) -> Result<Var> {
        check_same_dims(self, other)?;
        let a = self.value().data();
        let sum: f64 = a
            .iter()
            .zip(other.value().data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let v = if a.is_empty() { 0.0 } else { (sum / a.len() as f64) as f32 };
        Ok(Var::from_op(Tensor::scalar(v), Op::Mse, vec![self.clone(), other.clone()]))
    }

    /// Sum of squared elements.
    pub fn sum_squares(&self) -> Var {
        let s: f64 = self.value().data().iter().map(|&x| (x as f64).powi(2)).sum();
        Var::from_op(Tensor::scalar(s as f32), Op::SumSquares, vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        let s: f64 = self.value().data().iter().map(|&x| x as f64).sum();
        Var::from_op(Tensor::scalar(s as f32), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let len = self.value().numel().max(1);
        let s: f64 = self.value().data().iter().map(|&x| x as f64).sum();
        Var::from_op(Tensor::scalar((s / len as f64) as f32), Op::Mean, vec![self.clone()])
    }

    /// Per-sample channel Gram matrix normalized by C·H·W, dims (N, 1, C, C).
    pub fn gram(&self) -> Result<Var> {
        let [n, c, h, w] = self.dims();
        let hw = h * w;
        if hw == 0 {
            return Err(Error::dim("height", "gram of an empty feature map"));
        }
        let f = self.value().data();
        let norm = 1.0 / (c * hw) as f32;
        let mut out = vec![0.0; n * c * c];
        for i in 0..n {
            let fi = &f[i * c * hw..(i + 1) * c * hw];
            let gi = &mut out[i * c * c..(i + 1) * c * c];
            super::kernels::gemm(c, hw, c, fi, false, fi, true, 0.0, gi);
            gi.iter_mut().for_each(|v| *v *= norm);
            // Exact symmetry regardless of summation order in the product.
            for r in 0..c {
                for q in r + 1..c {
                    gi[q * c + r] = gi[r * c + q];
                }
            }
        }
        Ok(Var::from_op(Tensor::from_parts([n, 1, c, c], out), Op::Gram, vec![self.clone()]))
    }
}
