//! 2-D real FFT over one (h, w) plane, half-spectrum layout (h, w/2 + 1).

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f32>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f32>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

pub(crate) fn half_width(width: usize) -> usize {
    width / 2 + 1
}

/// Unnormalized forward transform: `X[k, l] = Σ x[y, x] e^{-2πi(ky/h + lx/w)}`
/// for `l < w/2 + 1`.
pub(crate) fn rfft2_plane(x: &[f32], height: usize, width: usize, re: &mut [f32], im: &mut [f32]) {
    let wh = half_width(width);
    let row_fft = plan(width, FftDirection::Forward);
    let col_fft = plan(height, FftDirection::Forward);
    let mut half = vec![Complex32::default(); height * wh];
    let mut buf = vec![Complex32::default(); width];
    for y in 0..height {
        for (b, v) in buf.iter_mut().zip(&x[y * width..(y + 1) * width]) {
            *b = Complex32::new(*v, 0.0);
        }
        row_fft.process(&mut buf);
        half[y * wh..(y + 1) * wh].copy_from_slice(&buf[..wh]);
    }
    let mut col = vec![Complex32::default(); height];
    for l in 0..wh {
        for (k, c) in col.iter_mut().enumerate() {
            *c = half[k * wh + l];
        }
        col_fft.process(&mut col);
        for (k, c) in col.iter().enumerate() {
            re[k * wh + l] = c.re;
            im[k * wh + l] = c.im;
        }
    }
}

/// `out[y, x] = scale · Re Σ_{k, l < w/2+1} weight(l) · X[k, l] e^{+2πi(ky/h + lx/w)}`.
///
/// With `weight(l)` = 1 for the self-conjugate columns (DC and, for even
/// widths, Nyquist) and 2 otherwise, and `scale = 1/(h·w)`, this is the
/// inverse real transform. With unit weights and scale it is the adjoint of
/// [`rfft2_plane`].
pub(crate) fn half_inverse_plane(
    re: &[f32],
    im: &[f32],
    height: usize,
    width: usize,
    weight: impl Fn(usize) -> f32,
    scale: f32,
    out: &mut [f32],
) {
    let wh = half_width(width);
    let row_fft = plan(width, FftDirection::Inverse);
    let col_fft = plan(height, FftDirection::Inverse);
    let mut half = vec![Complex32::default(); height * wh];
    let mut col = vec![Complex32::default(); height];
    for l in 0..wh {
        let s = weight(l);
        for (k, c) in col.iter_mut().enumerate() {
            *c = Complex32::new(re[k * wh + l] * s, im[k * wh + l] * s);
        }
        col_fft.process(&mut col);
        for (y, c) in col.iter().enumerate() {
            half[y * wh + l] = *c;
        }
    }
    let mut buf = vec![Complex32::default(); width];
    for y in 0..height {
        buf[..wh].copy_from_slice(&half[y * wh..(y + 1) * wh]);
        buf[wh..].fill(Complex32::default());
        row_fft.process(&mut buf);
        for (o, b) in out[y * width..(y + 1) * width].iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

/// Column multiplicity of the half spectrum under Hermitian symmetry.
pub(crate) fn hermitian_weight(width: usize) -> impl Fn(usize) -> f32 {
    move |l| {
        if l == 0 || (width % 2 == 0 && l == width / 2) {
            1.0
        } else {
            2.0
        }
    }
}
