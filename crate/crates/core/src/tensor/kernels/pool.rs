//! Window and channel reductions with edge-replicating borders.

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Window max of one plane. Out-of-range taps read the nearest edge pixel.
/// `argmax`, when given, receives the plane index of the first maximum in
/// row-major scan order of each window.
#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pool_plane(
    src: &[f32],
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut best = f32::NEG_INFINITY;
            let mut best_idx = usize::MAX;
            for ky in 0..kernel {
                let iy = clamp_index((oy * stride + ky) as isize - pad as isize, height);
                let row = &src[iy * width..(iy + 1) * width];
                for kx in 0..kernel {
                    let ix = clamp_index((ox * stride + kx) as isize - pad as isize, width);
                    let v = row[ix];
                    // NaN never wins, matching the comparison-based oracle.
                    if v > best || best_idx == usize::MAX {
                        best = v;
                        best_idx = iy * width + ix;
                    }
                }
            }
            out[oy * out_w + ox] = best;
            argmax[oy * out_w + ox] = best_idx as u32;
        }
    }
}

/// Separable window max without index tracking; same values as
/// [`max_pool_plane`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pool_plane_fast(
    src: &[f32],
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [f32],
) {
    let mut rows = vec![0.0f32; height * out_w];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for ox in 0..out_w {
            let start = (ox * stride) as isize - pad as isize;
            let mut m = f32::NEG_INFINITY;
            for kx in 0..kernel as isize {
                m = m.max(line[clamp_index(start + kx, width)]);
            }
            rows[y * out_w + ox] = m;
        }
    }
    for oy in 0..out_h {
        let start = (oy * stride) as isize - pad as isize;
        let dst = &mut out[oy * out_w..(oy + 1) * out_w];
        dst.fill(f32::NEG_INFINITY);
        for ky in 0..kernel as isize {
            let y = clamp_index(start + ky, height);
            for (d, s) in dst.iter_mut().zip(&rows[y * out_w..(y + 1) * out_w]) {
                *d = d.max(*s);
            }
        }
    }
}

/// Per-pixel reduction over the channels of one sample laid out (C, HW).
/// `arg` receives the first channel attaining the extremum.
pub(crate) fn channel_reduce(
    src: &[f32],
    channels: usize,
    hw: usize,
    want_max: bool,
    out: &mut [f32],
    arg: Option<&mut [u16]>,
) {
    out.copy_from_slice(&src[..hw]);
    let mut arg = arg;
    if let Some(a) = arg.as_deref_mut() {
        a.fill(0);
    }
    for c in 1..channels {
        let plane = &src[c * hw..(c + 1) * hw];
        for p in 0..hw {
            let v = plane[p];
            let better = if want_max { v > out[p] } else { v < out[p] };
            if better {
                out[p] = v;
                if let Some(a) = arg.as_deref_mut() {
                    a[p] = c as u16;
                }
            }
        }
    }
}
