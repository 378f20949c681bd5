//! Haze density from the dark channel, computed either directly or through
//! max reductions that can sit on the gradient tape.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_PATCH: usize = 15;

/// Edge length of the square window the dark channel minimizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec(usize);

impl PatchSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::param("patch_size", format!("{size} is not a positive odd number")));
        }
        Ok(PatchSpec(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec(DEFAULT_PATCH)
    }
}

/// A (N, 1, H, W) map of 1 − t values.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Tensor);

impl DensityMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Row-major values of sample `n`.
    pub fn plane(&self, n: usize) -> &[f32] {
        self.0.plane(n, 0)
    }
}

fn check_rgb(dims: [usize; 4]) -> Result<()> {
    if dims[1] != 3 {
        return Err(Error::dim("channel", format!("expected 3 channels, got {}", dims[1])));
    }
    if dims[2] == 0 || dims[3] == 0 {
        return Err(Error::dim("height", "empty image"));
    }
    Ok(())
}

/// Minimum over channels, then over the replicate-padded window, computed
/// without the tape (separable row and column passes).
pub fn dark_channel(image: &Tensor, patch: PatchSpec) -> Result<Tensor> {
    check_rgb(image.dims())?;
    let [n, _, h, w] = image.dims();
    let r = patch.radius() as isize;
    let hw = h * w;
    let mut out = vec![0.0f32; n * hw];
    let mut cmin = vec![0.0f32; hw];
    let mut rows = vec![0.0f32; hw];
    for (s, dst) in out.chunks_mut(hw).enumerate() {
        let planes: Vec<&[f32]> = (0..3).map(|c| image.plane(s, c)).collect();
        for (i, m) in cmin.iter_mut().enumerate() {
            *m = planes[0][i].min(planes[1][i]).min(planes[2][i]);
        }
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::INFINITY;
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    m = m.min(cmin[y * w + xx]);
                }
                rows[y * w + x] = m;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::INFINITY;
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    m = m.min(rows[yy * w + x]);
                }
                dst[y * w + x] = m;
            }
        }
    }
    Tensor::new([n, 1, h, w], out)
}

/// Differentiable density pooling: −channel_max(max_pool(−I)).
///
/// Only max reductions appear on the tape, so the gradient of each output
/// pixel lands on exactly one input element. Values equal
/// [`dark_channel`] bit for bit.
pub fn ddp(image: &Var, patch: PatchSpec) -> Result<Var> {
    check_rgb(image.dims())?;
    let pooled = image.neg().max_pool2d(patch.size(), 1, patch.radius())?;
    Ok(pooled.channel_max()?.neg())
}

/// Density map of an image batch, off the tape.
pub fn density_map(image: &Tensor, patch: PatchSpec) -> Result<DensityMap> {
    dark_channel(image, patch).map(DensityMap)
}

/// Appends the mask as a fourth channel: [R, G, B, CDM].
pub fn concat_cdm(image: &Var, mask: &Var) -> Result<Var> {
    check_rgb(image.dims())?;
    let (id, md) = (image.dims(), mask.dims());
    if md[1] != 1 {
        return Err(Error::dim("channel", format!("mask has {} channels, expected 1", md[1])));
    }
    if id[0] != md[0] || id[2] != md[2] || id[3] != md[3] {
        return Err(Error::dim("spatial", format!("image {id:?} vs mask {md:?}")));
    }
    Var::concat_channels(&[image.clone(), mask.clone()])
}

/// Network input for an image batch: the image with its density map appended,
/// or with a zero fourth channel when `use_cdm` is off.
pub fn network_input(image: &Tensor, patch: PatchSpec, use_cdm: bool) -> Result<Tensor> {
    let [n, _, h, w] = image.dims();
    let mask = if use_cdm {
        dark_channel(image, patch)?
    } else {
        check_rgb(image.dims())?;
        Tensor::zeros([n, 1, h, w])
    };
    Ok(concat_cdm(&Var::constant(image.clone()), &Var::constant(mask))?.to_tensor())
}
