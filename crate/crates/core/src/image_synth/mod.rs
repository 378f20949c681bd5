//! Image buffers, haze synthesis with the atmospheric scattering model and
//! the deterministic synthetic corpus used for training.

mod io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{decode_bytes, decode_image, encode_gray_png, encode_image, quantize, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const T_MIN: f32 = 0.05;
pub const T_MAX: f32 = 0.95;

pub const CORPUS_SIZE: usize = 64;
pub const CORPUS_TRAIN: usize = 16;
pub const CORPUS_VAL: usize = 4;
/// Box-blur passes applied to the transmission noise of corpus pairs.
pub const CORPUS_SMOOTHNESS: usize = 6;

/// A 3-channel image with values in [0, 1], stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(
                "data",
                format!("{} values for a {width}x{height} RGB image", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("data", format!("value {v} outside [0, 1]")));
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        ImageBuffer { width, height, data }
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len(), width * height * 3);
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        ImageBuffer { width, height, data }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Builds an image from sample `n` of an (N, 3, H, W) tensor, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [batch, c, h, w] = t.dims();
        if c != 3 {
            return Err(Error::dim("channel", format!("expected 3 channels, got {c}")));
        }
        if n >= batch {
            return Err(Error::dim("batch", format!("sample {n} of {batch}")));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data.push(t.at(n, ch, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImageBuffer { width: w, height: h, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, 3, self.height, self.width], |_, c, y, x| self.data[(y * self.width + x) * 3 + c])
    }

    /// Stacks equally sized images into one (N, 3, H, W) tensor.
    pub fn stack(images: &[ImageBuffer]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::dim("batch", "no images to stack"))?;
        let (w, h) = (first.width, first.height);
        if let Some(bad) = images.iter().find(|im| (im.width, im.height) != (w, h)) {
            return Err(Error::dim(
                "spatial",
                format!("{}x{} image in a {w}x{h} batch", bad.width, bad.height),
            ));
        }
        Ok(Tensor::from_fn([images.len(), 3, h, w], |n, c, y, x| {
            images[n].data[(y * w + x) * 3 + c]
        }))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Copies the window of the given extent whose top-left corner is (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::param(
                "crop",
                format!("{width}x{height} at ({x0}, {y0}) exceeds {}x{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        ImageBuffer { width: self.width, height: self.height, data }
    }

    /// Grows the image to `width` × `height` by repeating the last column
    /// and row.
    pub fn pad_replicate(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return Err(Error::param(
                "pad",
                format!("{width}x{height} is smaller than {}x{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&self.pixel(x.min(self.width - 1), y.min(self.height - 1)));
            }
        }
        Ok(ImageBuffer { width, height, data })
    }
}

/// Per-pixel transmission t(x), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionField {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl TransmissionField {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim("data", format!("{} values for {width}x{height}", values.len())));
        }
        // The closed interval is accepted so that t = 1 (no haze) and t = 0
        // (pure airlight) can be expressed.
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("t", format!("transmission {v} outside [0, 1]")));
        }
        Ok(TransmissionField { width, height, values })
    }

    pub fn constant(width: usize, height: usize, t: f32) -> Result<Self> {
        Self::new(width, height, vec![t; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    airlight: f32,
    t: TransmissionField,
}

impl HazeParams {
    pub fn new(airlight: f32, t: TransmissionField) -> Result<Self> {
        if !(airlight > 0.0 && airlight <= 1.0) {
            return Err(Error::param("airlight", format!("{airlight} outside (0, 1]")));
        }
        Ok(HazeParams { airlight, t })
    }

    pub fn airlight(&self) -> f32 {
        self.airlight
    }

    pub fn transmission(&self) -> &TransmissionField {
        &self.t
    }
}

/// I = J·t + A·(1 − t), clamped to [0, 1].
pub fn synthesize_haze(clear: &ImageBuffer, params: &HazeParams) -> Result<ImageBuffer> {
    let t = &params.t;
    if (t.width, t.height) != (clear.width, clear.height) {
        return Err(Error::dim(
            "spatial",
            format!("transmission {}x{} vs image {}x{}", t.width, t.height, clear.width, clear.height),
        ));
    }
    let a = params.airlight;
    let data = clear
        .data
        .chunks(3)
        .zip(&t.values)
        .flat_map(|(px, &tv)| px.iter().map(move |&j| (j * tv + a * (1.0 - tv)).clamp(0.0, 1.0)))
        .collect();
    Ok(ImageBuffer { width: clear.width, height: clear.height, data })
}

/// Seeded uniform noise, box-blurred `smoothness` times with a 3×3
/// replicate-edged kernel, then stretched onto [T_MIN, T_MAX]. With
/// smoothness 0 the values stay i.i.d. uniform on that interval.
pub fn generate_t_field(width: usize, height: usize, seed: u64, smoothness: usize) -> TransmissionField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f32> = (0..width * height).map(|_| rng.random::<f32>()).collect();
    if smoothness > 0 {
        for _ in 0..smoothness {
            values = box_blur3(&values, width, height);
        }
        let (lo, hi) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in &mut values {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        }
    }
    for v in &mut values {
        *v = (T_MIN + (T_MAX - T_MIN) * *v).clamp(T_MIN, T_MAX);
    }
    TransmissionField { width, height, values }
}

fn box_blur3(src: &[f32], width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in [-1isize, 0, 1] {
                let yy = (y as isize + dy).clamp(0, height as isize - 1) as usize;
                for dx in [-1isize, 0, 1] {
                    let xx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
                    acc += src[yy * width + xx];
                }
            }
            out[y * width + x] = acc / 9.0;
        }
    }
    out
}

/// A procedural haze-free scene: smoothly varying, strongly saturated hues
/// with stripes and a few solid blocks. High saturation keeps at least one
/// channel low everywhere, so the dark channel of the scene is small.
pub fn generate_clear_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0: f32 = rng.random();
    let (fx, fy): (f32, f32) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let stripe_freq: f32 = rng.random_range(2.0..8.0);
    let stripe_angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let blocks: Vec<(usize, usize, usize, usize, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            let bw = rng.random_range(width / 8..=width / 3).max(1);
            let bh = rng.random_range(height / 8..=height / 3).max(1);
            let x0 = rng.random_range(0..width.saturating_sub(bw).max(1));
            let y0 = rng.random_range(0..height.saturating_sub(bh).max(1));
            (x0, y0, bw, bh, rng.random())
        })
        .collect();
    let (sx, sy) = (stripe_angle.cos(), stripe_angle.sin());
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = x as f32 / width.max(1) as f32;
            let v = y as f32 / height.max(1) as f32;
            let mut hue = hue0 + 0.35 * (fx * u).sin() + 0.35 * (fy * v).cos();
            let stripe = 0.5 + 0.5 * (std::f32::consts::TAU * stripe_freq * (sx * u + sy * v)).sin();
            let mut value = 0.45 + 0.5 * stripe;
            let mut sat = 0.9;
            for &(x0, y0, bw, bh, bh_hue) in &blocks {
                if (x0..x0 + bw).contains(&x) && (y0..y0 + bh).contains(&y) {
                    hue = bh_hue;
                    value = 0.85;
                    sat = 1.0;
                }
            }
            data.extend(hsv_to_rgb(hue.rem_euclid(1.0), sat, value));
        }
    }
    ImageBuffer { width, height, data }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub name: String,
    pub hazy: ImageBuffer,
    pub clear: ImageBuffer,
    pub airlight: f32,
}

/// One corpus pair drawn entirely from `seed`.
pub fn synthesize_pair(seed: u64, size: usize) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_seed: u64 = rng.random();
    let t_seed: u64 = rng.random();
    let airlight = rng.random_range(0.8f32..=1.0);
    let clear = generate_clear_scene(size, size, scene_seed);
    let t = generate_t_field(size, size, t_seed, CORPUS_SMOOTHNESS);
    let params = HazeParams::new(airlight, t).expect("airlight drawn from (0, 1]");
    let hazy = synthesize_haze(&clear, &params).expect("field matches scene");
    SyntheticPair {
        name: format!("pair_{seed:03}"),
        hazy,
        clear,
        airlight,
    }
}

/// The canonical corpus: seeds `base..base + 20`, the first sixteen for
/// training and the last four for validation, all 64×64.
pub fn generate_corpus(base_seed: u64) -> (Vec<SyntheticPair>, Vec<SyntheticPair>) {
    let mut pairs: Vec<SyntheticPair> = (0..(CORPUS_TRAIN + CORPUS_VAL) as u64)
        .map(|i| synthesize_pair(base_seed + i, CORPUS_SIZE))
        .collect();
    let val = pairs.split_off(CORPUS_TRAIN);
    (pairs, val)
}

/// Writes the corpus as PPM files under `out/{train,val}/{hazy,clear}`.
pub fn write_corpus(out: impl AsRef<Path>, base_seed: u64) -> Result<Vec<PathBuf>> {
    let out = out.as_ref();
    let (train, val) = generate_corpus(base_seed);
    let mut written = Vec::new();
    for (split, pairs) in [("train", &train), ("val", &val)] {
        for kind in ["hazy", "clear"] {
            let dir = out.join(split).join(kind);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for pair in pairs.iter() {
            for (kind, image) in [("hazy", &pair.hazy), ("clear", &pair.clear)] {
                let path = out.join(split).join(kind).join(format!("{}.ppm", pair.name));
                encode_image(image, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Resolves a dataset directory: either one holding `hazy/` and `clear/`,
/// or a corpus root whose `train/` subdirectory does.
pub fn resolve_pair_dir(dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for candidate in [dir.to_path_buf(), dir.join("train")] {
        if candidate.join("hazy").is_dir() && candidate.join("clear").is_dir() {
            return Ok(candidate);
        }
    }
    Err(Error::Config(format!(
        "{} has no hazy/ and clear/ subdirectories (directly or under train/)",
        dir.display()
    )))
}

/// Loads hazy/clear pairs matched by file stem, sorted by name.
pub fn load_pairs(dir: impl AsRef<Path>) -> Result<Vec<(String, ImageBuffer, ImageBuffer)>> {
    let root = resolve_pair_dir(dir)?;
    let hazy = list_images(&root.join("hazy"))?;
    let clear = list_images(&root.join("clear"))?;
    let unpaired: Vec<&String> = hazy
        .keys()
        .filter(|k| !clear.contains_key(*k))
        .chain(clear.keys().filter(|k| !hazy.contains_key(*k)))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Config(format!("unpaired files in {}: {unpaired:?}", root.display())));
    }
    if hazy.is_empty() {
        return Err(Error::Config(format!("no images in {}", root.display())));
    }
    hazy.into_iter()
        .map(|(stem, path)| {
            let h = decode_image(&path)?;
            let c = decode_image(&clear[&stem])?;
            if (h.width, h.height) != (c.width, c.height) {
                return Err(Error::Config(format!("{stem}: hazy and clear sizes differ")));
            }
            Ok((stem, h, c))
        })
        .collect()
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if out.insert(stem.to_string(), path.clone()).is_some() {
                    return Err(Error::Config(format!("duplicate stem {stem} in {}", dir.display())));
                }
            }
        }
    }
    Ok(out)
}
