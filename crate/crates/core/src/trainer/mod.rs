//! Adam training of the dehazing network on paired hazy/clear images.

mod adam;
mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use config::{TrainConfig, CONFIG_KEYS};

use crate::density::network_input;
use crate::error::{Error, Result};
use crate::image_synth::{load_pairs, ImageBuffer};
use crate::losses::{loss_final, FeatureExtractor, FinalLoss};
use crate::network::{falcon_forward, Mode, Model, ModelWeights, Params};
use crate::tensor::{Tensor, Var};

/// Batches prepared ahead of the training step.
pub const QUEUE_CAPACITY: usize = 2;

/// Shuffle streams live in the upper half of the stream space so they never
/// collide with per-sample augmentation streams.
const SHUFFLE_STREAM: u64 = 1 << 63;

/// One augmentation: an optional horizontal flip, then a square crop at
/// (x0, y0) of the flipped image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub x0: usize,
    pub y0: usize,
    pub crop: usize,
}

impl AugmentDraw {
    /// The draw for a `width` × `height` image; depends only on `seed`.
    pub fn sample(width: usize, height: usize, crop: usize, flip_prob: f32, seed: u64) -> Result<Self> {
        if crop == 0 || crop > width.min(height) {
            return Err(Error::param("crop_size", format!("{crop} does not fit a {width}x{height} image")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random::<f32>() < flip_prob;
        let x0 = rng.random_range(0..=width - crop);
        let y0 = rng.random_range(0..=height - crop);
        Ok(AugmentDraw { flip, x0, y0, crop })
    }

    pub fn apply(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        let flipped;
        let src = if self.flip {
            flipped = image.flip_horizontal();
            &flipped
        } else {
            image
        };
        src.crop(self.x0, self.y0, self.crop, self.crop)
    }
}

/// Applies one random flip and crop identically to both images.
pub fn augment(
    hazy: &ImageBuffer,
    clear: &ImageBuffer,
    crop: usize,
    flip_prob: f32,
    seed: u64,
) -> Result<(ImageBuffer, ImageBuffer)> {
    if (hazy.width(), hazy.height()) != (clear.width(), clear.height()) {
        return Err(Error::dim(
            "spatial",
            format!(
                "pair is {}x{} hazy vs {}x{} clear",
                hazy.width(),
                hazy.height(),
                clear.width(),
                clear.height()
            ),
        ));
    }
    let draw = AugmentDraw::sample(hazy.width(), hazy.height(), crop, flip_prob, seed)?;
    Ok((draw.apply(hazy)?, draw.apply(clear)?))
}

/// An independent 64-bit seed for one stream of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Augmentation seed of sample `slot` in step `step`.
pub fn augment_seed(seed: u64, batch_size: usize, step: usize, slot: usize) -> u64 {
    stream_seed(seed, (step * batch_size + slot) as u64)
}

/// Pair indices of one step. Every epoch is a fresh seeded permutation and
/// batches run through epochs back to back, so no pair repeats before all
/// others have been seen.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    pairs: usize,
    epoch: usize,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, pairs: usize) -> Self {
        let mut s = Sampler { seed, pairs, epoch: 0, order: Vec::new() };
        s.shuffle(0);
        s
    }

    fn shuffle(&mut self, epoch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SHUFFLE_STREAM | epoch as u64);
        self.order = (0..self.pairs).collect();
        self.order.shuffle(&mut rng);
        self.epoch = epoch;
    }

    /// The pair drawn at position `k` of the sample stream.
    pub fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.pairs;
        if epoch != self.epoch {
            self.shuffle(epoch);
        }
        self.order[k % self.pairs]
    }

    pub fn batch(&mut self, step: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|s| self.index(step * batch_size + s)).collect()
    }
}

/// Hazy and clear (N, 3, H, W) tensors of one step.
pub struct Batch {
    pub hazy: Tensor,
    pub clear: Tensor,
}

pub fn make_batch(pairs: &[(String, ImageBuffer, ImageBuffer)], config: &TrainConfig, sampler: &mut Sampler, step: usize) -> Result<Batch> {
    let mut hazy = Vec::with_capacity(config.batch_size);
    let mut clear = Vec::with_capacity(config.batch_size);
    for (slot, idx) in sampler.batch(step, config.batch_size).into_iter().enumerate() {
        let (_, i, j) = &pairs[idx];
        let seed = augment_seed(config.seed, config.batch_size, step, slot);
        let (i, j) = augment(i, j, config.crop_size, config.flip_prob, seed)?;
        hazy.push(i);
        clear.push(j);
    }
    Ok(Batch {
        hazy: ImageBuffer::stack(&hazy)?,
        clear: ImageBuffer::stack(&clear)?,
    })
}

/// Forward pass in train mode and the loss graph of one batch. Running
/// statistics in `weights` are updated; the returned parameters are the
/// graph leaves that collect gradients.
pub fn training_loss(
    weights: &mut ModelWeights,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    batch: &Batch,
) -> Result<(FinalLoss, Params)> {
    let x4 = network_input(&batch.hazy, config.patch, true)?;
    let params = weights.bind(true);
    let j_hat = falcon_forward(&Var::constant(x4), &config.arch, &params, Mode::Train(weights.stats_mut()))?;
    let loss = loss_final(&j_hat, &Var::constant(batch.clear.clone()), &config.loss_weights, extractor, config.patch)?;
    Ok((loss, params))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub img: f32,
    pub per: Option<f32>,
    pub map: Option<f32>,
    pub total: f32,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub weights_path: PathBuf,
    pub elapsed: Duration,
}

impl TrainReport {
    /// Mean of `f` over `len` records starting at `start`.
    pub fn window_mean(&self, start: usize, len: usize, f: impl Fn(&StepRecord) -> f32) -> Option<f64> {
        let w = self.records.get(start..start + len)?;
        if w.is_empty() {
            return None;
        }
        Some(w.iter().map(|r| f64::from(f(r))).sum::<f64>() / w.len() as f64)
    }

    /// Per-step loss components as CSV; disabled terms are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,img,per,map,total\n");
        let opt = |v: Option<f32>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.img, opt(r.per), opt(r.map), r.total);
        }
        s
    }
}

fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("falw");
    out.with_file_name(format!("{stem}.step{step:06}.{ext}"))
}

/// Trains a fresh network on the pairs in `dataset_dir` with the default
/// extractor and writes the final weights to `out`.
pub fn train(config: &TrainConfig, dataset_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<TrainReport> {
    let pairs = load_pairs(dataset_dir)?;
    let extractor = FeatureExtractor::seeded()?;
    let model = Model::init(config.arch, config.seed)?;
    train_model(config, model, &pairs, &extractor, out.as_ref(), &mut |_| {})
}

/// The training loop. Batches are prepared on a producer thread feeding a
/// bounded queue; everything else runs on the caller's thread. `on_step`
/// sees each record as it is produced.
pub fn train_model(
    config: &TrainConfig,
    model: Model,
    pairs: &[(String, ImageBuffer, ImageBuffer)],
    extractor: &FeatureExtractor,
    out: &Path,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if *model.arch() != config.arch {
        return Err(Error::Config("model architecture differs from the configured one".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    for (name, i, _) in pairs {
        if config.crop_size > i.width().min(i.height()) {
            return Err(Error::Config(format!(
                "crop_size {} exceeds pair {name} ({}x{})",
                config.crop_size,
                i.width(),
                i.height()
            )));
        }
    }
    let start = Instant::now();
    let mut weights = model.into_weights();
    let mut state = AdamState::new();
    let mut records = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(QUEUE_CAPACITY);
        scope.spawn(move || {
            let mut sampler = Sampler::new(config.seed, pairs.len());
            for step in 0..config.steps {
                if tx.send(make_batch(pairs, config, &mut sampler, step)).is_err() {
                    break;
                }
            }
        });
        for step in 0..config.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::State("batch producer stopped early".into()))??;
            let (loss, params) = training_loss(&mut weights, config, extractor, &batch)?;
            let b = loss.breakdown;
            if !b.total.is_finite() {
                return Err(Error::NonFinite { step, detail: format!("loss {:?}", b) });
            }
            let grads = loss.total.backward()?;
            let mut g = IndexMap::with_capacity(weights.params().len());
            for (name, var) in params.iter() {
                if let Some(gv) = grads.get(var) {
                    g.insert(name.to_string(), gv.to_vec());
                }
            }
            drop(loss);
            adam_step(weights.params_mut(), &g, &mut state, config.learning_rate)?;
            if let Some(name) = weights
                .params()
                .iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.clone())
            {
                return Err(Error::NonFinite { step, detail: format!("parameter {name}") });
            }
            let record = StepRecord { step, img: b.img, per: b.per, map: b.map, total: b.total };
            on_step(&record);
            records.push(record);
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let path = checkpoint_path(out, step + 1);
                weights.save(&path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })?;

    weights.save(out)?;
    Ok(TrainReport {
        records,
        checkpoints,
        weights_path: out.to_path_buf(),
        elapsed: start.elapsed(),
    })
}
