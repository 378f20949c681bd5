use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::density::PatchSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ArchConfig;

/// Keys accepted in a config file, in the order they are written back.
pub const CONFIG_KEYS: [&str; 10] = [
    "learning_rate",
    "batch_size",
    "steps",
    "seed",
    "crop_size",
    "alpha",
    "beta",
    "gamma",
    "patch_size",
    "checkpoint_every",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub flip_prob: f32,
    pub loss_weights: LossWeights,
    pub patch: PatchSpec,
    /// Save a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Network preset; not part of the config file.
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 5,
            steps: 200,
            seed: 0,
            crop_size: 64,
            flip_prob: 0.5,
            loss_weights: LossWeights::default(),
            patch: PatchSpec::default(),
            checkpoint_every: 0,
            arch: ArchConfig::toy(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob = {} must lie in [0, 1]", self.flip_prob)));
        }
        let m = self.arch.multiple();
        if self.crop_size == 0 || self.crop_size % m != 0 {
            return Err(Error::Config(format!(
                "crop_size = {} must be a non-zero multiple of {m} (2^depth)",
                self.crop_size
            )));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; unknown or repeated keys are errors.
    pub fn parse_overrides(mut self, text: &str) -> Result<Self> {
        let mut seen = Vec::new();
        let (mut alpha, mut beta, mut gamma) = (
            self.loss_weights.alpha(),
            self.loss_weights.beta(),
            self.loss_weights.gamma(),
        );
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", no + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
            }
            seen.push(key);
            match key {
                "learning_rate" => self.learning_rate = parse(key, value)?,
                "batch_size" => self.batch_size = parse(key, value)?,
                "steps" => self.steps = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                "crop_size" => self.crop_size = parse(key, value)?,
                "alpha" => alpha = parse(key, value)?,
                "beta" => beta = parse(key, value)?,
                "gamma" => gamma = parse(key, value)?,
                "patch_size" => self.patch = PatchSpec::new(parse(key, value)?)?,
                "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
                _ => unreachable!(),
            }
        }
        self.loss_weights = LossWeights::new(alpha, beta, gamma)?;
        self.validate()?;
        Ok(self)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::default().parse_overrides(&text)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// The config-file view; parsing it back reproduces every file key.
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "crop_size = {}", self.crop_size)?;
        writeln!(f, "alpha = {}", self.loss_weights.alpha())?;
        writeln!(f, "beta = {}", self.loss_weights.beta())?;
        writeln!(f, "gamma = {}", self.loss_weights.gamma())?;
        writeln!(f, "patch_size = {}", self.patch.size())?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}
