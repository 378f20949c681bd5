//! Inference latency, throughput and FLOP accounting.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{network_input, PatchSpec};
use crate::error::{Error, Result};
use crate::network::{summarize, ArchConfig, LayerCost, Model, ModelSummary};
use crate::par;
use crate::tensor::Tensor;

pub const MIN_WARMUP: usize = 5;
pub const MIN_RUNS: usize = 30;
pub const CSV_HEADER: &str = "resolution,mean_ms,median_ms,p95_ms,fps,flops_g,params";

/// Network FLOPs at `height` × `width` plus the density map, itemized.
/// The density map is counted as one comparison per element of its channel
/// minimum and of each pass of its separable window minimum.
pub fn count_flops(arch: &ArchConfig, height: usize, width: usize, patch: Option<PatchSpec>) -> Result<ModelSummary> {
    let mut s = summarize(arch, height, width)?;
    if let Some(p) = patch {
        let px = (height * width) as u64;
        let window = 2 * (p.size() as u64 - 1);
        s.items.insert(
            0,
            LayerCost { name: "cdm".into(), kind: "cdm", params: 0, flops: px * (2 + window) },
        );
    }
    Ok(s)
}

/// A short description of the machine the timings come from.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores; {}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub resolution: usize,
    pub warmup: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub flops: u64,
    pub params: u64,
    pub hardware: String,
    pub parallel: bool,
    pub threads: usize,
}

/// The CSV view of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub resolution: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub flops_g: f64,
    pub params: u64,
}

impl BenchReport {
    /// Builds a report from per-run latencies in milliseconds. Median is the
    /// middle value (mean of the two middle values for even counts); p95 is
    /// the nearest-rank percentile.
    pub fn from_latencies(resolution: usize, warmup: usize, latencies_ms: &[f64], summary: &ModelSummary) -> Result<Self> {
        if latencies_ms.is_empty() {
            return Err(Error::param("runs", "no latencies"));
        }
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean_ms = sorted.iter().sum::<f64>() / n as f64;
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(BenchReport {
            resolution,
            warmup,
            runs: n,
            mean_ms,
            median_ms,
            p95_ms: sorted[rank - 1],
            fps: 1000.0 / mean_ms,
            flops: summary.flops(),
            params: summary.params(),
            hardware: hardware_description(),
            parallel: par::parallel_enabled(),
            threads: if par::parallel_enabled() { par::current_threads() } else { 1 },
        })
    }

    pub fn flops_g(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn row(&self) -> BenchRow {
        BenchRow {
            resolution: self.resolution,
            mean_ms: self.mean_ms,
            median_ms: self.median_ms,
            p95_ms: self.p95_ms,
            fps: self.fps,
            flops_g: self.flops_g(),
            params: self.params,
        }
    }

    /// `key = value` lines; [`BenchReport::from_text`] reads them back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "runs = {}", self.runs);
        let _ = writeln!(s, "mean_ms = {}", self.mean_ms);
        let _ = writeln!(s, "median_ms = {}", self.median_ms);
        let _ = writeln!(s, "p95_ms = {}", self.p95_ms);
        let _ = writeln!(s, "fps = {}", self.fps);
        let _ = writeln!(s, "flops = {}", self.flops);
        let _ = writeln!(s, "params = {}", self.params);
        let _ = writeln!(s, "hardware = {}", self.hardware);
        let _ = writeln!(s, "parallel = {}", self.parallel);
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Config(format!("report line {line:?} is not key = value")))?;
            if fields.insert(k.trim(), v).is_some() {
                return Err(Error::Config(format!("duplicate report key {k}")));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Config(format!("report is missing {k}")))
        };
        let report = BenchReport {
            resolution: field(take("resolution")?, "resolution")?,
            warmup: field(take("warmup")?, "warmup")?,
            runs: field(take("runs")?, "runs")?,
            mean_ms: field(take("mean_ms")?, "mean_ms")?,
            median_ms: field(take("median_ms")?, "median_ms")?,
            p95_ms: field(take("p95_ms")?, "p95_ms")?,
            fps: field(take("fps")?, "fps")?,
            flops: field(take("flops")?, "flops")?,
            params: field(take("params")?, "params")?,
            hardware: take("hardware")?.to_string(),
            parallel: field(take("parallel")?, "parallel")?,
            threads: field(take("threads")?, "threads")?,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::Config(format!("unknown report key {k}")));
        }
        Ok(report)
    }
}

fn field<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("report field {key}: cannot parse {v:?}")))
}

impl BenchRow {
    /// One CSV line without the header. Floats use the shortest text that
    /// parses back to the same value.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.resolution, self.mean_ms, self.median_ms, self.p95_ms, self.fps, self.flops_g, self.params
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Config(format!("expected 7 CSV columns, got {}", cols.len())));
        }
        Ok(BenchRow {
            resolution: field(cols[0], "resolution")?,
            mean_ms: field(cols[1], "mean_ms")?,
            median_ms: field(cols[2], "median_ms")?,
            p95_ms: field(cols[3], "p95_ms")?,
            fps: field(cols[4], "fps")?,
            flops_g: field(cols[5], "flops_g")?,
            params: field(cols[6], "params")?,
        })
    }
}

/// Header plus one row per report.
pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.row().to_csv());
        s.push('\n');
    }
    s
}

pub fn rows_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Config(format!("bad CSV header {other:?}"))),
    }
    lines.map(BenchRow::from_csv).collect()
}

/// Deterministic (1, 3, size, size) input in [0, 1].
pub fn synthetic_input(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 3, size, size], |_, _, _, _| rng.random::<f32>())
}

/// Times the end-to-end forward (density map, concat, network) on a
/// `resolution`² input at batch 1. The input is allocated before timing.
/// `parallel` switches the engine's data parallelism for the timed runs.
pub fn measure_fps(
    model: &Model,
    resolution: usize,
    warmup: usize,
    runs: usize,
    seed: u64,
    parallel: bool,
) -> Result<BenchReport> {
    let m = model.arch().multiple();
    if resolution == 0 || resolution % m != 0 {
        return Err(Error::param(
            "resolution",
            format!("{resolution} must be a non-zero multiple of {m} (2^depth)"),
        ));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::param("warmup", format!("{warmup} is below {MIN_WARMUP}")));
    }
    if runs < MIN_RUNS {
        return Err(Error::param("runs", format!("{runs} is below {MIN_RUNS}")));
    }
    let patch = PatchSpec::default();
    let summary = count_flops(model.arch(), resolution, resolution, Some(patch))?;
    let input = synthetic_input(resolution, seed);
    par::with_parallelism(parallel, || {
        let once = || -> Result<f64> {
            let start = Instant::now();
            let out = model.infer(&network_input(&input, patch, true)?)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            Ok(ms)
        };
        for _ in 0..warmup {
            once()?;
        }
        let lat = (0..runs).map(|_| once()).collect::<Result<Vec<_>>>()?;
        BenchReport::from_latencies(resolution, warmup, &lat, &summary)
    })
}
