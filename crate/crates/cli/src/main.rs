//! `falcon`: dehaze images, compute density maps, train, benchmark,
//! synthesize corpora and inspect weight files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use falcon_core::bench::{measure_fps, to_csv, BenchReport};
use falcon_core::density::{density_map, PatchSpec, DEFAULT_PATCH};
use falcon_core::image_synth::{decode_image, encode_gray_png, encode_image, load_pairs, write_corpus};
use falcon_core::losses::FeatureExtractor;
use falcon_core::network::{ArchConfig, Model, ModelWeights};
use falcon_core::trainer::{train_model, TrainConfig};
use falcon_core::{par, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "falcon", version, about = "Single-image dehazing with a frequency bottleneck U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dehaze one image with trained weights.
    Dehaze(DehazeArgs),
    /// Write the haze density map of an image as a grayscale PNG.
    Density(DensityArgs),
    /// Train a network on a directory of hazy/clear pairs.
    Train(TrainArgs),
    /// Time end-to-end inference at one or more resolutions.
    Bench(BenchArgs),
    /// Write the synthetic haze corpus.
    Synth(SynthArgs),
    /// List the tensors of a weight file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DehazeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Feed a zero mask instead of the density map.
    #[arg(long)]
    no_cdm: bool,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    patch: usize,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    patch: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with hazy/ and clear/ subdirectories (or a corpus root
    /// holding train/).
    #[arg(long)]
    data: PathBuf,
    /// Where the final weights go; checkpoints are written next to it.
    #[arg(long)]
    output: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network preset: toy or default.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Overrides the config's step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes the per-step loss components as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Print a progress line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Weight file; without it a freshly initialized preset is timed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Square input sizes.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    resolution: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Let the engine use its worker threads inside the timed region.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Writes the `key = value` reports, separated by blank lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Format { .. } | Error::Decode { .. } | Error::Unsupported(_) => EXIT_FORMAT,
        Error::Config(_) | Error::Parameter { .. } | Error::Dimension { .. } => EXIT_USAGE,
        Error::State(_) | Error::NonFinite { .. } => EXIT_FAILURE,
    }
}

fn write_text(path: &Path, text: &str) -> falcon_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn dehaze(a: DehazeArgs) -> falcon_core::Result<()> {
    let patch = PatchSpec::new(a.patch)?;
    let model = Model::load(&a.weights)?;
    let image = decode_image(&a.input)?;
    let out = model.dehaze_image(&image, patch, !a.no_cdm)?;
    encode_image(&out, &a.output)?;
    println!("wrote {} ({}x{})", a.output.display(), out.width(), out.height());
    Ok(())
}

fn density(a: DensityArgs) -> falcon_core::Result<()> {
    let patch = PatchSpec::new(a.patch)?;
    let image = decode_image(&a.input)?;
    let map = density_map(&image.to_tensor(), patch)?;
    encode_gray_png(map.plane(0), image.width(), image.height(), &a.output)?;
    println!("wrote {} ({}x{})", a.output.display(), image.width(), image.height());
    Ok(())
}

fn train(a: TrainArgs) -> falcon_core::Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    config.arch = ArchConfig::preset(&a.preset)?;
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let pairs = load_pairs(&a.data)?;
    let extractor = FeatureExtractor::seeded()?;
    let model = Model::init(config.arch, config.seed)?;
    let log_every = a.log_every;
    let report = train_model(&config, model, &pairs, &extractor, &a.output, &mut |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == config.steps) {
            eprintln!("step {:>5}  total {:.6}  img {:.6}", r.step, r.total, r.img);
        }
    })?;
    if let Some(p) = &a.loss_csv {
        write_text(p, &report.to_csv())?;
    }
    println!(
        "trained {} steps in {:.1} s; weights at {}",
        report.records.len(),
        report.elapsed.as_secs_f64(),
        report.weights_path.display()
    );
    Ok(())
}

fn bench(a: BenchArgs) -> falcon_core::Result<()> {
    let model = match &a.weights {
        Some(p) => Model::load(p)?,
        None => Model::init(ArchConfig::preset(&a.preset)?, a.seed)?,
    };
    let reports = a
        .resolution
        .iter()
        .map(|&r| measure_fps(&model, r, a.warmup, a.runs, a.seed, a.parallel))
        .collect::<falcon_core::Result<Vec<BenchReport>>>()?;
    let text = reports.iter().map(BenchReport::to_text).collect::<Vec<_>>().join("\n");
    let csv = to_csv(&reports);
    print!("{text}\n{csv}");
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> falcon_core::Result<()> {
    let files = write_corpus(&a.output, a.seed)?;
    println!("wrote {} files under {}", files.len(), a.output.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> falcon_core::Result<()> {
    let weights = ModelWeights::load(&a.weights)?;
    for (name, t) in weights.file_entries() {
        let d = t.dims();
        println!("{name}\t{}x{}x{}x{}", d[0], d[1], d[2], d[3]);
    }
    println!("parameters: {}", weights.param_count());
    if let Ok(model) = Model::from_weights(weights) {
        let arch = model.arch();
        println!("architecture: depth {} base {} alpha_in {}", arch.depth, arch.base, arch.alpha_in);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("FALCON_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: FALCON_THREADS must be a non-negative integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        Err(_) => 0,
    };
    par::init_threads(threads);
    let result = match cli.command {
        Command::Dehaze(a) => dehaze(a),
        Command::Density(a) => density(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
