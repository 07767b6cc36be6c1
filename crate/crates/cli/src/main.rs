//! `uwrestore`: train, run and evaluate the underwater restoration model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use uwrestore::checkpoint::Checkpoint;
use uwrestore::data_io::{channel_histogram_files, index_pairs, list_images, load_image, save_image};
use uwrestore::diffusion::SamplingMode;
use uwrestore::objectives::{psnr, ssim_planes};
use uwrestore::pipeline::{fit, FitOutput, Restorer, SampleConfig, TrainConfig, Trainer};
use uwrestore::quality::{uciqe_with, uiqm_with, MetricReport, MetricRow, MetricWeights};

#[derive(Parser, Debug)]
#[command(name = "uwrestore", version, about = "Underwater image restoration with wavelet-domain diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on paired degraded/reference images.
    Train(TrainArgs),
    /// Restore every image in a directory.
    Enhance(EnhanceArgs),
    /// Score images with full-reference and non-reference metrics.
    Evaluate(EvaluateArgs),
    /// Per-channel intensity histograms of a directory of images.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Run configuration whose `[sample]` table supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reverse steps (must divide the training timesteps).
    #[arg(long)]
    steps: Option<usize>,
    /// Use the posterior mean at every reverse step.
    #[arg(long)]
    deterministic: bool,
    /// Skip global color correction.
    #[arg(long)]
    no_gcc: bool,
    /// Use the raw detail bands instead of the refined ones.
    #[arg(long)]
    no_csdr: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    enhanced: PathBuf,
    /// Ground-truth images matched by file stem; enables PSNR and SSIM.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// JSON report path; a CSV table is written beside it.
    #[arg(long)]
    report: PathBuf,
    /// Metric weight constants (defaults to the pinned table).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// Write the histogram table here instead of stdout.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write a PNG plot of the histograms.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataPaths {
    degraded: Option<PathBuf>,
    reference: Option<PathBuf>,
}

/// Everything a run reads from its config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    output: Option<PathBuf>,
    data: DataPaths,
    train: TrainConfig,
    sample: SampleConfig,
}

#[derive(Serialize)]
struct EnhanceRecord<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    steps: usize,
    sample: &'a SampleConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct EvaluateRecord<'a> {
    enhanced: &'a Path,
    reference: Option<&'a Path>,
    weights: &'a MetricWeights,
}

enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<uwrestore::Error> for Failure {
    fn from(e: uwrestore::Error) -> Self {
        match e {
            uwrestore::Error::Config(_) => Failure::Usage(e.to_string()),
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn read_config(path: &Path) -> Outcome<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn to_toml<T: Serialize>(v: &T) -> Outcome<String> {
    toml::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> Outcome<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))
}

fn train(args: TrainArgs) -> Outcome<()> {
    let mut config = read_config(&args.config)?;
    if let Some(o) = args.output {
        config.output = Some(o);
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    let (Some(degraded), Some(reference)) = (&config.data.degraded, &config.data.reference) else {
        return Err(Failure::Usage("config must set data.degraded and data.reference".into()));
    };
    let Some(output) = config.output.clone() else {
        return Err(Failure::Usage("no output directory (set `output` or pass --output)".into()));
    };
    config.train.validate()?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            let mut stored = t.config.clone();
            stored.epochs = config.train.epochs;
            if stored != config.train {
                warn!("resuming with the checkpoint's training settings; only `epochs` is taken from the config");
            }
            t.config.epochs = config.train.epochs;
            config.train = t.config.clone();
            info!("resuming {} at epoch {}", path.display(), t.epoch);
            t
        }
        None => Trainer::new(config.train.clone())?,
    };

    let effective = to_toml(&config)?;
    println!("# effective configuration\n{effective}");
    let index = index_pairs(degraded, reference)?;
    info!("training on {} pairs ({} files skipped)", index.len(), index.skipped.len());
    create_dir(&output)?;
    write_text(&output.join("run_config.toml"), &effective)?;
    fit(&index, &mut trainer, &FitOutput { dir: output.clone() })?;
    info!("finished at epoch {}; last checkpoint {}", trainer.epoch, FitOutput { dir: output }.last_path().display());
    Ok(())
}

fn enhance(args: EnhanceArgs) -> Outcome<()> {
    let mut sample = match &args.config {
        Some(p) => read_config(p)?.sample,
        None => SampleConfig::default(),
    };
    if args.steps.is_some() {
        sample.steps = args.steps;
    }
    if args.deterministic {
        sample.mode = SamplingMode::Deterministic;
    }
    if args.no_gcc {
        sample.use_gcc = false;
    }
    if args.no_csdr {
        sample.use_csdr = false;
    }
    if let Some(s) = args.seed {
        sample.seed = s;
    }
    if args.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }

    let restorer = Restorer::load(&args.ckpt)?;
    let steps = restorer.steps(&sample);
    if steps == 0 || restorer.train_config.timesteps % steps != 0 {
        return Err(Failure::Usage(format!(
            "--steps {steps} must divide the training timesteps {}",
            restorer.train_config.timesteps
        )));
    }
    let record = to_json(&EnhanceRecord {
        checkpoint: &args.ckpt,
        input: &args.input,
        steps,
        sample: &sample,
        train: &restorer.train_config,
    })?;
    println!("# effective configuration\n{record}");

    let inputs = list_images(&args.input)?;
    if inputs.is_empty() {
        return Err(Failure::Data(format!("no images in {}", args.input.display())));
    }
    create_dir(&args.output)?;
    write_text(&args.output.join("enhance_config.json"), &record)?;

    let run = |i: usize| -> Outcome<()> {
        let path = &inputs[i];
        let image = load_image(path)?;
        let out = restorer.enhance(&image, i as u64, &sample)?;
        let name = Path::new(path.file_name().unwrap_or_default()).with_extension("png");
        save_image(&args.output.join(&name), &out)?;
        info!("{} -> {}", path.display(), name.display());
        Ok(())
    };
    let jobs = args.jobs.min(inputs.len());
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..jobs)
            .map(|j| {
                let (run, n) = (&run, inputs.len());
                s.spawn(move || (j..n).step_by(jobs).try_for_each(run))
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|_| Err(Failure::Runtime("worker panicked".into()))))
            .collect::<Outcome<Vec<()>>>()
    })?;
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Outcome<()> {
    let weights = match &args.weights {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            MetricWeights::from_toml(&text)?
        }
        None => MetricWeights::pinned(),
    };
    let score = |file: String, img: &_, reference: Option<&_>| -> Outcome<MetricRow> {
        Ok(MetricRow {
            file,
            psnr: reference.map(|r| psnr(img, r, 255.0)).transpose()?,
            ssim: reference.map(|r| ssim_planes(img, r)).transpose()?,
            uciqe: uciqe_with(img, &weights.uciqe)?,
            uiqm: uiqm_with(img, &weights.uiqm)?,
        })
    };
    let mut rows = Vec::new();
    match &args.reference {
        Some(reference) => {
            let index = index_pairs(&args.enhanced, reference)?;
            for e in &index.entries {
                let img = load_image(&e.degraded)?;
                rows.push(score(e.id.clone(), &img, Some(&load_image(&e.reference)?))?);
            }
        }
        None => {
            for path in list_images(&args.enhanced)? {
                let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
                rows.push(score(file, &load_image(&path)?, None)?);
            }
        }
    }
    let report = MetricReport::new(rows, weights.version)?;
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write(&args.report)?;
    let record = to_json(&EvaluateRecord {
        enhanced: &args.enhanced,
        reference: args.reference.as_deref(),
        weights: &weights,
    })?;
    write_text(&args.report.with_extension("config.json"), &record)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn stats(args: StatsArgs) -> Outcome<()> {
    let files = list_images(&args.input)?;
    let hist = channel_histogram_files(&files, args.bins)?;
    let table = hist.to_table();
    match &args.table {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    info!(
        "{} images, channel means R {:.2} G {:.2} B {:.2}",
        hist.images, hist.means[0], hist.means[1], hist.means[2]
    );
    if let Some(p) = &args.plot {
        hist.save_plot(p)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
