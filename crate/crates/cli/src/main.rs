//! `voipsteg`: generate synthetic descriptor datasets, train and evaluate the
//! detector, benchmark latency and run streaming detection.

mod manifest;

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voipsteg_core::descriptors::{
    embed, frames_for_length, read_dataset, segment_frames, sub_seed, write_dataset, CoverModel,
    DatasetReader,
};
use voipsteg_core::eval::{
    accuracy_at_half, bench_latency, export_features, predict, run_length_grid, run_rate_grid,
};
use voipsteg_core::training::train;
use voipsteg_core::{
    Checkpoint, Config, DatasetHeader, DescriptorKind, Error, HamModel, ModelConfig, VoipSegment,
};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "voipsteg", version, about = "VoIP steganalysis toolkit")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cover/stego dataset.
    Generate(GenerateArgs),
    /// Train a detector on a dataset file.
    Train(TrainArgs),
    /// Accuracy over an embedding-rate or segment-length grid, or on a dataset.
    Evaluate(EvaluateArgs),
    /// Single-segment inference latency.
    Bench(BenchArgs),
    /// Score segments from a dataset file or stdin, one line per segment.
    Detect(DetectArgs),
    /// Write pooled feature vectors as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "lsp")]
    kind: DescriptorKind,
    /// Embedding rates, comma separated; one stego set per rate.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    rate: Vec<f64>,
    /// Segment length in seconds.
    #[arg(long, default_value_t = 1.0)]
    length_s: f64,
    /// Stego segments per rate (and covers, see --balanced).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write as many covers as stego segments in total (default: n covers).
    #[arg(long)]
    balanced: bool,
    /// Generate streams of this many seconds and cut them into segments.
    #[arg(long)]
    stream_s: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with [model], [train] and [cutmix] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Start from the two-block desk-scale configuration instead of the
    /// full-size one (ignored with --config).
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Disable CutMix.
    #[arg(long)]
    no_cutmix: bool,
    /// Train on cross-entropy only.
    #[arg(long)]
    no_contrastive: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    Rate,
    Length,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, conflicts_with = "data")]
    grid: Option<Grid>,
    /// Grid values: embedding rates or segment lengths in seconds.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
    values: Vec<f64>,
    /// Covers and stego segments per grid cell.
    #[arg(long, default_value_t = 500)]
    n_per_cell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on a dataset file instead of a synthetic grid.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Trained checkpoint; without it a freshly initialised model is timed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Time the two-block configuration when no checkpoint is given.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long, default_value = "lsp")]
    kind: DescriptorKind,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Frames per segment (100 = 1 s).
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file, or `-` for stdin.
    #[arg(long, default_value = "-")]
    input: String,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::NotFound { .. }
            | Error::Checkpoint(_)
            | Error::Io(_) => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = std::panic::catch_unwind(|| run(cli.command));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(3),
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::Detect(a) => detect(a),
        Command::ExportFeatures(a) => export(a),
    }
}

fn generate(a: GenerateArgs) -> CmdResult {
    if a.rate.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(usage("--rate values must lie in [0, 1]"));
    }
    let header = DatasetHeader::new(a.kind, a.seed);
    let vocab = header.vocab.clone();
    let model = CoverModel::default();
    let frames = frames_for_length(a.length_s)?;
    let source_frames = match a.stream_s {
        Some(s) if s < a.length_s => return Err(usage("--stream-s must be at least --length-s")),
        Some(s) => frames_for_length(s)?,
        None => frames,
    };
    let cut = |stream: VoipSegment| -> Result<Vec<VoipSegment>, Error> {
        if a.stream_s.is_some() {
            segment_frames(&stream, a.length_s)
        } else {
            Ok(vec![stream])
        }
    };

    let stego_rates: Vec<f64> = a.rate.iter().copied().filter(|&r| r > 0.0).collect();
    let n_covers = if a.balanced { a.n * stego_rates.len().max(1) } else { a.n };
    let mut segments = Vec::new();
    for cover in model.generate_segments(a.kind, &vocab, n_covers, source_frames, sub_seed(a.seed, 0))? {
        segments.extend(cut(cover)?);
    }
    for (k, &rate) in stego_rates.iter().enumerate() {
        let seed = sub_seed(a.seed, 1 + k as u64);
        let carriers = model.generate_segments(a.kind, &vocab, a.n, source_frames, sub_seed(seed, 0))?;
        for (i, c) in carriers.iter().enumerate() {
            let mut s = embed(c, &vocab, rate, sub_seed(seed, 1 + i as u64))?;
            s.id = format!("stego-r{rate}-{i}");
            segments.extend(cut(s)?);
        }
    }
    write_dataset(&a.out, &header, &segments)?;
    log::info!("wrote {} segments to {}", segments.len(), a.out.display());
    RunManifest::new("generate")
        .seed(a.seed)
        .output(&a.out)
        .param("kind", a.kind.as_str())
        .param("rates", &format!("{:?}", a.rate))
        .param("length_s", &a.length_s.to_string())
        .param("segments", &segments.len().to_string())
        .write_beside(&a.out)?;
    Ok(())
}

fn load_config(a: &TrainArgs, header: &DatasetHeader) -> Result<Config, Failure> {
    let mut config = match &a.config {
        Some(path) => Config::load(path)?,
        None => {
            let base = if a.desk_scale { Config::desk_scale() } else { Config::full_scale() };
            base.for_kind(header.kind)
        }
    };
    if config.model.vocab().is_empty() || config.model.vocab() != header.vocab {
        if a.config.is_some() && !config.model.vocab.is_empty() {
            return Err(Error::Validation(format!(
                "config vocabulary {:?} does not match dataset vocabulary {:?}",
                config.model.vocab, header.vocab
            ))
            .into());
        }
        config.model.vocab = header.vocab.clone();
    }
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        config.train.epochs = epochs;
    }
    if let Some(steps) = a.max_steps {
        config.train.max_steps = steps;
    }
    if a.no_cutmix {
        config.cutmix.enabled = false;
    }
    if a.no_contrastive {
        config.train.joint = false;
    }
    config.validate()?;
    Ok(config)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let (header, train_set) = read_dataset(&a.train)?;
    let val_set = match &a.val {
        Some(path) => {
            let (vh, v) = read_dataset(path)?;
            if vh.kind != header.kind || vh.vocab != header.vocab {
                return Err(Error::Validation("validation set descriptors differ from training set".into()).into());
            }
            v
        }
        None => Vec::new(),
    };
    let config = load_config(&a, &header)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::open(&a.out, e))?;
    let outcome = train(&config, &train_set, &val_set)?;

    let best = a.out.join("best.ckpt");
    let last = a.out.join("last.ckpt");
    let metrics = a.out.join("metrics.csv");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    fs::write(&metrics, outcome.log.to_csv()).map_err(|e| Error::open(&metrics, e))?;
    if let Some(acc) = outcome.best_val_accuracy {
        println!("best validation accuracy {acc:.4}");
    }
    println!("{} steps; checkpoints in {}", outcome.last.step, a.out.display());

    let mut m = RunManifest::new("train")
        .seed(config.train.seed)
        .config(config.to_toml_string()?)
        .input(&a.train)
        .output(&best)
        .output(&last)
        .output(&metrics);
    if let Some(v) = &a.val {
        m = m.input(v);
    }
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn compatible(model: &HamModel, header: &DatasetHeader) -> Result<(), Failure> {
    let cfg = model.config();
    if cfg.kind != header.kind || cfg.vocab() != header.vocab {
        return Err(Error::Validation(format!(
            "checkpoint expects {} descriptors with vocab {:?}, data has {} with {:?}",
            cfg.kind,
            cfg.vocab(),
            header.kind,
            header.vocab
        ))
        .into());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut m = RunManifest::new("evaluate").seed(a.seed).input(&a.checkpoint);
    let report = if let Some(data) = &a.data {
        let model = ckpt.model()?;
        let (header, segments) = read_dataset(data)?;
        compatible(&model, &header)?;
        if segments.is_empty() {
            return Err(Error::Validation(format!("{} holds no segments", data.display())).into());
        }
        let probs = predict(&model, &segments, 256)?;
        let labels: Vec<bool> = segments.iter().map(VoipSegment::is_stego).collect();
        let acc = accuracy_at_half(&probs, &labels)?;
        m = m.input(data);
        format!("accuracy,count\n{acc},{}\n", segments.len())
    } else {
        let report = match a.grid.unwrap_or(Grid::Rate) {
            Grid::Rate => run_rate_grid(&ckpt, &a.values, a.n_per_cell, a.seed)?,
            Grid::Length => run_length_grid(&ckpt, &a.values, a.n_per_cell, a.seed)?,
        };
        print!("{}", report.to_table());
        report.to_csv()
    };
    match &a.out {
        Some(path) => {
            fs::write(path, &report).map_err(|e| Error::open(path, e))?;
            m.output(path).write_beside(path)?;
        }
        None if a.data.is_some() => print!("{report}"),
        None => {}
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let model = match &a.checkpoint {
        Some(path) => Checkpoint::load(path)?.model()?,
        None => {
            let cfg = if a.desk_scale { ModelConfig::desk_scale() } else { ModelConfig::default() };
            HamModel::new(cfg.for_kind(a.kind), a.seed)?
        }
    };
    let stats = bench_latency(&model, a.n, a.frames, a.seed)?;
    let json = stats.to_json();
    println!("{json}");
    if let Some(path) = &a.out {
        fs::write(path, format!("{json}\n")).map_err(|e| Error::open(path, e))?;
        let mut m = RunManifest::new("bench").seed(a.seed).output(path);
        if let Some(c) = &a.checkpoint {
            m = m.input(c);
        }
        m.write_beside(path)?;
    }
    Ok(())
}

fn detect_stream<R: BufRead>(model: &HamModel, input: R) -> CmdResult {
    let Some(reader) = DatasetReader::new(input)? else {
        return Ok(());
    };
    compatible(model, reader.header())?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "id,p_stego,label")?;
    out.flush()?;
    for segment in reader {
        let segment = segment?;
        let p = model.infer(&[&segment.matrix])?.stego_probs()[0];
        let label = if p >= 0.5 { "stego" } else { "cover" };
        writeln!(out, "{},{p},{label}", segment.id)?;
        out.flush()?;
    }
    Ok(())
}

fn detect(a: DetectArgs) -> CmdResult {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    if a.input == "-" {
        detect_stream(&model, io::stdin().lock())
    } else {
        let path = Path::new(&a.input);
        let file = fs::File::open(path).map_err(|e| Error::open(path, e))?;
        detect_stream(&model, BufReader::new(file))
    }
}

fn export(a: ExportArgs) -> CmdResult {
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let (header, segments) = read_dataset(&a.data)?;
    compatible(&model, &header)?;
    export_features(&model, &segments, &a.out)?;
    RunManifest::new("export-features")
        .input(&a.checkpoint)
        .input(&a.data)
        .output(&a.out)
        .write_beside(&a.out)?;
    Ok(())
}

