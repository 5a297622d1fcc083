//! `mpf`: one binary exposing the full pipeline — synthetic data generation,
//! training, evaluation, receptive-field analysis, graph export and class
//! statistics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpf_core::analyzer;
use mpf_core::arch::ArchitectureSpec;
use mpf_core::checkpoint::Checkpoint;
use mpf_core::dataset::{class_frequencies, Dataset};
use mpf_core::error::Error;
use mpf_core::loss::ClassStats;
use mpf_core::model::{BuildOptions, UnrolledModel};
use mpf_core::synth::{write_dataset, SyntheticTaskConfig};
use mpf_core::tensor::{Precision, Shape, Tensor};
use mpf_core::trainer::{self, LossDivisor, TrainConfig};

#[derive(Parser)]
#[command(name = "mpf", version, about = "Multi-path feedback network engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic context-dependent segmentation dataset.
    GenData(GenDataArgs),
    /// Train a model described by an architecture file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and report PA/CA/mIoU.
    Eval(EvalArgs),
    /// Report theoretical (or measured) receptive fields per layer and step.
    AnalyzeRf(AnalyzeRfArgs),
    /// Write the unrolled computation graph in DOT format.
    ExportGraph(ExportGraphArgs),
    /// Report class frequencies and loss re-weighting factors for a dataset.
    ClassStats(ClassStatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config file (`key = value`: size, textures, border, noise, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for images, labels and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to generate.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Base seed; sample i uses seed + i. Overrides the config file seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture file; required unless resuming.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Optional validation manifest (adds PA/CA to the log).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Total epochs (a resumed run continues up to this count).
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of a horizontal flip per sample.
    #[arg(long, default_value_t = 0.5)]
    hflip_prob: f64,
    /// Random crop size as HxW (default: full image size).
    #[arg(long)]
    crop: Option<String>,
    /// Numeric precision: single or double.
    #[arg(long, default_value = "single")]
    precision: String,
    /// Cumulative-frequency threshold of the class re-weighting rule.
    #[arg(long, default_value_t = 0.85)]
    eta_threshold: f64,
    /// Continue from a checkpoint (architecture comes from the checkpoint).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where to write the final checkpoint.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Training log CSV (epoch,loss,PA,CA).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation manifest.
    #[arg(long)]
    data: PathBuf,
    /// Machine-readable per-class report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeRfArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Input image side length used for the analysis.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Measure gradient support on a random model instead of the exact cone.
    #[arg(long, default_value_t = false)]
    empirical: bool,
    /// Seed for the random model and probe image (empirical mode).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportGraphArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Input image side length used to build the graph.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Output DOT path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClassStatsArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Number of classes in the dataset.
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0.85)]
    eta_threshold: f64,
    /// Output CSV path (stdout table only when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> mpf_core::Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::AnalyzeRf(args) => analyze_rf(args),
        Command::ExportGraph(args) => export_graph(args),
        Command::ClassStats(args) => class_stats(args),
    }
}

fn read_to_string(path: &Path) -> mpf_core::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> mpf_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_precision(raw: &str) -> mpf_core::Result<Precision> {
    match raw {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        other => Err(Error::InvalidArgument(format!(
            "precision must be 'single' or 'double', got '{other}'"
        ))),
    }
}

fn parse_crop(raw: &str) -> mpf_core::Result<(usize, usize)> {
    let (h, w) = raw
        .split_once('x')
        .ok_or_else(|| Error::InvalidArgument(format!("crop must be HxW, got '{raw}'")))?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad crop dimension '{s}'")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn gen_data(args: GenDataArgs) -> mpf_core::Result<()> {
    let mut config = match &args.config {
        Some(path) => SyntheticTaskConfig::parse(&read_to_string(path)?)?,
        None => SyntheticTaskConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let manifest = write_dataset(&args.out, &config, args.count, config.seed)?;
    println!(
        "wrote {} samples ({} classes, {}x{} px) and manifest {}",
        args.count,
        config.num_classes(),
        config.image_size,
        config.image_size,
        manifest.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> mpf_core::Result<()> {
    let precision = parse_precision(&args.precision)?;
    let crop = args.crop.as_deref().map(parse_crop).transpose()?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        hflip_probability: args.hflip_prob,
        crop,
        loss_divisor: LossDivisor::BatchSize,
        precision,
        eta_threshold: args.eta_threshold,
        parallel: true,
    };

    let (arch, resume_from) = match (&args.resume, &args.arch) {
        (Some(ckpt_path), _) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            (ArchitectureSpec::parse(&ckpt.arch_source)?, Some(ckpt))
        }
        (None, Some(arch_path)) => (ArchitectureSpec::parse(&read_to_string(arch_path)?)?, None),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "either --arch or --resume is required".into(),
            ));
        }
    };

    for warning in arch.validate()? {
        eprintln!("warning: {warning}");
    }

    let data = Dataset::open(&args.data, arch.num_classes)?;
    let val = args
        .val
        .as_deref()
        .map(|p| Dataset::open(p, arch.num_classes))
        .transpose()?;

    let outcome = match resume_from {
        Some(ckpt) => trainer::resume(&ckpt, &data, val.as_ref(), &config)?,
        None => trainer::train(&arch, &data, val.as_ref(), &config)?,
    };

    println!(
        "class weights (eta = {:.6}): {:?}",
        outcome.class_stats.eta, outcome.class_stats.weights
    );
    for entry in &outcome.log {
        match (entry.val_pa, entry.val_ca) {
            (Some(pa), Some(ca)) => println!(
                "epoch {:>3}  loss {:>12.6}  val PA {:.4}  val CA {:.4}",
                entry.epoch, entry.loss, pa, ca
            ),
            _ => println!("epoch {:>3}  loss {:>12.6}", entry.epoch, entry.loss),
        }
    }

    outcome.checkpoint.save(&args.out_checkpoint)?;
    println!("checkpoint written to {}", args.out_checkpoint.display());

    if let Some(log_path) = &args.log {
        let mut csv = String::from("epoch,loss,PA,CA\n");
        for entry in &outcome.log {
            csv.push_str(&entry.csv_line());
            csv.push('\n');
        }
        write_text(log_path, &csv)?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> mpf_core::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let arch = ArchitectureSpec::parse(&ckpt.arch_source)?;
    let data = Dataset::open(&args.data, arch.num_classes)?;
    let s = data.load(0)?.image.shape();
    let (mut model, _) = UnrolledModel::build(
        &arch,
        BuildOptions::new((s.height, s.width), ckpt.precision),
    )?;
    model.load_values(&ckpt.params)?;
    let cm = trainer::evaluate(&model, &data)?;
    print!("{}", cm.report());
    if let Some(report) = &args.report {
        write_text(report, &cm.report_csv())?;
    }
    Ok(())
}

fn analyze_rf(args: AnalyzeRfArgs) -> mpf_core::Result<()> {
    let arch = ArchitectureSpec::parse(&read_to_string(&args.arch)?)?;
    for warning in arch.validate()? {
        eprintln!("warning: {warning}");
    }
    let (mut model, _) = UnrolledModel::build(
        &arch,
        BuildOptions::new((args.size, args.size), Precision::Double),
    )?;
    let csv = if args.empirical {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        model.init_params(&mut rng);
        let shape = Shape::new(1, arch.in_channels, args.size, args.size)?;
        let data = (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Tensor::from_vec(shape, Precision::Double, data)?;
        analyzer::rf_csv_empirical(&model, &image)?
    } else {
        analyzer::rf_csv_theoretical(&model)?
    };
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn export_graph(args: ExportGraphArgs) -> mpf_core::Result<()> {
    let arch = ArchitectureSpec::parse(&read_to_string(&args.arch)?)?;
    let (model, _) = UnrolledModel::build(
        &arch,
        BuildOptions::new((args.size, args.size), Precision::Double),
    )?;
    let dot = analyzer::export_graph(&model);
    match &args.out {
        Some(path) => write_text(path, &dot)?,
        None => print!("{dot}"),
    }
    Ok(())
}

fn class_stats(args: ClassStatsArgs) -> mpf_core::Result<()> {
    if args.classes < 2 || args.classes > 255 {
        return Err(Error::InvalidArgument("classes must be in 2..=255".into()));
    }
    if !(0.0..1.0).contains(&args.eta_threshold) || args.eta_threshold <= 0.0 {
        return Err(Error::InvalidArgument("eta threshold must be in (0, 1)".into()));
    }
    let data = Dataset::open(&args.data, args.classes)?;
    let frequencies = class_frequencies(&data)?;
    let stats = ClassStats::from_frequencies(frequencies, args.eta_threshold);
    print!("{}", stats.report());
    if let Some(out) = &args.out {
        let mut csv = String::from("class,frequency,weight\n");
        for (k, (f, w)) in stats.frequencies.iter().zip(&stats.weights).enumerate() {
            csv.push_str(&format!("{k},{f},{w}\n"));
        }
        csv.push_str(&format!("eta,{},\n", stats.eta));
        write_text(out, &csv)?;
    }
    Ok(())
}
